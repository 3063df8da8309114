//! Personalized federated learning with heterogeneous modular networks.
//!
//! Each client assembles its own network from a shared pool of module
//! blocks. A routing hypernetwork reads the client's whole dataset and
//! produces per-path probabilities; relaxed binary decisions drawn from
//! those probabilities gate the message passing between blocks, and only
//! the blocks a client actually reaches are exchanged with the server.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`tape`], [`param`], [`ops`]: a small dense engine with
//!   reverse-mode gradients and SGD.
//! - [`arch`], [`pool`], [`network`]: architecture bookkeeping, the module
//!   pool, and the gated forward pass.
//! - [`routing`]: the routing hypernetwork, binary concrete sampling, and
//!   temperature annealing.
//! - [`federation`]: client updates, block-wise aggregation, communication
//!   accounting, and the FedAvg / local baselines.
//! - [`data`]: synthetic heterogeneous benchmarks, shard partitioning, and
//!   CSV ingestion.
//! - [`experiment`]: configuration, metrics files, checkpoints, comparisons
//!   and decision reports.

pub mod arch;
pub mod data;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod network;
pub mod ops;
pub mod param;
pub mod pool;
pub mod rng;
pub mod routing;
pub mod tape;
pub mod tensor;

pub use arch::{
    active_mask, ActiveMask, ArchitectureSpec, BlockId, ConnectionMatrix, DecisionVector, GateMode,
    HypernetSpec, LayerWidths,
};
pub use dataset::LabeledData;
pub use error::{Error, Result};
pub use param::{sgd_step, ParamId, Parameter, Slot};
pub use pool::{ModulePool, Unit};
pub use routing::{RoutingProbs, TemperatureSchedule};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
