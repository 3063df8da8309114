//! The federated protocol: client updates, block-wise aggregation,
//! communication accounting, and the FedAvg / local baselines.

mod aggregate;
mod client;
mod comm;
mod train;

pub use aggregate::{aggregate, AggregationMode, UploadPayload};
pub use client::{
    download, evaluate, local_update, threshold, ClientState, LocalConfig, Routing, Trainable,
    UpdateKey,
};
pub use comm::{full_model_count, payload_param_count, CommEntry, CommLedger, Direction, Phase};
pub use train::{
    fedavg_baseline, initial_pool, local_baseline, run_training, ClientModel, Method, RoundMetrics,
    TrainingConfig, TrainingOutput,
};
