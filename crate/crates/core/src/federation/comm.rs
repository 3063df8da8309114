use serde::{Deserialize, Serialize};

use crate::arch::{ActiveMask, ArchitectureSpec, HypernetSpec};

/// Scalar parameters exchanged for one client with the given active mask:
/// every encoder, every active block, and the hypernetwork when `hypernet`
/// is given.
pub fn payload_param_count(
    spec: &ArchitectureSpec,
    mask: &ActiveMask,
    hypernet: Option<&HypernetSpec>,
) -> usize {
    let blocks: usize = spec
        .blocks()
        .filter(|&b| mask.is_active(spec, b))
        .map(|b| spec.block_param_count(b.layer))
        .sum();
    spec.num_encoders() * spec.encoder_param_count()
        + blocks
        + hypernet.map_or(0, |h| h.param_count(spec))
}

/// Parameters in encoders and blocks, i.e. a full FedAvg payload.
pub fn full_model_count(spec: &ArchitectureSpec) -> usize {
    spec.model_param_count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Main,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEntry {
    pub phase: Phase,
    pub round: usize,
    pub client: usize,
    pub direction: Direction,
    pub count: usize,
}

/// Every transfer between the server and a client, in the order recorded.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    entries: Vec<CommEntry>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        phase: Phase,
        round: usize,
        client: usize,
        direction: Direction,
        count: usize,
    ) {
        self.entries.push(CommEntry {
            phase,
            round,
            client,
            direction,
            count,
        });
    }

    pub fn entries(&self) -> &[CommEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn total_in(&self, direction: Direction) -> usize {
        self.entries
            .iter()
            .filter(|e| e.direction == direction)
            .map(|e| e.count)
            .sum()
    }

    /// Per-client counts for one round in one direction.
    pub fn round_counts(
        &self,
        phase: Phase,
        round: usize,
        direction: Direction,
        num_clients: usize,
    ) -> Vec<usize> {
        let mut out = vec![0; num_clients];
        for e in &self.entries {
            if e.phase == phase && e.round == round && e.direction == direction {
                out[e.client] += e.count;
            }
        }
        out
    }
}
