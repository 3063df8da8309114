//! Federated datasets: synthetic clusters with joint-distribution shift,
//! label-shard partitioning, and CSV ingestion.

mod loader;
mod partition;
mod synth;

pub use loader::{
    export_csv_dir, load_csv, load_manifest, min_max_scale, read_csv_raw, ClientFiles, Manifest,
    Scaling,
};
pub use partition::partition_labels_pathological;
pub use synth::{generate, ConditionalShift, SynthConfig};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::LabeledData;
use crate::error::{Error, Result};

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub train: LabeledData,
    pub test: LabeledData,
    /// Generating cluster, kept for diagnostics only.
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub clients: Vec<ClientData>,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl FederatedDataset {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn total_train(&self) -> usize {
        self.clients.iter().map(|c| c.train.len()).sum()
    }

    pub fn clusters(&self) -> Vec<Option<usize>> {
        self.clients.iter().map(|c| c.cluster).collect()
    }
}

/// Shuffles the rows of `data` and splits them into train and test parts.
/// Both parts keep at least one row.
pub(crate) fn split_train_test<R: Rng + ?Sized>(
    data: &LabeledData,
    train_fraction: f64,
    rng: &mut R,
) -> Result<(LabeledData, LabeledData)> {
    let n = data.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "need at least 2 samples to split, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    Ok((data.subset(&idx[..n_train]), data.subset(&idx[n_train..])))
}

pub(crate) fn check_train_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {f}"
        )))
    }
}
