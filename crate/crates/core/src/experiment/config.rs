use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureSpec, HypernetSpec, LayerWidths};
use crate::data::{self, FederatedDataset, SynthConfig};
use crate::error::{Error, Result};
use crate::federation::{AggregationMode, Method, TrainingConfig};
use crate::network::GATE_THRESHOLD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Blocks per layer, e.g. `"1x4x3"`; the first layer holds encoders.
    pub architecture: String,
    pub encoder_out: usize,
    /// Hidden width inside every block; `0` makes blocks single dense
    /// layers.
    pub hidden: usize,
    pub block_out: usize,
    pub hypernet_feature_dim: usize,
    pub hypernet_label_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            architecture: "1x4x3".into(),
            encoder_out: 32,
            hidden: 256,
            block_out: 32,
            hypernet_feature_dim: 32,
            hypernet_label_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    /// Multiplier on the learning rate for the routing hypernetwork.
    pub hypernet_lr_scale: f64,
    /// `0` trains on each client's whole set at once.
    pub batch_size: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub pretrain_rounds: usize,
    pub aggregation: AggregationMode,
    pub share_hypernet: bool,
    pub count_hypernet: bool,
    pub participation: f64,
    pub gate_threshold: f64,
    /// `0` uses every available core.
    pub threads: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            rounds: 150,
            local_epochs: 1,
            learning_rate: 0.01,
            hypernet_lr_scale: 1.0,
            batch_size: 32,
            tau_start: 1.0,
            tau_end: 0.1,
            pretrain_rounds: 0,
            aggregation: AggregationMode::Renormalized,
            share_hypernet: true,
            count_hypernet: false,
            participation: 1.0,
            gate_threshold: GATE_THRESHOLD,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Seed for the synthetic generator; the experiment seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Manifest path, resolved against the config file's directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub synthetic: SynthConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            seed: None,
            manifest: None,
            synthetic: SynthConfig::default(),
        }
    }
}

/// A complete, reproducible experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    /// Run directory relative to the output root.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub data: DataSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::FedMn,
            seed: 0,
            output_dir: None,
            model: ModelSection::default(),
            training: TrainingSection::default(),
            data: DataSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file. A relative manifest path is made relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(m) = &config.data.manifest {
            if m.is_relative() {
                if let Some(dir) = path.parent() {
                    config.data.manifest = Some(dir.join(m));
                }
            }
        }
        Ok(config)
    }

    /// Synthetic-benchmark settings used for the accuracy comparison: the
    /// default 3-cluster data, 50 rounds, one local epoch.
    pub fn effectiveness(method: Method, seed: u64) -> Self {
        let mut c = ExperimentConfig {
            method,
            seed,
            ..Default::default()
        };
        c.model.architecture = "2x3x3".into();
        c.model.hidden = 0;
        c.training.rounds = 50;
        c.training.learning_rate = 0.2;
        c.training.hypernet_lr_scale = 30.0;
        c
    }

    /// Settings used for communication accounting: `1x4x3`, hidden 256,
    /// 20 rounds.
    pub fn communication(method: Method, seed: u64) -> Self {
        let mut c = ExperimentConfig {
            method,
            seed,
            ..Default::default()
        };
        c.model.architecture = "1x4x3".into();
        c.model.hidden = 256;
        c.training.rounds = 20;
        c.training.learning_rate = 0.05;
        c
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    /// Every problem with the config, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let widths = match self.model.architecture.parse::<LayerWidths>() {
            Ok(w) => Some(w),
            Err(e) => {
                p.push(format!(
                    "model.architecture `{}`: {}",
                    self.model.architecture,
                    e.to_string().replace("configuration error: ", "")
                ));
                None
            }
        };
        for (name, v) in [
            ("model.encoder_out", self.model.encoder_out),
            ("model.block_out", self.model.block_out),
            (
                "model.hypernet_feature_dim",
                self.model.hypernet_feature_dim,
            ),
            ("model.hypernet_label_dim", self.model.hypernet_label_dim),
            ("training.rounds", self.training.rounds),
            ("training.local_epochs", self.training.local_epochs),
        ] {
            if v == 0 {
                p.push(format!("{name} must be at least 1"));
            }
        }
        let t = &self.training;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            p.push(format!(
                "training.learning_rate must be positive, got {}",
                t.learning_rate
            ));
        }
        if !(t.hypernet_lr_scale >= 0.0 && t.hypernet_lr_scale.is_finite()) {
            p.push(format!(
                "training.hypernet_lr_scale must be a finite value >= 0, got {}",
                t.hypernet_lr_scale
            ));
        }
        if !(t.tau_start > 0.0 && t.tau_start.is_finite()) {
            p.push(format!(
                "training.tau_start must be positive, got {}",
                t.tau_start
            ));
        }
        if !(t.tau_end > 0.0 && t.tau_end.is_finite()) {
            p.push(format!(
                "training.tau_end must be positive, got {}",
                t.tau_end
            ));
        } else if t.tau_end > t.tau_start {
            p.push(format!(
                "training.tau_end ({}) must not exceed training.tau_start ({})",
                t.tau_end, t.tau_start
            ));
        }
        if !(t.participation > 0.0 && t.participation <= 1.0) {
            p.push(format!(
                "training.participation must be in (0, 1], got {}",
                t.participation
            ));
        }
        if !(t.gate_threshold >= 0.0 && t.gate_threshold.is_finite()) {
            p.push("training.gate_threshold must be a finite value >= 0".into());
        }
        match self.data.source {
            DataSource::Synthetic => {
                let s = &self.data.synthetic;
                p.extend(s.problems());
                if s.input_dim == 0 || s.num_classes < 2 {
                    // already reported
                } else if widths.is_some() {
                    let arch = self.arch_with(s.input_dim, s.num_classes);
                    if let Err(Error::InvalidConfig(v)) = arch.validate() {
                        p.extend(v.into_iter().map(|m| format!("model: {m}")));
                    }
                }
            }
            DataSource::Manifest => match &self.data.manifest {
                None => p.push("data.manifest is required when data.source = \"manifest\"".into()),
                Some(m) if !m.exists() => {
                    p.push(format!("data.manifest {} does not exist", m.display()))
                }
                Some(_) => {}
            },
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }

    fn arch_with(&self, input_dim: usize, num_classes: usize) -> ArchitectureSpec {
        ArchitectureSpec {
            layer_widths: self
                .model
                .architecture
                .parse::<LayerWidths>()
                .map(|w| w.0)
                .unwrap_or_default(),
            input_dim,
            encoder_out_dim: self.model.encoder_out,
            block_hidden_dim: (self.model.hidden > 0).then_some(self.model.hidden),
            block_out_dim: self.model.block_out,
            num_classes,
        }
    }

    /// Generates or loads the federated dataset.
    pub fn dataset(&self) -> Result<FederatedDataset> {
        match self.data.source {
            DataSource::Synthetic => data::generate(&SynthConfig {
                seed: self.data_seed(),
                ..self.data.synthetic.clone()
            }),
            DataSource::Manifest => {
                let path = self.data.manifest.as_ref().ok_or_else(|| {
                    Error::Config("data.manifest is required for manifest data".into())
                })?;
                data::load_manifest(path)
            }
        }
    }

    /// The algorithm settings for a dataset with the given shape.
    pub fn training_config(&self, input_dim: usize, num_classes: usize) -> Result<TrainingConfig> {
        let arch = self.arch_with(input_dim, num_classes);
        arch.validate()?;
        let t = &self.training;
        let config = TrainingConfig {
            method: self.method,
            arch,
            hypernet: HypernetSpec {
                feature_dim: self.model.hypernet_feature_dim,
                label_dim: self.model.hypernet_label_dim,
            },
            rounds: t.rounds,
            local_epochs: t.local_epochs,
            learning_rate: t.learning_rate,
            hypernet_lr_scale: t.hypernet_lr_scale,
            batch_size: (t.batch_size > 0).then_some(t.batch_size),
            tau_start: t.tau_start,
            tau_end: t.tau_end,
            pretrain_rounds: t.pretrain_rounds,
            aggregation: t.aggregation,
            share_hypernet: t.share_hypernet,
            count_hypernet: t.count_hypernet,
            participation: t.participation,
            gate_threshold: t.gate_threshold,
            seed: self.seed,
            threads: t.threads,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn default_output_dir(&self) -> PathBuf {
        PathBuf::from(format!("{}-seed{}", self.method, self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        for c in [
            ExperimentConfig::default(),
            ExperimentConfig::effectiveness(Method::FedAvg, 3),
            ExperimentConfig {
                output_dir: Some("runs/x".into()),
                data: DataSection {
                    source: DataSource::Manifest,
                    seed: Some(4),
                    manifest: Some("data/m.toml".into()),
                    ..Default::default()
                },
                ..ExperimentConfig::communication(Method::Local, 9)
            },
        ] {
            let text = c.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c, "{text}");
        }
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c =
            ExperimentConfig::from_toml("method = \"fedavg\"\n[training]\nrounds = 3\n").unwrap();
        assert_eq!(c.method, Method::FedAvg);
        assert_eq!(c.training.rounds, 3);
        assert_eq!(c.training.local_epochs, 1);
        assert_eq!(c.model.hidden, 256);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("methd = \"fedavg\"\n").is_err());
        assert!(ExperimentConfig::from_toml("method = \"fedprox\"\n").is_err());
    }

    #[test]
    fn all_problems_are_reported() {
        let mut c = ExperimentConfig::default();
        c.model.architecture = "3x0".into();
        c.training.learning_rate = -1.0;
        c.training.tau_end = 2.0;
        c.training.participation = 0.0;
        c.data.synthetic.num_classes = 1;
        let p = c.problems();
        assert!(p.len() >= 5, "{p:?}");
        assert!(p.iter().any(|m| m.contains("architecture")));
        assert!(p.iter().any(|m| m.contains("learning_rate")));
        assert!(p.iter().any(|m| m.contains("tau_end")));
        assert!(p.iter().any(|m| m.contains("participation")));
        assert!(p.iter().any(|m| m.contains("num_classes")));
    }

    #[test]
    fn presets_are_valid() {
        for m in [Method::FedMn, Method::FedAvg, Method::Local] {
            ExperimentConfig::effectiveness(m, 0).validate().unwrap();
            ExperimentConfig::communication(m, 0).validate().unwrap();
        }
    }

    #[test]
    fn manifest_source_needs_a_path() {
        let mut c = ExperimentConfig::default();
        c.data.source = DataSource::Manifest;
        assert!(c.problems().iter().any(|m| m.contains("data.manifest")));
    }
}
