use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::save_checkpoint;
use super::config::ExperimentConfig;
use super::metrics::{Header, MetricsWriter, Summary, METRICS_FILE, SCHEMA, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::federation::{full_model_count, run_training, Direction, Method, TrainingOutput};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// A finished run and where its files went.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub output: TrainingOutput,
    pub summary: Summary,
}

/// Run directory for `config` below `output_root`.
pub fn run_dir(config: &ExperimentConfig, output_root: &Path) -> PathBuf {
    let rel = config
        .output_dir
        .clone()
        .unwrap_or_else(|| config.default_output_dir());
    output_root.join(rel)
}

/// Validates the config, trains, and writes `config.toml`, `metrics.jsonl`
/// and the final checkpoints into the run directory. An existing metrics
/// file is only replaced with `overwrite`.
pub fn run_experiment(
    config: &ExperimentConfig,
    output_root: &Path,
    overwrite: bool,
) -> Result<RunOutcome> {
    config.validate()?;
    let data = config.dataset()?;
    let training = config.training_config(data.input_dim, data.num_classes)?;

    let dir = run_dir(config, output_root);
    let metrics_path = dir.join(METRICS_FILE);
    if metrics_path.exists() && !overwrite {
        return Err(Error::Config(format!(
            "{} already exists; pick another output directory or overwrite",
            metrics_path.display()
        )));
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, config.to_toml()?).map_err(|e| Error::io(&config_path, e))?;

    let header = Header {
        schema: SCHEMA.into(),
        version: SCHEMA_VERSION,
        method: config.method,
        seed: config.seed,
        num_clients: data.num_clients(),
        rounds: training.rounds,
        pretrain_rounds: if config.method == Method::FedMn {
            training.pretrain_rounds
        } else {
            0
        },
        architecture: training.arch.widths().to_string(),
        path_count: training.arch.path_count(),
        full_model_count: full_model_count(&training.arch),
        train_samples: data.clients.iter().map(|c| c.train.len()).collect(),
        clusters: data.clusters(),
    };
    let mut writer = MetricsWriter::create(&metrics_path, header)?;
    let output = run_training(&training, &data, &mut |r| writer.round(r))?;

    let last = output
        .metrics
        .last()
        .expect("training always records round 0");
    let summary = Summary {
        rounds: training.rounds,
        final_mean_accuracy: last.mean_accuracy,
        final_median_accuracy: last.median_accuracy,
        final_global_loss: last.global_loss,
        cumulative: output.ledger.total(),
        upload_total: output.ledger.total_in(Direction::Up),
        download_total: output.ledger.total_in(Direction::Down),
        decisions: last.decisions.clone(),
    };
    writer.finish(summary.clone())?;

    let ckpt = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    save_checkpoint(&output.global, &ckpt.join("global.ckpt"))?;
    if config.method != Method::FedAvg {
        for (m, c) in output.clients.iter().enumerate() {
            save_checkpoint(&c.model, &ckpt.join(format!("client_{m:03}.ckpt")))?;
        }
    }
    log::info!(
        "{}: final mean accuracy {:.4}, {} parameters transmitted",
        dir.display(),
        summary.final_mean_accuracy,
        summary.cumulative
    );
    Ok(RunOutcome {
        dir,
        output,
        summary,
    })
}
