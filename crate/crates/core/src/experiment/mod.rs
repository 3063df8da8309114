//! Experiment plumbing: config files, metrics files, checkpoints, and the
//! reports built from finished runs.

mod checkpoint;
mod compare;
mod config;
mod metrics;
mod report;
mod run;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use compare::{compare_runs, rows_to_csv, rows_to_table, ComparisonRow};
pub use config::{DataSection, DataSource, ExperimentConfig, ModelSection, TrainingSection};
pub use metrics::{
    read_metrics, Header, MetricsWriter, Record, RunMetrics, Summary, METRICS_FILE, SCHEMA,
    SCHEMA_VERSION,
};
pub use report::{cluster_means, decisions_report, hamming, hamming_matrix, DecisionsReport};
pub use run::{run_dir, run_experiment, RunOutcome, CHECKPOINT_DIR, CONFIG_FILE};
