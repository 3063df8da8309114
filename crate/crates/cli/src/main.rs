//! `fedmn` command-line runner.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | unexpected internal failure |
//! | 2 | usage error (bad flags or arguments) |
//! | 3 | invalid configuration or request |
//! | 4 | I/O failure |
//! | 5 | corrupt or inconsistent data, metrics or checkpoint files |
//! | 6 | training failure (divergence or an internal shape error) |

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedmn::experiment::{
    compare_runs, decisions_report, rows_to_csv, rows_to_table, run_experiment, DataSource,
    ExperimentConfig,
};
use fedmn::federation::{AggregationMode, Method};
use fedmn::Error;

/// Environment variable naming the directory runs are written under.
const OUTPUT_ROOT_VAR: &str = "FEDMN_OUTPUT_ROOT";

mod exit {
    pub const OK: u8 = 0;
    pub const UNEXPECTED: u8 = 1;
    pub const CONFIG: u8 = 3;
    pub const IO: u8 = 4;
    pub const CORRUPT: u8 = 5;
    pub const TRAINING: u8 = 6;
}

#[derive(Parser)]
#[command(
    name = "fedmn",
    version,
    about = "Personalized federated learning with modular networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method and write metrics and checkpoints.
    Run(RunArgs),
    /// Tabulate accuracy against transmitted parameters for finished runs.
    Compare(CompareArgs),
    /// Show a FedMN run's final routing decisions and their Hamming distances.
    DecisionsReport(ReportArgs),
    /// Check a config file (plus overrides) and report every problem.
    ValidateConfig(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Synthetic clustered benchmark used for accuracy comparisons.
    Effectiveness,
    /// 1x4x3 with hidden width 256, for communication accounting.
    Communication,
}

#[derive(Clone, Copy, ValueEnum)]
enum Aggregation {
    Renormalized,
    Literal,
}

/// Settings that override the config file.
#[derive(Args)]
struct Overrides {
    /// Experiment config (TOML). Flags take precedence over its values.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Start from a built-in preset instead of the defaults.
    #[arg(long, value_enum, conflicts_with = "config")]
    preset: Option<Preset>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    seed: Option<u64>,
    /// Blocks per layer, e.g. 1x4x3.
    #[arg(long)]
    architecture: Option<String>,
    /// Hidden width inside blocks; 0 for single dense layers.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    hypernet_lr_scale: Option<f64>,
    /// 0 trains on each client's whole set at once.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    tau_start: Option<f64>,
    #[arg(long)]
    tau_end: Option<f64>,
    #[arg(long)]
    pretrain_rounds: Option<usize>,
    #[arg(long, value_enum)]
    aggregation: Option<Aggregation>,
    /// Fraction of clients sampled per round.
    #[arg(long)]
    participation: Option<f64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
    /// Load client data from a manifest instead of generating it.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run directory relative to the output root.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Directory runs are written under.
    #[arg(long, env = OUTPUT_ROOT_VAR, default_value = "runs")]
    output_root: PathBuf,
    /// Replace an existing run in the same directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Table,
    Csv,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories (each holding metrics.jsonl).
    #[arg(required = true, num_args = 2..)]
    runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: TableFormat,
    /// Also write the CSV table to this file.
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    run: PathBuf,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Print the resolved config.
    #[arg(long)]
    print: bool,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

impl Overrides {
    /// Defaults, then preset or file, then flags.
    fn resolve(&self) -> fedmn::Result<ExperimentConfig> {
        let method = self.method.unwrap_or(Method::FedMn);
        let seed = self.seed.unwrap_or(0);
        let mut c = match (&self.config, self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(Preset::Effectiveness)) => ExperimentConfig::effectiveness(method, seed),
            (None, Some(Preset::Communication)) => ExperimentConfig::communication(method, seed),
            (None, None) => ExperimentConfig::default(),
        };
        if let Some(v) = self.method {
            c.method = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.architecture {
            c.model.architecture = v.clone();
        }
        if let Some(v) = self.hidden {
            c.model.hidden = v;
        }
        let t = &mut c.training;
        if let Some(v) = self.rounds {
            t.rounds = v;
        }
        if let Some(v) = self.local_epochs {
            t.local_epochs = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.hypernet_lr_scale {
            t.hypernet_lr_scale = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.tau_start {
            t.tau_start = v;
        }
        if let Some(v) = self.tau_end {
            t.tau_end = v;
        }
        if let Some(v) = self.pretrain_rounds {
            t.pretrain_rounds = v;
        }
        if let Some(v) = self.aggregation {
            t.aggregation = match v {
                Aggregation::Renormalized => AggregationMode::Renormalized,
                Aggregation::Literal => AggregationMode::Literal,
            };
        }
        if let Some(v) = self.participation {
            t.participation = v;
        }
        if let Some(v) = self.threads {
            t.threads = v;
        }
        if let Some(v) = &self.manifest {
            c.data.source = DataSource::Manifest;
            c.data.manifest = Some(v.clone());
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = Some(v.clone());
        }
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidConfig(_) => exit::CONFIG,
        Error::Io { .. } => exit::IO,
        Error::Csv { .. }
        | Error::MissingColumn { .. }
        | Error::Data(_)
        | Error::EmptyDataset
        | Error::Metrics { .. }
        | Error::Checkpoint(_) => exit::CORRUPT,
        Error::Diverged(_)
        | Error::ShapeMismatch { .. }
        | Error::BadTensor { .. }
        | Error::InvalidTarget { .. }
        | Error::NoOutputPath
        | Error::DecisionLength { .. }
        | Error::MissingParam(_)
        | Error::ParamShape { .. } => exit::TRAINING,
    }
}

fn write_stdout(text: &str) -> fedmn::Result<()> {
    std::io::stdout()
        .write_all(text.as_bytes())
        .map_err(|e| Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        })
}

fn run(args: &RunArgs) -> fedmn::Result<()> {
    let config = args.overrides.resolve()?;
    let outcome = run_experiment(&config, &args.output_root, args.overwrite)?;
    let s = &outcome.summary;
    write_stdout(&format!(
        "run directory: {}\nfinal mean accuracy: {:.4}\nfinal median accuracy: {:.4}\ntransmitted parameters: {} (up {}, down {})\n",
        outcome.dir.display(),
        s.final_mean_accuracy,
        s.final_median_accuracy,
        s.cumulative,
        s.upload_total,
        s.download_total
    ))
}

fn compare(args: &CompareArgs) -> fedmn::Result<()> {
    let rows = compare_runs(&args.runs)?;
    let csv = rows_to_csv(&rows)?;
    if let Some(path) = &args.csv_out {
        std::fs::write(path, &csv).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    match args.format {
        TableFormat::Table => write_stdout(&rows_to_table(&rows)),
        TableFormat::Csv => write_stdout(&csv),
    }
}

fn report(args: &ReportArgs) -> fedmn::Result<()> {
    let r = decisions_report(&args.run)?;
    if args.json {
        write_stdout(&format!("{}\n", r.to_json()?))
    } else {
        write_stdout(&r.to_text())
    }
}

fn validate(args: &ValidateArgs) -> fedmn::Result<()> {
    let config = args.overrides.resolve()?;
    config.validate()?;
    if args.print {
        write_stdout(&config.to_toml()?)
    } else {
        write_stdout(&format!(
            "{}: ok\n",
            describe(args.overrides.config.as_deref())
        ))
    }
}

fn describe(path: Option<&Path>) -> String {
    path.map_or("configuration".to_string(), |p| p.display().to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = std::panic::catch_unwind(|| match &cli.command {
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a),
        Command::DecisionsReport(a) => report(a),
        Command::ValidateConfig(a) => validate(a),
    });
    match result {
        Ok(Ok(())) => ExitCode::from(exit::OK),
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(exit::UNEXPECTED),
    }
}
