//! Line-delimited JSON metrics: one header record, one record per round, and
//! a closing summary. A file without its summary was cut short.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{Method, Phase, RoundMetrics};

pub const SCHEMA: &str = "fedmn.metrics";
pub const SCHEMA_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema: String,
    pub version: u32,
    pub method: Method,
    pub seed: u64,
    pub num_clients: usize,
    pub rounds: usize,
    pub pretrain_rounds: usize,
    pub architecture: String,
    pub path_count: usize,
    pub full_model_count: usize,
    pub train_samples: Vec<usize>,
    /// Generating cluster per client when known; diagnostics only.
    pub clusters: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: usize,
    pub final_mean_accuracy: f64,
    pub final_median_accuracy: f64,
    pub final_global_loss: f64,
    pub cumulative: usize,
    pub upload_total: usize,
    pub download_total: usize,
    pub decisions: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Header(Header),
    Round(RoundMetrics),
    Summary(Summary),
}

/// Appends records to a metrics file, flushing after every line.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, header: Header) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        w.write(&Record::Header(header))?;
        Ok(w)
    }

    pub fn write(&mut self, record: &Record) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Metrics {
            path: self.path.clone(),
            detail: e.to_string(),
        })?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn round(&mut self, metrics: &RoundMetrics) -> Result<()> {
        self.write(&Record::Round(metrics.clone()))
    }

    pub fn finish(mut self, summary: Summary) -> Result<()> {
        self.write(&Record::Summary(summary))
    }
}

/// A fully read metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub header: Header,
    pub rounds: Vec<RoundMetrics>,
    pub summary: Summary,
}

impl RunMetrics {
    /// Main-phase rounds, including the initial round 0.
    pub fn main_rounds(&self) -> impl Iterator<Item = &RoundMetrics> {
        self.rounds.iter().filter(|r| r.phase == Phase::Main)
    }

    pub fn last_round(&self) -> &RoundMetrics {
        self.rounds
            .last()
            .expect("reader guarantees at least one round")
    }
}

/// Reads and checks a metrics file: header first, summary last, round
/// records in between.
pub fn read_metrics(path: &Path) -> Result<RunMetrics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Metrics {
        path: path.to_path_buf(),
        detail,
    };
    if text.is_empty() {
        return Err(bad("file is empty".into()));
    }
    if !text.ends_with('\n') {
        return Err(bad("truncated: last record is incomplete".into()));
    }
    let mut header = None;
    let mut rounds = Vec::new();
    let mut summary = None;
    for (i, line) in text.lines().enumerate() {
        let record: Record =
            serde_json::from_str(line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
        match (i, record) {
            (0, Record::Header(h)) => {
                if h.schema != SCHEMA {
                    return Err(bad(format!("unknown schema `{}`", h.schema)));
                }
                if h.version != SCHEMA_VERSION {
                    return Err(bad(format!(
                        "schema version {} is not supported (expected {SCHEMA_VERSION})",
                        h.version
                    )));
                }
                header = Some(h);
            }
            (0, _) => return Err(bad("first record is not a header".into())),
            (_, Record::Header(_)) => return Err(bad(format!("line {}: second header", i + 1))),
            (_, Record::Round(r)) => {
                if summary.is_some() {
                    return Err(bad(format!("line {}: record after summary", i + 1)));
                }
                rounds.push(r);
            }
            (_, Record::Summary(s)) => {
                if summary.is_some() {
                    return Err(bad(format!("line {}: second summary", i + 1)));
                }
                summary = Some(s);
            }
        }
    }
    let header = header.ok_or_else(|| bad("missing header".into()))?;
    let summary = summary.ok_or_else(|| bad("truncated: no summary record".into()))?;
    if rounds.is_empty() {
        return Err(bad("no round records".into()));
    }
    Ok(RunMetrics {
        header,
        rounds,
        summary,
    })
}
