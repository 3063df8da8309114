use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::metrics::{read_metrics, RunMetrics, METRICS_FILE};
use crate::error::{Error, Result};
use crate::federation::Method;

/// One run in a comparison. Every figure comes from the round records; the
/// summary is only cross-checked.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub run: String,
    pub method: Method,
    pub seed: u64,
    pub rounds: usize,
    pub final_mean_accuracy: f64,
    pub final_median_accuracy: f64,
    pub final_global_loss: f64,
    pub upload: usize,
    pub download: usize,
    pub cumulative: usize,
}

impl ComparisonRow {
    pub fn from_metrics(run: String, m: &RunMetrics) -> Self {
        let last = m.last_round();
        let upload = m.rounds.iter().flat_map(|r| &r.upload).sum();
        let download = m.rounds.iter().flat_map(|r| &r.download).sum();
        ComparisonRow {
            run,
            method: m.header.method,
            seed: m.header.seed,
            rounds: m.main_rounds().map(|r| r.round).max().unwrap_or(0),
            final_mean_accuracy: last.mean_accuracy,
            final_median_accuracy: last.median_accuracy,
            final_global_loss: last.global_loss,
            upload,
            download,
            cumulative: last.cumulative,
        }
    }
}

fn check_summary(path: &Path, m: &RunMetrics, row: &ComparisonRow) -> Result<()> {
    let s = &m.summary;
    let mismatch = |what: &str| {
        Err(Error::Metrics {
            path: path.to_path_buf(),
            detail: format!("summary {what} does not match the round records"),
        })
    };
    if s.cumulative != row.cumulative || row.upload + row.download != row.cumulative {
        return mismatch("cumulative count");
    }
    if s.upload_total != row.upload || s.download_total != row.download {
        return mismatch("transfer totals");
    }
    if s.final_mean_accuracy != row.final_mean_accuracy
        || s.final_median_accuracy != row.final_median_accuracy
    {
        return mismatch("accuracy");
    }
    Ok(())
}

/// Reads each run directory and returns one row per run, ordered by
/// cumulative transmitted parameters (ties keep the input order).
pub fn compare_runs(dirs: &[PathBuf]) -> Result<Vec<ComparisonRow>> {
    if dirs.len() < 2 {
        return Err(Error::Config(format!(
            "compare needs at least two runs, got {}",
            dirs.len()
        )));
    }
    let mut rows = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let path = dir.join(METRICS_FILE);
        let m = read_metrics(&path)?;
        let row = ComparisonRow::from_metrics(dir.display().to_string(), &m);
        check_summary(&path, &m, &row)?;
        rows.push(row);
    }
    rows.sort_by_key(|r| r.cumulative);
    Ok(rows)
}

pub fn rows_to_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// Aligned text table.
pub fn rows_to_table(rows: &[ComparisonRow]) -> String {
    let headers = [
        "run",
        "method",
        "seed",
        "rounds",
        "mean_acc",
        "median_acc",
        "loss",
        "upload",
        "download",
        "cumulative",
    ];
    let cells: Vec<[String; 10]> = rows
        .iter()
        .map(|r| {
            [
                r.run.clone(),
                r.method.to_string(),
                r.seed.to_string(),
                r.rounds.to_string(),
                format!("{:.4}", r.final_mean_accuracy),
                format!("{:.4}", r.final_median_accuracy),
                format!("{:.4}", r.final_global_loss),
                r.upload.to_string(),
                r.download.to_string(),
                r.cumulative.to_string(),
            ]
        })
        .collect();
    let mut width: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, items: &[&str]| {
        let parts: Vec<String> = items
            .iter()
            .zip(&width)
            .enumerate()
            .map(|(i, (s, w))| {
                if i == 0 || i == 1 {
                    format!("{s:<w$}")
                } else {
                    format!("{s:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &headers);
    for row in &cells {
        let items: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&mut out, &items);
    }
    out
}
