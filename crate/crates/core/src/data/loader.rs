use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClientData, FederatedDataset};
use crate::dataset::LabeledData;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parsed CSV contents before scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCsv {
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Reads a comma-separated file with a header row. Every column except
/// `label_column` is a numeric feature; labels must be non-negative
/// integers. Reported row numbers are file lines, so the first data row is
/// row 2.
pub fn read_csv_raw(path: &Path, label_column: &str) -> Result<RawCsv> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::MissingColumn {
            path: path.to_path_buf(),
            column: label_column.to_string(),
        })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let line = r + 2;
        let record = record.map_err(|e| csv_error(path, e))?;
        let mut row = Vec::with_capacity(feature_names.len());
        for (i, cell) in record.iter().enumerate() {
            let bad = |detail: String| Error::Csv {
                path: path.to_path_buf(),
                row: line,
                column: headers.get(i).unwrap_or("?").to_string(),
                detail,
            };
            if i == label_idx {
                let y = cell
                    .parse::<usize>()
                    .map_err(|_| bad(format!("label `{cell}` is not a non-negative integer")))?;
                labels.push(y);
            } else {
                let v = cell
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(format!("`{cell}` is not a finite number")))?;
                row.push(v);
            }
        }
        rows.push(row);
    }
    Ok(RawCsv {
        feature_names,
        rows,
        labels,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Csv {
            path: path.to_path_buf(),
            row,
            column: String::new(),
            detail: format!("{kind:?}"),
        },
    }
}

/// Per-column `[min, max]` ranges.
fn column_ranges<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, cols: usize) -> Vec<(f64, f64)> {
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); cols];
    for row in rows {
        for (r, &v) in ranges.iter_mut().zip(row) {
            r.0 = r.0.min(v);
            r.1 = r.1.max(v);
        }
    }
    ranges
}

fn apply_ranges(rows: &mut [Vec<f64>], ranges: &[(f64, f64)]) {
    for row in rows {
        for (v, &(lo, hi)) in row.iter_mut().zip(ranges) {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
        }
    }
}

/// Scales every column of `rows` to `[0, 1]`. A constant column maps to 0.
pub fn min_max_scale(rows: &mut [Vec<f64>]) {
    let cols = rows.first().map_or(0, Vec::len);
    let ranges = column_ranges(rows.iter(), cols);
    apply_ranges(rows, &ranges);
}

fn to_features(rows: &[Vec<f64>], cols: usize) -> Result<Tensor> {
    if rows.is_empty() {
        return Ok(Tensor::empty_rows(cols));
    }
    Tensor::from_rows(rows)
}

/// Reads a CSV file and min-max scales its feature columns.
pub fn load_csv(path: &Path, label_column: &str) -> Result<(Tensor, Vec<usize>)> {
    let mut raw = read_csv_raw(path, label_column)?;
    if raw.rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    min_max_scale(&mut raw.rows);
    Ok((to_features(&raw.rows, raw.feature_names.len())?, raw.labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    None,
    /// Column ranges are taken over every file in the manifest together, so
    /// all clients and both splits share one feature scale.
    #[default]
    MinMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientFiles {
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<usize>,
}

/// Lists per-client CSV files. Relative paths resolve against the manifest's
/// own directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub label_column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub scale: Scaling,
    pub clients: Vec<ClientFiles>,
}

pub fn load_manifest(path: &Path) -> Result<FederatedDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if manifest.clients.is_empty() {
        return Err(Error::Data(format!(
            "{}: no clients listed",
            path.display()
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };

    let mut parts = Vec::with_capacity(manifest.clients.len());
    let mut dim = None;
    for files in &manifest.clients {
        let mut pair = Vec::with_capacity(2);
        for file in [&files.train, &files.test] {
            let file = resolve(file);
            let raw = read_csv_raw(&file, &manifest.label_column)?;
            match dim {
                None => dim = Some(raw.feature_names.len()),
                Some(d) if d != raw.feature_names.len() => {
                    return Err(Error::Data(format!(
                        "{}: {} feature columns, expected {d}",
                        file.display(),
                        raw.feature_names.len()
                    )))
                }
                Some(_) => {}
            }
            if raw.rows.is_empty() {
                log::warn!("{} has no data rows", file.display());
            }
            pair.push(raw);
        }
        parts.push(pair);
    }
    let dim = dim.unwrap_or(0);
    if dim == 0 {
        return Err(Error::Data(format!(
            "{}: files have no feature columns",
            path.display()
        )));
    }
    let max_label = parts
        .iter()
        .flatten()
        .flat_map(|r| r.labels.iter().copied())
        .max();
    let num_classes = match (manifest.num_classes, max_label) {
        (Some(c), Some(m)) if m >= c => {
            return Err(Error::Data(format!(
                "label {m} outside 0..{c} declared in {}",
                path.display()
            )))
        }
        (Some(c), _) => c,
        (None, Some(m)) => m + 1,
        (None, None) => return Err(Error::EmptyDataset),
    };
    if manifest.scale == Scaling::MinMax {
        let ranges = column_ranges(parts.iter().flatten().flat_map(|r| r.rows.iter()), dim);
        for raw in parts.iter_mut().flatten() {
            apply_ranges(&mut raw.rows, &ranges);
        }
    }

    let mut clients = Vec::with_capacity(parts.len());
    for (files, pair) in manifest.clients.iter().zip(parts) {
        let mut it = pair.into_iter();
        let (train, test) = (it.next().unwrap(), it.next().unwrap());
        if train.rows.is_empty() {
            return Err(Error::Data(format!(
                "{}: a client needs at least one training row",
                files.train.display()
            )));
        }
        clients.push(ClientData {
            train: LabeledData::new(to_features(&train.rows, dim)?, train.labels, num_classes)?,
            test: LabeledData::new(to_features(&test.rows, dim)?, test.labels, num_classes)?,
            cluster: files.cluster,
        });
    }
    Ok(FederatedDataset {
        clients,
        input_dim: dim,
        num_classes,
    })
}

fn write_split(path: &Path, data: &LabeledData) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in 0..data.len() {
        let mut rec: Vec<String> = data
            .features
            .row(r)
            .iter()
            .map(|v| format!("{v:?}"))
            .collect();
        rec.push(data.labels[r].to_string());
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes one train and one test CSV per client plus `manifest.toml` into
/// `dir`. Values are written with round-trip precision and the manifest
/// disables scaling, so loading it back reproduces the dataset.
pub fn export_csv_dir(data: &FederatedDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut clients = Vec::with_capacity(data.num_clients());
    for (m, c) in data.clients.iter().enumerate() {
        let train = PathBuf::from(format!("client_{m:03}_train.csv"));
        let test = PathBuf::from(format!("client_{m:03}_test.csv"));
        write_split(&dir.join(&train), &c.train)?;
        write_split(&dir.join(&test), &c.test)?;
        clients.push(ClientFiles {
            train,
            test,
            cluster: c.cluster,
        });
    }
    let manifest = Manifest {
        label_column: "label".into(),
        num_classes: Some(data.num_classes),
        scale: Scaling::None,
        clients,
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
