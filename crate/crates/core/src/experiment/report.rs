use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::metrics::{read_metrics, METRICS_FILE};
use crate::error::{Error, Result};
use crate::federation::Method;

/// Final hard decisions of a FedMN run and how far apart they are.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecisionsReport {
    pub decisions: Vec<String>,
    /// `hamming[i][j]`: number of paths on which clients `i` and `j`
    /// disagree.
    pub hamming: Vec<Vec<usize>>,
    pub clusters: Vec<Option<usize>>,
    /// Mean distance over client pairs from the same generating cluster.
    pub within_cluster: Option<f64>,
    pub between_cluster: Option<f64>,
}

pub fn hamming(a: &str, b: &str) -> usize {
    a.bytes().zip(b.bytes()).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len())
}

pub fn hamming_matrix(decisions: &[String]) -> Vec<Vec<usize>> {
    decisions
        .iter()
        .map(|a| decisions.iter().map(|b| hamming(a, b)).collect())
        .collect()
}

/// Mean within-cluster and between-cluster distance over pairs `i < j`
/// whose clusters are both known. `None` when there is no such pair.
pub fn cluster_means(
    matrix: &[Vec<usize>],
    clusters: &[Option<usize>],
) -> (Option<f64>, Option<f64>) {
    let (mut within, mut between) = ((0usize, 0usize), (0usize, 0usize));
    for i in 0..matrix.len() {
        for j in i + 1..matrix.len() {
            if let (Some(a), Some(b)) = (
                clusters.get(i).copied().flatten(),
                clusters.get(j).copied().flatten(),
            ) {
                let acc = if a == b { &mut within } else { &mut between };
                acc.0 += matrix[i][j];
                acc.1 += 1;
            }
        }
    }
    let mean = |(s, n): (usize, usize)| (n > 0).then(|| s as f64 / n as f64);
    (mean(within), mean(between))
}

pub fn decisions_report(run_dir: &Path) -> Result<DecisionsReport> {
    let path = run_dir.join(METRICS_FILE);
    let m = read_metrics(&path)?;
    if m.header.method != Method::FedMn {
        return Err(Error::Config(format!(
            "{} is a {} run; decision reports need a fedmn run",
            run_dir.display(),
            m.header.method
        )));
    }
    let decisions = m
        .last_round()
        .decisions
        .clone()
        .ok_or_else(|| Error::Metrics {
            path: path.clone(),
            detail: "last round carries no decisions".into(),
        })?;
    if decisions.len() != m.header.num_clients {
        return Err(Error::Metrics {
            path,
            detail: format!(
                "{} decisions for {} clients",
                decisions.len(),
                m.header.num_clients
            ),
        });
    }
    let matrix = hamming_matrix(&decisions);
    let (within, between) = cluster_means(&matrix, &m.header.clusters);
    Ok(DecisionsReport {
        decisions,
        hamming: matrix,
        clusters: m.header.clusters,
        within_cluster: within,
        between_cluster: between,
    })
}

impl DecisionsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("client  cluster  decision\n");
        for (m, d) in self.decisions.iter().enumerate() {
            let cluster = self.clusters.get(m).copied().flatten();
            let cluster = cluster.map_or("-".to_string(), |k| k.to_string());
            let _ = writeln!(s, "{m:>6}  {cluster:>7}  {d}");
        }
        s.push_str("\nhamming distances\n");
        let w = self
            .hamming
            .iter()
            .flatten()
            .map(|v| v.to_string().len())
            .max()
            .unwrap_or(1)
            .max(self.decisions.len().saturating_sub(1).to_string().len());
        let _ = write!(s, "{:>w$}", "");
        for j in 0..self.decisions.len() {
            let _ = write!(s, " {j:>w$}");
        }
        s.push('\n');
        for (i, row) in self.hamming.iter().enumerate() {
            let _ = write!(s, "{i:>w$}");
            for v in row {
                let _ = write!(s, " {v:>w$}");
            }
            s.push('\n');
        }
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        let _ = writeln!(
            s,
            "\nmean within-cluster distance:  {}",
            fmt(self.within_cluster)
        );
        let _ = writeln!(
            s,
            "mean between-cluster distance: {}",
            fmt(self.between_cluster)
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_is_symmetric_with_zero_diagonal() {
        let d: Vec<String> = ["1100", "1010", "1100", "0001"].map(String::from).to_vec();
        let h = hamming_matrix(&d);
        for i in 0..4 {
            assert_eq!(h[i][i], 0);
            for j in 0..4 {
                assert_eq!(h[i][j], h[j][i]);
            }
        }
        assert_eq!(h[0][1], 2);
        assert_eq!(h[0][2], 0);
        assert_eq!(h[0][3], 3);
    }

    #[test]
    fn cluster_means_by_hand() {
        let d: Vec<String> = ["11", "11", "00", "01"].map(String::from).to_vec();
        let h = hamming_matrix(&d);
        let clusters = [Some(0), Some(0), Some(1), Some(1)];
        let (w, b) = cluster_means(&h, &clusters);
        // within: (0,1)=0, (2,3)=1; between: 2,1,2,1
        assert_eq!(w, Some(0.5));
        assert_eq!(b, Some(1.5));
        assert_eq!(cluster_means(&h, &[None; 4]), (None, None));
    }
}
