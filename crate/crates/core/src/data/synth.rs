use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_train_fraction, split_train_test, ClientData, FederatedDataset};
use crate::dataset::LabeledData;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// How clusters disagree on `p(y | x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionalShift {
    /// All clusters share the base labeling rule.
    Identity,
    /// Cluster `k > 0` relabels through its own class permutation.
    LabelPermutation,
    /// Cluster `k` rotates the features by `k · radians` in a fixed random
    /// plane before applying the base rule.
    Rotation { radians: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_clusters: usize,
    pub clients_per_cluster: usize,
    pub samples_per_client: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Norm of each cluster's feature mean offset.
    pub marginal_shift: f64,
    pub conditional_shift: ConditionalShift,
    /// Standard deviation of the isotropic feature noise.
    pub noise: f64,
    pub train_fraction: f64,
    /// Set by the caller; experiment files carry the seed elsewhere.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_clusters: 3,
            clients_per_cluster: 4,
            samples_per_client: 600,
            input_dim: 20,
            num_classes: 5,
            marginal_shift: 3.0,
            conditional_shift: ConditionalShift::LabelPermutation,
            noise: 1.0,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, v) in [
            ("num_clusters", self.num_clusters),
            ("clients_per_cluster", self.clients_per_cluster),
            ("samples_per_client", self.samples_per_client),
            ("input_dim", self.input_dim),
        ] {
            if v == 0 {
                p.push(format!("data.{name} must be at least 1"));
            }
        }
        if self.num_classes < 2 {
            p.push("data.num_classes must be at least 2".into());
        }
        if self.num_classes > self.samples_per_client {
            p.push(format!(
                "data.num_classes ({}) exceeds data.samples_per_client ({})",
                self.num_classes, self.samples_per_client
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            p.push("data.noise must be a finite value >= 0".into());
        }
        if !(self.marginal_shift >= 0.0 && self.marginal_shift.is_finite()) {
            p.push("data.marginal_shift must be a finite value >= 0".into());
        }
        if let Err(e) = check_train_fraction(self.train_fraction) {
            p.push(format!("data.{e}").replace("configuration error: ", ""));
        }
        p
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cluster `k`'s labeling rule.
struct Labeler {
    permutation: Vec<usize>,
    // rotation plane and angle
    plane: Option<(Vec<f64>, Vec<f64>, f64)>,
}

impl Labeler {
    fn label(&self, base: &[Vec<f64>], x: &[f64]) -> usize {
        let rotated;
        let x = match &self.plane {
            Some((a, b, angle)) => {
                let (pa, pb) = (dot(x, a), dot(x, b));
                let (c, s) = (angle.cos(), angle.sin());
                let (na, nb) = (c * pa - s * pb, s * pa + c * pb);
                rotated = x
                    .iter()
                    .zip(a.iter().zip(b))
                    .map(|(&xi, (&ai, &bi))| xi + (na - pa) * ai + (nb - pb) * bi)
                    .collect::<Vec<_>>();
                &rotated[..]
            }
            None => x,
        };
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (j, w) in base.iter().enumerate() {
            let s = dot(w, x);
            if s > best_score {
                best = j;
                best_score = s;
            }
        }
        self.permutation[best]
    }
}

fn distinct_permutations<R: Rng + ?Sized>(rng: &mut R, count: usize, c: usize) -> Vec<Vec<usize>> {
    let identity: Vec<usize> = (0..c).collect();
    let mut perms = vec![identity];
    // c! may be smaller than the cluster count; give up on distinctness then
    let factorial = (1..=c).try_fold(1usize, |acc, k| acc.checked_mul(k));
    let can_be_distinct = factorial.is_none_or(|f| f >= count);
    while perms.len() < count {
        let mut p: Vec<usize> = (0..c).collect();
        p.shuffle(rng);
        if !can_be_distinct || !perms.contains(&p) {
            perms.push(p);
        }
    }
    perms
}

/// Draws a clustered federated dataset. Clients of cluster `k` share the
/// feature mean `μ_k` and the labeling rule of cluster `k`; each client
/// draws its own samples.
pub fn generate(config: &SynthConfig) -> Result<FederatedDataset> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    let (d, c) = (config.input_dim, config.num_classes);
    let mut rng = stream(config.seed, Stream::Data, &[]);
    let base: Vec<Vec<f64>> = (0..c).map(|_| gaussian_vec(&mut rng, d)).collect();
    let means: Vec<Vec<f64>> = (0..config.num_clusters)
        .map(|_| {
            unit_vec(&mut rng, d)
                .into_iter()
                .map(|v| v * config.marginal_shift)
                .collect()
        })
        .collect();
    let labelers: Vec<Labeler> = match config.conditional_shift {
        ConditionalShift::Identity => (0..config.num_clusters)
            .map(|_| Labeler {
                permutation: (0..c).collect(),
                plane: None,
            })
            .collect(),
        ConditionalShift::LabelPermutation => {
            distinct_permutations(&mut rng, config.num_clusters, c)
                .into_iter()
                .map(|permutation| Labeler {
                    permutation,
                    plane: None,
                })
                .collect()
        }
        ConditionalShift::Rotation { radians } => {
            let a = unit_vec(&mut rng, d);
            // Gram-Schmidt for the second axis
            let b = loop {
                let v = gaussian_vec(&mut rng, d);
                let proj = dot(&v, &a);
                let w: Vec<f64> = v.iter().zip(&a).map(|(vi, ai)| vi - proj * ai).collect();
                let norm = dot(&w, &w).sqrt();
                if norm > 1e-9 || d < 2 {
                    break w
                        .into_iter()
                        .map(|x| x / norm.max(1e-300))
                        .collect::<Vec<_>>();
                }
            };
            (0..config.num_clusters)
                .map(|k| Labeler {
                    permutation: (0..c).collect(),
                    plane: Some((a.clone(), b.clone(), k as f64 * radians)),
                })
                .collect()
        }
    };

    let mut clients = Vec::new();
    for k in 0..config.num_clusters {
        for i in 0..config.clients_per_cluster {
            let id = (k * config.clients_per_cluster + i) as u64;
            let mut crng = stream(config.seed, Stream::Data, &[id]);
            let n = config.samples_per_client;
            let mut xs = Vec::with_capacity(n * d);
            let mut ys = Vec::with_capacity(n);
            for _ in 0..n {
                let x: Vec<f64> = means[k]
                    .iter()
                    .map(|&m| m + config.noise * crng.sample::<f64, _>(StandardNormal))
                    .collect();
                ys.push(labelers[k].label(&base, &x));
                xs.extend(x);
            }
            let all = LabeledData::new(Tensor::new(vec![n, d], xs)?, ys, c)?;
            let (train, test) = split_train_test(&all, config.train_fraction, &mut crng)?;
            clients.push(ClientData {
                train,
                test,
                cluster: Some(k),
            });
        }
    }
    Ok(FederatedDataset {
        clients,
        input_dim: d,
        num_classes: c,
    })
}
