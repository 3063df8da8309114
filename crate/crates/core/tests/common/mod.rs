//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use fedmn::data::{FederatedDataset, SynthConfig};
use fedmn::federation::{aggregate, AggregationMode, UploadPayload};
use fedmn::network::{forward_on_tape, register_model, ForwardOptions, Gates};
use fedmn::routing::{register_hypernet, routing_probs_on_tape};
use fedmn::{
    ActiveMask, ArchitectureSpec, BlockId, DecisionVector, HypernetSpec, LabeledData, ModulePool,
    ParamId, Slot, Tape, Tensor, Unit, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(-1.0..1.0) * scale)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Same as [`random_tensor`] but keeps every entry at least `gap` away from
/// zero, so ReLU kinks stay out of finite-difference stencils.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = random_tensor(rng, shape, 1.0);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 {
                -gap - v.abs()
            } else {
                gap + v.abs()
            };
        }
    }
    t
}

pub fn one_hot_rows(rng: &mut impl Rng, n: usize, c: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, c]);
    for r in 0..n {
        let j = rng.random_range(0..c);
        t.data_mut()[r * c + j] = 1.0;
    }
    t
}

/// Relative error with a small absolute floor.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Largest relative error between the tape gradient and central finite
/// differences for `scalar = Σ build(leaves) ⊙ probe`.
pub fn fd_max_error(
    leaves: &[Tensor],
    probe_seed: u64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let eval = |values: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.input(v.clone())).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let probe = random_tensor(&mut rng(probe_seed), &shape, 1.0);
        let s = tape.dot(out, &probe).unwrap();
        let grads = tape.backward(s).unwrap();
        let g = vars
            .iter()
            .zip(values)
            .map(|(&v, val)| {
                grads
                    .wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(val.shape()))
            })
            .collect();
        (tape.value(s).item(), g)
    };
    let (_, analytic) = eval(leaves);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, leaf) in leaves.iter().enumerate() {
        for k in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            plus[i].data_mut()[k] += h;
            let mut minus = leaves.to_vec();
            minus[i].data_mut()[k] -= h;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i].data()[k], numeric));
        }
    }
    worst
}

/// Names of the differentiable tape ops checked by [`op_fd_errors`].
pub const OPS: [&str; 12] = [
    "affine",
    "relu",
    "sigmoid",
    "add",
    "scale",
    "mean_rows",
    "concat_cols",
    "l2_normalize_rows",
    "gated_mean",
    "concrete",
    "softmax_cross_entropy",
    "dot",
];

/// Worst finite-difference error of `op` over `configs` random
/// configurations.
pub fn op_fd_errors(op: &str, configs: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for cfg in 0..configs as u64 {
        let r = &mut rng(1000 + cfg);
        let n = r.random_range(1..5);
        let d = r.random_range(1..6);
        let e = r.random_range(1..5);
        let err = match op {
            "affine" => fd_max_error(
                &[
                    random_tensor(r, &[n, d], 1.0),
                    random_tensor(r, &[d, e], 1.0),
                    random_tensor(r, &[e], 1.0),
                ],
                cfg,
                &|t, v| t.affine(v[0], v[1], v[2]).unwrap(),
            ),
            "relu" => fd_max_error(&[away_from_zero(r, &[n, d], 1e-3)], cfg, &|t, v| {
                t.relu(v[0])
            }),
            "sigmoid" => fd_max_error(&[random_tensor(r, &[n, d], 3.0)], cfg, &|t, v| {
                t.sigmoid(v[0])
            }),
            "add" => fd_max_error(
                &[
                    random_tensor(r, &[n, d], 1.0),
                    random_tensor(r, &[n, d], 1.0),
                ],
                cfg,
                &|t, v| t.add(v[0], v[1]).unwrap(),
            ),
            "scale" => {
                let f = r.random_range(-2.0..2.0);
                fd_max_error(&[random_tensor(r, &[n, d], 1.0)], cfg, &move |t, v| {
                    t.scale(v[0], f)
                })
            }
            "mean_rows" => fd_max_error(&[random_tensor(r, &[n, d], 1.0)], cfg, &|t, v| {
                t.mean_rows(v[0]).unwrap()
            }),
            "concat_cols" => fd_max_error(
                &[
                    random_tensor(r, &[n, d], 1.0),
                    random_tensor(r, &[n, e], 1.0),
                ],
                cfg,
                &|t, v| t.concat_cols(v[0], v[1]).unwrap(),
            ),
            "l2_normalize_rows" => {
                fd_max_error(&[away_from_zero(r, &[n, d], 0.1)], cfg, &|t, v| {
                    t.l2_normalize_rows(v[0]).unwrap()
                })
            }
            "gated_mean" => {
                let k = r.random_range(1..4);
                let mut leaves: Vec<Tensor> =
                    (0..k).map(|_| random_tensor(r, &[n, d], 1.0)).collect();
                let gates = Tensor::vector((0..k + 2).map(|_| r.random_range(0.1..1.0)).collect());
                leaves.push(gates);
                // gates 2.. feed the inputs, in a shuffled order
                let mut index: Vec<usize> = (2..k + 2).collect();
                index.reverse();
                fd_max_error(&leaves, cfg, &move |t, v| {
                    t.gated_mean(&v[..k], v[k], &index, 1e-6).unwrap()
                })
            }
            "concrete" => {
                let p = Tensor::vector((0..d).map(|_| r.random_range(0.05..0.95)).collect());
                let noise: Vec<f64> = (0..d)
                    .map(|_| {
                        let u: f64 = r.random_range(0.01..0.99);
                        u.ln() - (1.0 - u).ln()
                    })
                    .collect();
                let tau = [1.0, 0.5, 0.2][cfg as usize % 3];
                fd_max_error(&[p], cfg, &move |t, v| {
                    t.concrete(v[0], &noise, tau).unwrap()
                })
            }
            "softmax_cross_entropy" => {
                let targets = one_hot_rows(r, n, d.max(2));
                fd_max_error(
                    &[random_tensor(r, &[n, d.max(2)], 2.0)],
                    cfg,
                    &move |t, v| t.softmax_cross_entropy(v[0], &targets).unwrap(),
                )
            }
            "dot" => {
                let w = random_tensor(r, &[n, d], 1.0);
                fd_max_error(&[random_tensor(r, &[n, d], 1.0)], cfg, &move |t, v| {
                    t.dot(v[0], &w).unwrap()
                })
            }
            other => panic!("unknown op {other}"),
        };
        worst = worst.max(err);
    }
    worst
}

/// A random small pool with a hypernetwork.
pub fn random_pool(r: &mut impl Rng) -> ModulePool {
    let layers = r.random_range(2..4);
    let widths: Vec<usize> = (0..layers).map(|_| r.random_range(1..3)).collect();
    let hidden = if r.random_bool(0.5) {
        Some(r.random_range(2..4))
    } else {
        None
    };
    let input = r.random_range(2..4);
    let spec = ArchitectureSpec::new(widths, input, 3, hidden, 3, 3).unwrap();
    let hyper = HypernetSpec {
        feature_dim: 3,
        label_dim: 2,
    };
    let mut pool = ModulePool::init(
        spec,
        Some(hyper),
        &mut ChaCha8Rng::seed_from_u64(r.random()),
    )
    .unwrap();
    // larger hypernet weights so the probabilities move away from 0.5
    let ids: Vec<ParamId> = pool
        .params()
        .map(|p| p.id)
        .filter(|id| id.layer == 0)
        .collect();
    for id in ids {
        let shape = pool.param(id).unwrap().value.shape().to_vec();
        pool.set_value(id, random_tensor(r, &shape, 1.0)).unwrap();
    }
    pool
}

pub fn random_data(r: &mut impl Rng, n: usize, d: usize, c: usize) -> LabeledData {
    let x = random_tensor(r, &[n, d], 1.0);
    let y = (0..n).map(|_| r.random_range(0..c)).collect();
    LabeledData::new(x, y, c).unwrap()
}

/// Loss through the hypernetwork, the concrete sample with fixed noise and
/// the relaxed forward pass.
pub fn end_to_end_loss(
    pool: &ModulePool,
    data: &LabeledData,
    noise: &[f64],
    tau: f64,
) -> (f64, Tape, Var) {
    let mut tape = Tape::new();
    let vars = register_model(&mut tape, pool).unwrap();
    let hv = register_hypernet(&mut tape, pool).unwrap();
    let fx = tape.input(data.features.clone());
    let fy = tape.input(data.one_hot());
    let p = routing_probs_on_tape(&mut tape, &hv, fx, fy).unwrap();
    let v = tape.concrete(p, noise, tau).unwrap();
    let x = tape.input(data.features.clone());
    let logits = forward_on_tape(
        &mut tape,
        pool.spec(),
        &vars,
        x,
        Gates::Tracked(v),
        ForwardOptions::default(),
    )
    .unwrap();
    let loss = tape.softmax_cross_entropy(logits, &data.one_hot()).unwrap();
    (tape.value(loss).item(), tape, loss)
}

/// Worst finite-difference error of the end-to-end loss over every
/// parameter of `configs` random pools.
pub fn end_to_end_fd_error(configs: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for cfg in 0..configs as u64 {
        let r = &mut rng(5000 + cfg);
        let mut pool = random_pool(r);
        let spec = pool.spec().clone();
        let data = random_data(r, 4, spec.input_dim, spec.num_classes);
        let noise: Vec<f64> = (0..spec.path_count())
            .map(|_| {
                let u: f64 = r.random_range(0.05..0.95);
                u.ln() - (1.0 - u).ln()
            })
            .collect();
        let tau = [1.0, 0.5][cfg as usize % 2];
        let (_, tape, loss) = end_to_end_loss(&pool, &data, &noise, tau);
        let grads = tape.backward(loss).unwrap();
        pool.zero_grad();
        pool.accumulate(&tape, &grads).unwrap();
        let analytic: BTreeMap<ParamId, Tensor> =
            pool.params().map(|p| (p.id, p.grad.clone())).collect();
        let h = 1e-6;
        for (id, g) in analytic {
            for k in 0..g.len() {
                let base = pool.param(id).unwrap().value.clone();
                let mut plus = base.clone();
                plus.data_mut()[k] += h;
                pool.set_value(id, plus).unwrap();
                let lp = end_to_end_loss(&pool, &data, &noise, tau).0;
                let mut minus = base.clone();
                minus.data_mut()[k] -= h;
                pool.set_value(id, minus).unwrap();
                let lm = end_to_end_loss(&pool, &data, &noise, tau).0;
                pool.set_value(id, base).unwrap();
                worst = worst.max(rel_err(g.data()[k], (lp - lm) / (2.0 * h)));
            }
        }
    }
    worst
}

/// Fraction of binary concrete samples above 0.5.
pub fn concrete_fraction(pi: f64, tau: f64, draws: usize, seed: u64) -> f64 {
    use fedmn::routing::{relax, ConcreteNoise};
    let probs = fedmn::RoutingProbs(vec![pi; draws]);
    let noise = ConcreteNoise::draw(draws, &mut rng(seed));
    let v = relax(&probs, tau, &noise).unwrap();
    v.values().iter().filter(|&&x| x > 0.5).count() as f64 / draws as f64
}

fn dense(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (din, dout) = (w.rows(), w.cols());
    x.iter()
        .map(|row| {
            let mut out = vec![0.0; dout];
            for k in 0..din {
                for c in 0..dout {
                    out[c] += row[k] * w.get(k, c);
                }
            }
            for c in 0..dout {
                out[c] += b.data()[c];
            }
            out
        })
        .collect()
}

fn relu_all(x: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    x.into_iter()
        .map(|r| {
            r.into_iter()
                .map(|v| if v > 0.0 { v } else { 0.0 })
                .collect()
        })
        .collect()
}

fn mean_of(items: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; items[0][0].len()]; items[0].len()];
    for it in items {
        for (o, r) in out.iter_mut().zip(it) {
            for (a, b) in o.iter_mut().zip(r) {
                *a += b;
            }
        }
    }
    let n = items.len() as f64;
    for o in &mut out {
        for a in o {
            *a /= n;
        }
    }
    out
}

/// Every block reads the plain mean of all blocks in the previous layer;
/// logits are the plain mean of the last layer. No gates involved.
pub fn dense_oracle(pool: &ModulePool, x: &Tensor) -> Vec<Vec<f64>> {
    let spec = pool.spec();
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
    let get = |l, b, s| pool.value(l, b, s).unwrap();
    let mut upstream: Vec<Vec<Vec<f64>>> = (0..spec.width(1))
        .map(|j| relu_all(dense(&rows, get(1, j, Slot::W1), get(1, j, Slot::B1))))
        .collect();
    for layer in 2..=spec.num_layers() {
        let input = mean_of(&upstream);
        let last = layer == spec.num_layers();
        upstream = (0..spec.width(layer))
            .map(|j| {
                let mut h = dense(&input, get(layer, j, Slot::W1), get(layer, j, Slot::B1));
                if spec.block_hidden_dim.is_some() {
                    h = dense(
                        &relu_all(h),
                        get(layer, j, Slot::W2),
                        get(layer, j, Slot::B2),
                    );
                }
                if last {
                    h
                } else {
                    relu_all(h)
                }
            })
            .collect();
    }
    mean_of(&upstream)
}

/// Blocks reachable from an encoder along open edges, by breadth-first
/// search over an explicit graph. Order matches the active mask.
pub fn reachable_blocks(spec: &ArchitectureSpec, bits: &[bool]) -> Vec<bool> {
    // node ids: (layer, index) flattened
    let mut nodes = Vec::new();
    for layer in 1..=spec.num_layers() {
        for j in 0..spec.width(layer) {
            nodes.push((layer, j));
        }
    }
    let id = |l: usize, j: usize| nodes.iter().position(|&n| n == (l, j)).unwrap();
    let mut edges = vec![Vec::new(); nodes.len()];
    let mut gate = 0;
    for layer in 2..=spec.num_layers() {
        // gates of a layer pair are laid out source-major
        for source in 0..spec.width(layer - 1) {
            for target in 0..spec.width(layer) {
                if bits[gate] {
                    edges[id(layer - 1, source)].push(id(layer, target));
                }
                gate += 1;
            }
        }
    }
    let mut seen = vec![false; nodes.len()];
    let mut queue: VecDeque<usize> = (0..spec.width(1)).map(|j| id(1, j)).collect();
    while let Some(n) = queue.pop_front() {
        if seen[n] {
            continue;
        }
        seen[n] = true;
        queue.extend(edges[n].iter().copied());
    }
    nodes
        .iter()
        .zip(seen)
        .filter(|((l, _), _)| *l >= 2)
        .map(|(_, s)| s)
        .collect()
}

pub fn bits_of(mut x: u64, len: usize) -> Vec<bool> {
    (0..len)
        .map(|_| {
            let b = x & 1 == 1;
            x >>= 1;
            b
        })
        .collect()
}

/// Plain FedAvg over whole flattened parameter vectors.
pub fn flat_fedavg(payloads: &[UploadPayload]) -> Vec<f64> {
    let total: f64 = payloads.iter().map(|p| p.samples as f64).sum();
    let flat: Vec<Vec<f64>> = payloads
        .iter()
        .map(|p| {
            p.params
                .values()
                .flat_map(|t| t.data().iter().copied())
                .collect()
        })
        .collect();
    let mut out = vec![0.0; flat[0].len()];
    for (p, f) in payloads.iter().zip(&flat) {
        let w = p.samples as f64 / total;
        for (o, v) in out.iter_mut().zip(f) {
            *o += w * v;
        }
    }
    out
}

/// The 3-cluster benchmark with its default settings for `seed`.
pub fn benchmark(seed: u64) -> FederatedDataset {
    fedmn::data::generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn all_ones(spec: &ArchitectureSpec) -> DecisionVector {
    DecisionVector::ones(spec.path_count())
}

/// The upload a client with `pool` and `mask` would send.
pub fn payload_from(
    pool: &ModulePool,
    client: usize,
    samples: usize,
    mask: ActiveMask,
) -> UploadPayload {
    let spec = pool.spec().clone();
    let params = pool
        .params()
        .filter(|p| match Unit::of(p.id) {
            Unit::Block(b) => mask.is_active(&spec, b),
            _ => true,
        })
        .map(|p| (p.id, p.value.clone()))
        .collect();
    UploadPayload {
        client,
        samples,
        mask,
        params,
    }
}

/// A pool with every parameter set to `value`.
pub fn filled(spec: &ArchitectureSpec, value: f64) -> ModulePool {
    let mut p = ModulePool::init(spec.clone(), None, &mut rng(0)).unwrap();
    let ids: Vec<ParamId> = p.params().map(|q| q.id).collect();
    for id in ids {
        let shape = p.param(id).unwrap().value.shape().to_vec();
        p.set_value(id, Tensor::filled(&shape, value)).unwrap();
    }
    p
}

/// Two clients holding all-ones and all-threes pools, aggregated over two
/// chained blocks A = (2, 0) and B = (3, 0) whose previous value is 7.
/// Returns a line per row that disagrees with the hand-worked result.
pub fn hand_table_mismatches() -> Vec<String> {
    let spec = ArchitectureSpec::new(vec![1, 1, 1], 2, 2, None, 2, 2).unwrap();
    let previous = filled(&spec, 7.0);
    let one = filled(&spec, 1.0);
    let three = filled(&spec, 3.0);
    let a = BlockId { layer: 2, index: 0 };
    let b = BlockId { layer: 3, index: 0 };
    let both = ActiveMask::all(&spec);
    let only_a = ActiveMask(vec![true, false]);
    let none = ActiveMask::none(&spec);
    let value =
        |p: &ModulePool, blk: BlockId| p.value(blk.layer, blk.index, Slot::B1).unwrap().data()[0];
    let enc = |p: &ModulePool| p.value(1, 0, Slot::W1).unwrap().data()[0];

    // (samples, mask) per client -> (A, B, encoder) renormalized, then (A, B) literal
    let table = [
        (
            (1, both.clone()),
            (1, both.clone()),
            (2.0, 2.0, 2.0),
            (2.0, 2.0),
        ),
        (
            (1, both.clone()),
            (1, only_a.clone()),
            (2.0, 1.0, 2.0),
            (2.0, 0.5),
        ),
        (
            (1, both.clone()),
            (3, both.clone()),
            (2.5, 2.5, 2.5),
            (2.5, 2.5),
        ),
        (
            (1, only_a.clone()),
            (3, only_a.clone()),
            (2.5, 7.0, 2.5),
            (2.5, 7.0),
        ),
        (
            (1, none.clone()),
            (3, only_a.clone()),
            (3.0, 7.0, 2.5),
            (2.25, 7.0),
        ),
    ];
    let mut bad = Vec::new();
    for (row, ((n1, m1), (n2, m2), renorm, literal)) in table.into_iter().enumerate() {
        let payloads = [
            payload_from(&one, 0, n1, m1),
            payload_from(&three, 1, n2, m2),
        ];
        let g = aggregate(&payloads, &previous, AggregationMode::Renormalized).unwrap();
        let got = (value(&g, a), value(&g, b), enc(&g));
        if got != renorm {
            bad.push(format!(
                "row {row}: renormalized {got:?}, expected {renorm:?}"
            ));
        }
        let g = aggregate(&payloads, &previous, AggregationMode::Literal).unwrap();
        let got = (value(&g, a), value(&g, b));
        if got != literal {
            bad.push(format!("row {row}: literal {got:?}, expected {literal:?}"));
        }
    }
    bad
}
