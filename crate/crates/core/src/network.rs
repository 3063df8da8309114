//! Forward pass of the assembled modular network.
//!
//! Encoders map each sample to `n_1` embeddings. Every block in layer `l`
//! receives the gate-weighted mean of the outputs of layer `l - 1`
//! (the zero tensor when its incoming gates sum to at most the gate
//! threshold), runs its MLP, and the logits are the gate-weighted mean of the
//! last-layer block outputs under the output gates.
//!
//! Hard decisions are pruned before use: gates leaving inactive blocks are
//! closed, so an inactive block never reaches the logits.

use crate::arch::{ArchitectureSpec, ConnectionMatrix, DecisionVector, GateMode};
use crate::error::{Error, Result};
use crate::param::{Slot, ENCODER_LAYER};
use crate::pool::ModulePool;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gate sums at or below this value select the zero input.
pub const GATE_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
struct DenseVars {
    w: Var,
    b: Var,
}

#[derive(Debug, Clone)]
struct BlockVars {
    first: DenseVars,
    second: Option<DenseVars>,
}

/// Tape handles for the encoder and block parameters of a pool.
#[derive(Debug, Clone)]
pub struct ModelVars {
    encoders: Vec<DenseVars>,
    /// `blocks[l - 2][j]`.
    blocks: Vec<Vec<BlockVars>>,
}

/// Records every encoder and block parameter of `pool` as a tape leaf.
pub fn register_model(tape: &mut Tape, pool: &ModulePool) -> Result<ModelVars> {
    let spec = pool.spec();
    let dense = |tape: &mut Tape, layer, block, w, b| -> Result<DenseVars> {
        Ok(DenseVars {
            w: tape.param(pool.param(crate::param::ParamId::new(layer, block, w))?),
            b: tape.param(pool.param(crate::param::ParamId::new(layer, block, b))?),
        })
    };
    let encoders = (0..spec.num_encoders())
        .map(|j| dense(tape, ENCODER_LAYER, j, Slot::W1, Slot::B1))
        .collect::<Result<Vec<_>>>()?;
    let mut blocks = Vec::new();
    for layer in 2..=spec.num_layers() {
        let mut row = Vec::new();
        for j in 0..spec.width(layer) {
            let first = dense(tape, layer, j, Slot::W1, Slot::B1)?;
            let second = match spec.block_hidden_dim {
                Some(_) => Some(dense(tape, layer, j, Slot::W2, Slot::B2)?),
                None => None,
            };
            row.push(BlockVars { first, second });
        }
        blocks.push(row);
    }
    Ok(ModelVars { encoders, blocks })
}

/// Gate source for a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Gates<'a> {
    /// A constant decision; hard decisions are pruned first.
    Fixed(&'a DecisionVector),
    /// A relaxed decision recorded on the tape, so gradients reach it.
    Tracked(Var),
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub gate_threshold: f64,
    /// Routing probabilities used to reopen one output gate when all of them
    /// are closed.
    pub fallback: Option<&'a [f64]>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        ForwardOptions {
            gate_threshold: GATE_THRESHOLD,
            fallback: None,
        }
    }
}

pub fn encode_on_tape(tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Vec<Var>> {
    vars.encoders
        .iter()
        .map(|e| {
            let h = tape.affine(x, e.w, e.b)?;
            Ok(tape.relu(h))
        })
        .collect()
}

fn block_on_tape(tape: &mut Tape, block: &BlockVars, input: Var, last: bool) -> Result<Var> {
    let mut h = tape.affine(input, block.first.w, block.first.b)?;
    if let Some(second) = &block.second {
        let a = tape.relu(h);
        h = tape.affine(a, second.w, second.b)?;
    }
    Ok(if last { h } else { tape.relu(h) })
}

/// Builds the logits for the batch `x`.
pub fn forward_on_tape(
    tape: &mut Tape,
    spec: &ArchitectureSpec,
    vars: &ModelVars,
    x: Var,
    gates: Gates<'_>,
    options: ForwardOptions<'_>,
) -> Result<Var> {
    let eps = options.gate_threshold;
    let (gate_var, hard_mask) = match gates {
        Gates::Fixed(decision) => {
            decision.check_len(spec)?;
            match decision.mode() {
                GateMode::Hard => {
                    let pruned = decision.pruned(spec)?;
                    let mask = crate::arch::active_mask(decision, spec)?;
                    (
                        tape.input(Tensor::vector(pruned.values().to_vec())),
                        Some(mask),
                    )
                }
                GateMode::Relaxed => (tape.input(Tensor::vector(decision.values().to_vec())), None),
            }
        }
        Gates::Tracked(v) => {
            let got = tape.value(v).len();
            if got != spec.path_count() {
                return Err(Error::DecisionLength {
                    expected: spec.path_count(),
                    got,
                });
            }
            (v, None)
        }
    };

    let mut upstream = encode_on_tape(tape, vars, x)?;
    for layer in 2..=spec.num_layers() {
        let last = spec.is_last_layer(layer);
        let sources = spec.width(layer - 1);
        let mut outputs = Vec::with_capacity(spec.width(layer));
        for (j, block) in vars.blocks[layer - 2].iter().enumerate() {
            let index: Vec<usize> = (0..sources).map(|k| spec.gate_index(layer, j, k)).collect();
            let input = tape.gated_mean(&upstream, gate_var, &index, eps)?;
            outputs.push(block_on_tape(tape, block, input, last)?);
        }
        upstream = outputs;
    }

    let last = spec.num_layers();
    let n_out = spec.width(last);
    let out_index: Vec<usize> = (0..n_out).map(|j| spec.output_offset() + j).collect();
    let out_total: f64 = out_index
        .iter()
        .map(|&i| tape.value(gate_var).data()[i])
        .sum();
    if out_total > eps {
        return tape.gated_mean(&upstream, gate_var, &out_index, eps);
    }

    let probs = options.fallback.ok_or(Error::NoOutputPath)?;
    if probs.len() != spec.path_count() {
        return Err(Error::DecisionLength {
            expected: spec.path_count(),
            got: probs.len(),
        });
    }
    // Prefer blocks that are reachable; the lowest index wins ties.
    let candidates: Vec<usize> = match &hard_mask {
        Some(mask) => {
            let reachable: Vec<usize> = (0..n_out)
                .filter(|&j| {
                    mask.is_active(
                        spec,
                        crate::arch::BlockId {
                            layer: last,
                            index: j,
                        },
                    )
                })
                .collect();
            if reachable.is_empty() {
                (0..n_out).collect()
            } else {
                reachable
            }
        }
        None => (0..n_out).collect(),
    };
    let mut best = candidates[0];
    for &j in &candidates[1..] {
        if probs[out_index[j]] > probs[out_index[best]] {
            best = j;
        }
    }
    let mut forced = vec![0.0; n_out];
    forced[best] = 1.0;
    let forced = tape.input(Tensor::vector(forced));
    let index: Vec<usize> = (0..n_out).collect();
    tape.gated_mean(&upstream, forced, &index, eps)
}

/// Encoder embeddings `z^(1..n_1)` for a batch.
pub fn encode(x: &Tensor, pool: &ModulePool) -> Result<Vec<Tensor>> {
    check_input(x, pool.spec())?;
    let mut tape = Tape::new();
    let vars = register_model(&mut tape, pool)?;
    let xv = tape.input(x.clone());
    let z = encode_on_tape(&mut tape, &vars, xv)?;
    Ok(z.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Input of block `target` in `layer` given the outputs of layer `layer - 1`.
pub fn block_input(
    layer: usize,
    target: usize,
    upstream: &[Tensor],
    connections: &ConnectionMatrix,
    gate_threshold: f64,
) -> Result<Tensor> {
    let gates = connections.incoming(layer, target);
    if gates.len() != upstream.len() {
        return Err(Error::ShapeMismatch {
            op: "block_input",
            left: vec![gates.len()],
            right: vec![upstream.len()],
        });
    }
    let mut tape = Tape::new();
    let inputs: Vec<Var> = upstream.iter().map(|u| tape.input(u.clone())).collect();
    let g = tape.input(Tensor::vector(gates.to_vec()));
    let index: Vec<usize> = (0..gates.len()).collect();
    let out = tape.gated_mean(&inputs, g, &index, gate_threshold)?;
    Ok(tape.value(out).clone())
}

/// Logits of the assembled network for a batch.
pub fn forward(
    x: &Tensor,
    decision: &DecisionVector,
    pool: &ModulePool,
    options: ForwardOptions<'_>,
) -> Result<Tensor> {
    check_input(x, pool.spec())?;
    let mut tape = Tape::new();
    let vars = register_model(&mut tape, pool)?;
    let xv = tape.input(x.clone());
    let out = forward_on_tape(
        &mut tape,
        pool.spec(),
        &vars,
        xv,
        Gates::Fixed(decision),
        options,
    )?;
    Ok(tape.value(out).clone())
}

fn check_input(x: &Tensor, spec: &ArchitectureSpec) -> Result<()> {
    let (_, d) = x.matrix_dims("forward")?;
    if d != spec.input_dim {
        return Err(Error::ShapeMismatch {
            op: "forward input",
            left: x.shape().to_vec(),
            right: vec![spec.input_dim],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::active_mask;
    use crate::param::ParamId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn pool(widths: &[usize], hidden: Option<usize>, seed: u64) -> ModulePool {
        let spec = ArchitectureSpec::new(widths.to_vec(), 3, 4, hidden, 4, 3).unwrap();
        ModulePool::init(spec, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn single_encoder_matches_its_forward_pass() {
        let p = pool(&[1, 2], None, 1);
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(9), 5, 3);
        let z = encode(&x, &p).unwrap();
        assert_eq!(z.len(), 1);
        let w = p.value(1, 0, Slot::W1).unwrap();
        let b = p.value(1, 0, Slot::B1).unwrap();
        let direct = crate::ops::relu(&crate::ops::affine(&x, w, b).unwrap());
        assert_eq!(z[0], direct);
    }

    #[test]
    fn identical_encoders_give_identical_outputs() {
        let mut p = pool(&[2, 2], None, 2);
        for slot in [Slot::W1, Slot::B1] {
            let v = p.value(1, 0, slot).unwrap().clone();
            p.set_value(ParamId::new(1, 1, slot), v).unwrap();
        }
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(1), 4, 3);
        let z = encode(&x, &p).unwrap();
        assert_eq!(z[0], z[1]);
    }

    #[test]
    fn encoders_are_independent() {
        let p = pool(&[3, 2], None, 3);
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(2), 4, 3);
        let before = encode(&x, &p).unwrap();
        let mut q = p.clone();
        let w = q.param_mut(ParamId::new(1, 1, Slot::W1)).unwrap();
        w.value.data_mut()[0] += 0.7;
        let after = encode(&x, &q).unwrap();
        assert_eq!(before[0], after[0]);
        assert_eq!(before[2], after[2]);
        assert_ne!(before[1], after[1]);
    }

    #[test]
    fn block_input_rules() {
        let spec = ArchitectureSpec::new(vec![2, 1], 3, 2, None, 2, 2).unwrap();
        let u1 = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let u2 = Tensor::from_rows(&[vec![3.0, 6.0]]).unwrap();
        let cm = |g: [bool; 2]| {
            let mut bits = vec![true; spec.path_count()];
            bits[spec.gate_index(2, 0, 0)] = g[0];
            bits[spec.gate_index(2, 0, 1)] = g[1];
            ConnectionMatrix::from_decision(&spec, &DecisionVector::hard(&bits)).unwrap()
        };
        let up = [u1.clone(), u2.clone()];
        let zero = block_input(2, 0, &up, &cm([false, false]), GATE_THRESHOLD).unwrap();
        assert_eq!(zero.data(), &[0.0, 0.0]);
        let single = block_input(2, 0, &up, &cm([true, false]), GATE_THRESHOLD).unwrap();
        assert_eq!(single, u1);
        let both = block_input(2, 0, &up, &cm([true, true]), GATE_THRESHOLD).unwrap();
        assert_eq!(both.data(), &[2.0, 4.0]);
    }

    #[test]
    fn all_output_gates_closed_needs_fallback() {
        let p = pool(&[1, 2, 2], Some(3), 4);
        let spec = p.spec().clone();
        let mut bits = vec![true; spec.path_count()];
        for j in 0..2 {
            bits[spec.output_offset() + j] = false;
        }
        let v = DecisionVector::hard(&bits);
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(3), 2, 3);
        assert!(matches!(
            forward(&x, &v, &p, ForwardOptions::default()),
            Err(Error::NoOutputPath)
        ));
        // highest probability output gate (index 1) is reopened
        let mut probs = vec![0.5; spec.path_count()];
        probs[spec.output_offset() + 1] = 0.9;
        let opts = ForwardOptions {
            fallback: Some(&probs),
            ..Default::default()
        };
        let logits = forward(&x, &v, &p, opts).unwrap();
        let mut only_second = bits.clone();
        only_second[spec.output_offset() + 1] = true;
        let expected = forward(
            &x,
            &DecisionVector::hard(&only_second),
            &p,
            ForwardOptions::default(),
        )
        .unwrap();
        assert_eq!(logits, expected);
    }

    #[test]
    fn inactive_block_parameters_do_not_matter() {
        let p = pool(&[1, 2, 2], Some(3), 5);
        let spec = p.spec().clone();
        // layer-2 block 1 has no input but feeds layer-3 block 1
        let mut bits = vec![true; spec.path_count()];
        bits[spec.gate_index(2, 1, 0)] = false;
        let v = DecisionVector::hard(&bits);
        let mask = active_mask(&v, &spec).unwrap();
        assert_eq!(mask.0, vec![true, false, true, true]);
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(4), 3, 3);
        let base = forward(&x, &v, &p, ForwardOptions::default()).unwrap();
        let mut q = p.clone();
        for slot in [Slot::W1, Slot::B1, Slot::W2, Slot::B2] {
            let prm = q.param_mut(ParamId::new(2, 1, slot)).unwrap();
            prm.value = prm.value.map(|v| v * 3.0 + 1.0);
        }
        assert_eq!(
            base,
            forward(&x, &v, &q, ForwardOptions::default()).unwrap()
        );
    }

    #[test]
    fn wrong_decision_length_is_rejected() {
        let p = pool(&[1, 2], None, 6);
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(5), 1, 3);
        let v = DecisionVector::ones(3);
        assert!(matches!(
            forward(&x, &v, &p, ForwardOptions::default()),
            Err(Error::DecisionLength { .. })
        ));
    }
}
