//! Reverse-mode differentiation over a recorded list of operations.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse and returns the gradient of a scalar node with
//! respect to every node that influenced it. Parameter leaves remember their
//! [`ParamId`] so their gradients can be accumulated back into a pool.

use crate::error::{Error, Result};
use crate::param::{ParamId, Parameter};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Probabilities are kept this far away from 0 and 1 before taking logits.
pub const PROB_CLAMP: f64 = 1e-12;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, f64),
    MeanRows(Var),
    ConcatCols(Var, Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    GatedMean {
        inputs: Vec<Var>,
        gates: Var,
        gate_index: Vec<usize>,
        // Sum of the selected gates, or `None` when it fell under the
        // threshold and the output is the zero tensor.
        total: Option<f64>,
    },
    Concrete {
        probs: Var,
        tau: f64,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Tensor,
        probs: Tensor,
    },
    Dot {
        x: Var,
        weights: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, param: &Parameter) -> Var {
        self.push(param.value.clone(), Op::Param(param.id))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = tensor::affine_kernel(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Affine { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::relu_scalar);
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::sigmoid_scalar);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    /// Mean over the leading dimension: `[n, e] -> [e]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (n, e) = v.matrix_dims("mean_rows")?;
        let mut out = vec![0.0; e];
        for r in 0..n {
            for (o, &a) in out.iter_mut().zip(v.row(r)) {
                *o += a;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x)))
    }

    /// `[n, a] ++ [n, b] -> [n, a + b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (na, ca) = va.matrix_dims("concat_cols")?;
        let (nb, cb) = vb.matrix_dims("concat_cols")?;
        if na != nb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(na * (ca + cb));
        for r in 0..na {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let out = Tensor::new(vec![na, ca + cb], data)?;
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Scales each row to unit Euclidean norm (rows with a norm below
    /// `1e-12` are divided by that floor instead).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (n, _) = v.matrix_dims("l2_normalize_rows")?;
        let mut out = v.clone();
        let mut norms = Vec::with_capacity(n);
        let c = v.cols();
        for r in 0..n {
            let norm = v.row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
            let norm = norm.max(NORM_FLOOR);
            out.data_mut()[r * c..(r + 1) * c]
                .iter_mut()
                .for_each(|a| *a /= norm);
            norms.push(norm);
        }
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }))
    }

    /// Gate-weighted mean of same-shaped inputs:
    /// `Σ_k g_k u_k / Σ_k g_k` with `g_k = gates[gate_index[k]]`, or the
    /// zero tensor when `Σ_k g_k <= threshold`.
    pub fn gated_mean(
        &mut self,
        inputs: &[Var],
        gates: Var,
        gate_index: &[usize],
        threshold: f64,
    ) -> Result<Var> {
        assert_eq!(inputs.len(), gate_index.len());
        assert!(!inputs.is_empty());
        let shape = self.value(inputs[0]).shape().to_vec();
        for &u in inputs {
            if self.value(u).shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "gated_mean",
                    left: shape,
                    right: self.value(u).shape().to_vec(),
                });
            }
        }
        let g = self.value(gates).data();
        let weights: Vec<f64> = gate_index.iter().map(|&i| g[i]).collect();
        let total: f64 = weights.iter().sum();
        let mut out = Tensor::zeros(&shape);
        let open = total > threshold;
        if open {
            let od = out.data_mut();
            for (&u, &w) in inputs.iter().zip(&weights) {
                for (o, &a) in od.iter_mut().zip(self.nodes[u.0].value.data()) {
                    *o += w * a;
                }
            }
            od.iter_mut().for_each(|o| *o /= total);
        }
        Ok(self.push(
            out,
            Op::GatedMean {
                inputs: inputs.to_vec(),
                gates,
                gate_index: gate_index.to_vec(),
                total: open.then_some(total),
            },
        ))
    }

    /// Binary concrete relaxation:
    /// `v = σ((noise + ln(π / (1 - π))) / τ)` elementwise, where `noise` holds
    /// the logistic draws `ln ε - ln(1 - ε)`. `π` is clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn concrete(&mut self, probs: Var, noise: &[f64], tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let p = self.value(probs);
        if p.len() != noise.len() {
            return Err(Error::ShapeMismatch {
                op: "concrete",
                left: p.shape().to_vec(),
                right: vec![noise.len()],
            });
        }
        let mut out = p.clone();
        for (o, &n) in out.data_mut().iter_mut().zip(noise) {
            let pi = o.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            *o = tensor::sigmoid_scalar((n + (pi / (1.0 - pi)).ln()) / tau);
        }
        Ok(self.push(out, Op::Concrete { probs, tau }))
    }

    /// Mean cross-entropy of row-wise softmax against one-hot targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (loss, probs) = tensor::softmax_xent_kernel(self.value(logits), targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.clone(),
                probs,
            },
        ))
    }

    /// `Σ x ⊙ weights` as a scalar.
    pub fn dot(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let v = self.value(x);
        if v.len() != weights.len() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: v.shape().to_vec(),
                right: weights.shape().to_vec(),
            });
        }
        let s = v
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                weights: weights.clone(),
            },
        ))
    }

    /// Gradients of the scalar node `loss` with respect to all nodes.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: lv.shape().to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Affine { x, w, b } => {
                    let (dx, dw, db) = tensor::affine_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Relu(x) => {
                    let mut d = g.clone();
                    for (dv, &xv) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let mut d = g.clone();
                    for (dv, &s) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *dv *= s * (1.0 - s);
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Scale(x, f) => {
                    accumulate(&mut grads, *x, g.map(|v| v * f));
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let n = xv.rows();
                    let mut d = Tensor::zeros(xv.shape());
                    let e = xv.cols();
                    for r in 0..n {
                        for (dv, &gv) in d.data_mut()[r * e..(r + 1) * e].iter_mut().zip(g.data()) {
                            *dv = gv / n as f64;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                    let n = g.rows();
                    let mut da = Vec::with_capacity(n * ca);
                    let mut db = Vec::with_capacity(n * cb);
                    for r in 0..n {
                        let gr = g.row(r);
                        da.extend_from_slice(&gr[..ca]);
                        db.extend_from_slice(&gr[ca..]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![n, ca], da)?);
                    accumulate(&mut grads, *b, Tensor::new(vec![n, cb], db)?);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = g.clone();
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dr = &mut d.data_mut()[r * c..(r + 1) * c];
                        if norm > NORM_FLOOR {
                            let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                dr[j] = (gr[j] - yr[j] * proj) / norm;
                            }
                        } else {
                            dr.iter_mut().for_each(|v| *v /= norm);
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::GatedMean {
                    inputs,
                    gates,
                    gate_index,
                    total,
                } => {
                    let Some(total) = *total else {
                        grads[idx] = Some(g);
                        continue;
                    };
                    let gate_values = self.value(*gates);
                    let mut dgates = Tensor::zeros(gate_values.shape());
                    for (&u, &gi) in inputs.iter().zip(gate_index) {
                        let w = gate_values.data()[gi];
                        let uv = self.value(u);
                        let dg: f64 = g
                            .data()
                            .iter()
                            .zip(uv.data())
                            .zip(node.value.data())
                            .map(|((gv, a), o)| gv * (a - o))
                            .sum();
                        dgates.data_mut()[gi] += dg / total;
                        accumulate(&mut grads, u, g.map(|v| v * w / total));
                    }
                    accumulate(&mut grads, *gates, dgates);
                }
                Op::Concrete { probs, tau } => {
                    let p = self.value(*probs);
                    let mut d = g.clone();
                    for ((dv, &v), &pi) in
                        d.data_mut().iter_mut().zip(node.value.data()).zip(p.data())
                    {
                        if pi <= PROB_CLAMP || pi >= 1.0 - PROB_CLAMP {
                            *dv = 0.0;
                        } else {
                            *dv *= v * (1.0 - v) / (tau * pi * (1.0 - pi));
                        }
                    }
                    accumulate(&mut grads, *probs, d);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let n = probs.rows() as f64;
                    let scale = g.item() / n;
                    let mut d = probs.clone();
                    for (dv, &t) in d.data_mut().iter_mut().zip(targets.data()) {
                        *dv = (*dv - t) * scale;
                    }
                    accumulate(&mut grads, *logits, d);
                }
                Op::Dot { x, weights } => {
                    let s = g.item();
                    accumulate(&mut grads, *x, weights.map(|w| w * s));
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every parameter leaf, in recording order.
    pub fn param_grads<'a>(
        &'a self,
        grads: &'a Gradients,
    ) -> impl Iterator<Item = (ParamId, &'a Tensor)> + 'a {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(move |(i, n)| match n.op {
                Op::Param(id) => grads.grads[i].as_ref().map(|g| (id, g)),
                _ => None,
            })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}
