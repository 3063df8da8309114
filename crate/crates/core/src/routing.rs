//! Routing hypernetwork and binary concrete decisions.
//!
//! The hypernetwork embeds a client's whole dataset: every sample's features
//! go through a one-hidden-layer ReLU map, its one-hot label through a dense
//! map, the two are concatenated, L2-normalized, and passed through a single
//! dense head with one output per path. The head outputs are averaged over
//! the dataset and squashed by a sigmoid into routing probabilities.

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::DecisionVector;
use crate::dataset::LabeledData;
use crate::error::{Error, Result};
use crate::param::{ParamId, Slot, HYPERNET_LAYER};
use crate::pool::ModulePool;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct HypernetVars {
    feature_w: Var,
    feature_b: Var,
    label_w: Var,
    label_b: Var,
    head_w: Var,
    head_b: Var,
}

pub fn register_hypernet(tape: &mut Tape, pool: &ModulePool) -> Result<HypernetVars> {
    if pool.hypernet().is_none() {
        return Err(Error::Config(
            "module pool has no routing hypernetwork".into(),
        ));
    }
    let mut p = |slot| -> Result<Var> {
        Ok(tape.param(pool.param(ParamId::new(HYPERNET_LAYER, 0, slot))?))
    };
    Ok(HypernetVars {
        feature_w: p(Slot::FeatureW)?,
        feature_b: p(Slot::FeatureB)?,
        label_w: p(Slot::LabelW)?,
        label_b: p(Slot::LabelB)?,
        head_w: p(Slot::HeadW)?,
        head_b: p(Slot::HeadB)?,
    })
}

/// Mean over samples of the head applied to the normalized concatenation of
/// the feature and label maps; a vector with one entry per path.
pub fn joint_embedding_on_tape(
    tape: &mut Tape,
    vars: &HypernetVars,
    features: Var,
    one_hot_labels: Var,
) -> Result<Var> {
    if tape.value(features).rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let fx = tape.affine(features, vars.feature_w, vars.feature_b)?;
    let fx = tape.relu(fx);
    let fy = tape.affine(one_hot_labels, vars.label_w, vars.label_b)?;
    let joint = tape.concat_cols(fx, fy)?;
    let joint = tape.l2_normalize_rows(joint)?;
    let head = tape.affine(joint, vars.head_w, vars.head_b)?;
    tape.mean_rows(head)
}

pub fn routing_probs_on_tape(
    tape: &mut Tape,
    vars: &HypernetVars,
    features: Var,
    one_hot_labels: Var,
) -> Result<Var> {
    let e = joint_embedding_on_tape(tape, vars, features, one_hot_labels)?;
    Ok(tape.sigmoid(e))
}

pub fn joint_embedding(data: &LabeledData, pool: &ModulePool) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut tape = Tape::new();
    let vars = register_hypernet(&mut tape, pool)?;
    let x = tape.input(data.features.clone());
    let y = tape.input(data.one_hot());
    let e = joint_embedding_on_tape(&mut tape, &vars, x, y)?;
    Ok(tape.value(e).data().to_vec())
}

/// Path probabilities, each in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingProbs(pub Vec<f64>);

impl RoutingProbs {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn routing_probs(data: &LabeledData, pool: &ModulePool) -> Result<RoutingProbs> {
    let e = joint_embedding(data, pool)?;
    Ok(RoutingProbs(
        crate::ops::sigmoid(&Tensor::vector(e)).into_data(),
    ))
}

/// Uniform draws `ε ∈ (0, 1)` behind one relaxed decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcreteNoise {
    pub uniforms: Vec<f64>,
}

impl ConcreteNoise {
    pub fn draw<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        ConcreteNoise {
            uniforms: (0..len).map(|_| rng.sample::<f64, _>(Open01)).collect(),
        }
    }

    /// `ln ε - ln(1 - ε)` per entry.
    pub fn logistic(&self) -> Vec<f64> {
        self.uniforms
            .iter()
            .map(|&e| e.ln() - (1.0 - e).ln())
            .collect()
    }
}

/// Relaxed decision `σ((ln ε - ln(1-ε) + ln(π/(1-π))) / τ)` for fixed noise.
pub fn relax(probs: &RoutingProbs, tau: f64, noise: &ConcreteNoise) -> Result<DecisionVector> {
    let mut tape = Tape::new();
    let p = tape.input(Tensor::vector(probs.0.clone()));
    let v = tape.concrete(p, &noise.logistic(), tau)?;
    DecisionVector::relaxed(tape.value(v).data().to_vec())
}

/// Draws fresh noise and returns the relaxed decision with the noise used.
pub fn sample_decision<R: Rng + ?Sized>(
    probs: &RoutingProbs,
    tau: f64,
    rng: &mut R,
) -> Result<(DecisionVector, ConcreteNoise)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let noise = ConcreteNoise::draw(probs.len(), rng);
    Ok((relax(probs, tau, &noise)?, noise))
}

/// Exponential annealing from `start` at round 1 to `end` at round
/// `total_rounds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub total_rounds: usize,
}

impl TemperatureSchedule {
    pub fn new(start: f64, end: f64, total_rounds: usize) -> Result<Self> {
        let s = TemperatureSchedule {
            start,
            end,
            total_rounds,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > 0.0 && self.start.is_finite()) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.end > self.start {
            return Err(Error::Config(
                "final temperature must not exceed the initial one".into(),
            ));
        }
        if self.total_rounds == 0 {
            return Err(Error::Config("schedule needs at least one round".into()));
        }
        Ok(())
    }

    /// `start · (end/start)^((t-1)/(T-1))`; a single-round schedule returns
    /// `end`.
    pub fn at(&self, round: usize) -> Result<f64> {
        let t_max = self.total_rounds;
        if round == 0 || round > t_max {
            return Err(Error::Config(format!(
                "round {round} outside schedule 1..={t_max}"
            )));
        }
        if t_max == 1 || round == t_max {
            return Ok(self.end);
        }
        if round == 1 {
            return Ok(self.start);
        }
        let frac = (round - 1) as f64 / (t_max - 1) as f64;
        Ok(self.start * (self.end / self.start).powf(frac))
    }
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            start: 1.0,
            end: 0.1,
            total_rounds: 150,
        }
    }
}
