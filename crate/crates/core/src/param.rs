//! Trainable parameters keyed by block identity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer index reserved for the routing hypernetwork.
pub const HYPERNET_LAYER: usize = 0;
/// Layer index of the encoders; module blocks live in layers `2..=L`.
pub const ENCODER_LAYER: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    /// First (or only) dense weight of a block.
    W1,
    B1,
    /// Output weight of a block with a hidden layer.
    W2,
    B2,
    FeatureW,
    FeatureB,
    LabelW,
    LabelB,
    HeadW,
    HeadB,
}

impl Slot {
    pub fn as_str(self) -> &'static str {
        match self {
            Slot::W1 => "w1",
            Slot::B1 => "b1",
            Slot::W2 => "w2",
            Slot::B2 => "b2",
            Slot::FeatureW => "feature_w",
            Slot::FeatureB => "feature_b",
            Slot::LabelW => "label_w",
            Slot::LabelB => "label_b",
            Slot::HeadW => "head_w",
            Slot::HeadB => "head_b",
        }
    }
}

impl FromStr for Slot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "w1" => Slot::W1,
            "b1" => Slot::B1,
            "w2" => Slot::W2,
            "b2" => Slot::B2,
            "feature_w" => Slot::FeatureW,
            "feature_b" => Slot::FeatureB,
            "label_w" => Slot::LabelW,
            "label_b" => Slot::LabelB,
            "head_w" => Slot::HeadW,
            "head_b" => Slot::HeadB,
            other => return Err(Error::Checkpoint(format!("unknown slot `{other}`"))),
        })
    }
}

/// Stable parameter identity: (layer, block, slot).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub block: usize,
    pub slot: Slot,
}

impl ParamId {
    pub fn new(layer: usize, block: usize, slot: Slot) -> Self {
        ParamId { layer, block, slot }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.layer, self.block, self.slot.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub id: ParamId,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(id: ParamId, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { id, value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub fn check_learning_rate(learning_rate: f64) -> Result<()> {
    if learning_rate > 0.0 && learning_rate.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "learning rate must be positive, got {learning_rate}"
        )))
    }
}

/// `value -= learning_rate * grad` for every parameter. Gradients are left
/// untouched.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    learning_rate: f64,
) -> Result<()> {
    check_learning_rate(learning_rate)?;
    for p in params {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= learning_rate * g;
        }
    }
    Ok(())
}
