//! The module pool: every encoder, block, and hypernetwork parameter, keyed
//! by identity.

use std::collections::BTreeMap;

use rand::Rng;

use crate::arch::{ArchitectureSpec, BlockId, HypernetSpec};
use crate::error::{Error, Result};
use crate::param::{self, ParamId, Parameter, Slot, ENCODER_LAYER, HYPERNET_LAYER};
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;

/// A group of parameters that is transmitted and aggregated as one piece.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Unit {
    Encoder(usize),
    Block(BlockId),
    Hypernet,
}

impl Unit {
    pub fn layer_and_index(self) -> (usize, usize) {
        match self {
            Unit::Encoder(j) => (ENCODER_LAYER, j),
            Unit::Block(b) => (b.layer, b.index),
            Unit::Hypernet => (HYPERNET_LAYER, 0),
        }
    }

    pub fn of(id: ParamId) -> Unit {
        match id.layer {
            HYPERNET_LAYER => Unit::Hypernet,
            ENCODER_LAYER => Unit::Encoder(id.block),
            layer => Unit::Block(BlockId {
                layer,
                index: id.block,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModulePool {
    spec: ArchitectureSpec,
    hypernet: Option<HypernetSpec>,
    params: BTreeMap<ParamId, Parameter>,
    /// Number of completed aggregation rounds.
    pub version: u64,
}

impl ModulePool {
    /// Uniform `±1/sqrt(fan_in)` initialization for every dense layer,
    /// drawn unit by unit in canonical order.
    pub fn init<R: Rng + ?Sized>(
        spec: ArchitectureSpec,
        hypernet: Option<HypernetSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut pool = ModulePool {
            spec,
            hypernet,
            params: BTreeMap::new(),
            version: 0,
        };
        for unit in pool.units() {
            let shapes = pool.unit_shapes(unit);
            // fan-in of each bias comes from the weight that precedes it
            let mut fan_in = 1;
            for (slot, shape) in shapes {
                if shape.len() == 2 {
                    fan_in = shape[0];
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                let (layer, block) = unit.layer_and_index();
                let id = ParamId::new(layer, block, slot);
                pool.params
                    .insert(id, Parameter::new(id, Tensor::new(shape, data)?));
            }
        }
        Ok(pool)
    }

    /// Builds a pool from explicit values; every expected parameter must be
    /// present with the expected shape.
    pub fn from_values(
        spec: ArchitectureSpec,
        hypernet: Option<HypernetSpec>,
        values: BTreeMap<ParamId, Tensor>,
    ) -> Result<Self> {
        let mut pool = ModulePool {
            spec,
            hypernet,
            params: BTreeMap::new(),
            version: 0,
        };
        let mut values = values;
        for unit in pool.units() {
            let (layer, block) = unit.layer_and_index();
            for (slot, shape) in pool.unit_shapes(unit) {
                let id = ParamId::new(layer, block, slot);
                let v = values.remove(&id).ok_or(Error::MissingParam(id))?;
                if v.shape() != shape.as_slice() {
                    return Err(Error::ParamShape {
                        id,
                        expected: shape,
                        got: v.shape().to_vec(),
                    });
                }
                pool.params.insert(id, Parameter::new(id, v));
            }
        }
        if let Some(extra) = values.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(pool)
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn hypernet(&self) -> Option<&HypernetSpec> {
        self.hypernet.as_ref()
    }

    /// Encoders, then blocks layer by layer, then the hypernetwork.
    pub fn units(&self) -> Vec<Unit> {
        let mut units: Vec<Unit> = (0..self.spec.num_encoders()).map(Unit::Encoder).collect();
        units.extend(self.spec.blocks().map(Unit::Block));
        if self.hypernet.is_some() {
            units.push(Unit::Hypernet);
        }
        units
    }

    pub fn unit_shapes(&self, unit: Unit) -> Vec<(Slot, Vec<usize>)> {
        match unit {
            Unit::Encoder(_) => self.spec.encoder_shapes(),
            Unit::Block(b) => self.spec.block_shapes(b.layer),
            Unit::Hypernet => self
                .hypernet
                .map(|h| h.shapes(&self.spec))
                .unwrap_or_default(),
        }
    }

    pub fn unit_ids(&self, unit: Unit) -> Vec<ParamId> {
        let (layer, block) = unit.layer_and_index();
        self.unit_shapes(unit)
            .into_iter()
            .map(|(slot, _)| ParamId::new(layer, block, slot))
            .collect()
    }

    pub fn unit_param_count(&self, unit: Unit) -> usize {
        self.unit_ids(unit)
            .iter()
            .map(|id| self.params[id].len())
            .sum()
    }

    pub fn param(&self, id: ParamId) -> Result<&Parameter> {
        self.params.get(&id).ok_or(Error::MissingParam(id))
    }

    pub fn param_mut(&mut self, id: ParamId) -> Result<&mut Parameter> {
        self.params.get_mut(&id).ok_or(Error::MissingParam(id))
    }

    pub fn value(&self, layer: usize, block: usize, slot: Slot) -> Result<&Tensor> {
        self.param(ParamId::new(layer, block, slot))
            .map(|p| &p.value)
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Parameter::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Parameter::zero_grad);
    }

    /// Adds the gradients of every parameter leaf recorded on `tape`.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (id, g) in tape.param_grads(grads) {
            let p = self.param_mut(id)?;
            if p.grad.shape() != g.shape() {
                return Err(Error::ParamShape {
                    id,
                    expected: p.grad.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            p.grad.add_assign(g);
        }
        Ok(())
    }

    pub fn sgd_step(&mut self, learning_rate: f64) -> Result<()> {
        param::sgd_step(self.params.values_mut(), learning_rate)
    }

    /// SGD restricted to the parameters of the selected units.
    pub fn sgd_step_where(
        &mut self,
        learning_rate: f64,
        mut keep: impl FnMut(Unit) -> bool,
    ) -> Result<()> {
        param::sgd_step(
            self.params.values_mut().filter(|p| keep(Unit::of(p.id))),
            learning_rate,
        )
    }

    /// Overwrites the parameters of `unit` with the values held by `source`.
    pub fn copy_unit_from(&mut self, source: &ModulePool, unit: Unit) -> Result<()> {
        for id in self.unit_ids(unit) {
            let v = source.param(id)?.value.clone();
            let p = self.param_mut(id)?;
            if p.value.shape() != v.shape() {
                return Err(Error::ParamShape {
                    id,
                    expected: p.value.shape().to_vec(),
                    got: v.shape().to_vec(),
                });
            }
            p.value = v;
        }
        Ok(())
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = self.param_mut(id)?;
        if p.value.shape() != value.shape() {
            return Err(Error::ParamShape {
                id,
                expected: p.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// All values concatenated in identity order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .values()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }
}
