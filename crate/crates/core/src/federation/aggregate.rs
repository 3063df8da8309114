use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::arch::ActiveMask;
use crate::error::{Error, Result};
use crate::param::ParamId;
use crate::pool::{ModulePool, Unit};
use crate::tensor::Tensor;

/// What a client sends back after its local update.
#[derive(Debug, Clone, PartialEq)]
pub struct UploadPayload {
    pub client: usize,
    pub samples: usize,
    pub mask: ActiveMask,
    /// Encoders, active blocks and, when shared, the hypernetwork.
    pub params: BTreeMap<ParamId, Tensor>,
}

impl UploadPayload {
    /// Scalars actually carried by the payload.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn has_unit(&self, pool: &ModulePool, unit: Unit) -> bool {
        pool.unit_ids(unit)
            .iter()
            .all(|id| self.params.contains_key(id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Weighted mean over the clients active on each block.
    #[default]
    Renormalized,
    /// `Σ_m w_m a_i θ_i` without dividing by the participating weight.
    Literal,
}

/// Block-wise weighted aggregation with weights `w_m = |D_m| / Σ |D|` over
/// the payloads received. Units no payload touches keep their previous
/// value. Payloads are summed in client order, so the result does not depend
/// on the order they arrive in.
pub fn aggregate(
    payloads: &[UploadPayload],
    previous: &ModulePool,
    mode: AggregationMode,
) -> Result<ModulePool> {
    if payloads.is_empty() {
        return Err(Error::Data("aggregation needs at least one payload".into()));
    }
    let total: usize = payloads.iter().map(|p| p.samples).sum();
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut ordered: Vec<&UploadPayload> = payloads.iter().collect();
    ordered.sort_by_key(|p| p.client);

    let spec = previous.spec();
    let mut next = previous.clone();
    for unit in previous.units() {
        let contributors: Vec<(&UploadPayload, f64)> = ordered
            .iter()
            .filter(|p| match unit {
                Unit::Block(b) => p.mask.is_active(spec, b),
                Unit::Encoder(_) => true,
                Unit::Hypernet => p.has_unit(previous, unit),
            })
            .map(|p| (*p, p.samples as f64 / total as f64))
            .collect();
        if contributors.is_empty() {
            continue;
        }
        let weight_sum: f64 = contributors.iter().map(|(_, w)| w).sum();
        for id in previous.unit_ids(unit) {
            let expected = previous.param(id)?.value.shape().to_vec();
            let mut acc = Tensor::zeros(&expected);
            for (p, w) in &contributors {
                let v = p.params.get(&id).ok_or(Error::MissingParam(id))?;
                if v.shape() != expected.as_slice() {
                    return Err(Error::ParamShape {
                        id,
                        expected,
                        got: v.shape().to_vec(),
                    });
                }
                for (a, &x) in acc.data_mut().iter_mut().zip(v.data()) {
                    *a += w * x;
                }
            }
            if mode == AggregationMode::Renormalized {
                acc.data_mut().iter_mut().for_each(|a| *a /= weight_sum);
            }
            next.set_value(id, acc)?;
        }
    }
    next.version = previous.version + 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchitectureSpec, BlockId};
    use crate::param::Slot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // encoders and blocks are 1x1 affine maps, so each unit has two scalars
    fn tiny() -> ModulePool {
        let spec = ArchitectureSpec::new(vec![1, 2], 1, 1, None, 1, 2).unwrap();
        ModulePool::init(spec, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn filled(
        pool: &ModulePool,
        value: f64,
        mask: &ActiveMask,
        client: usize,
        samples: usize,
    ) -> UploadPayload {
        let spec = pool.spec();
        let mut params = BTreeMap::new();
        for unit in pool.units() {
            if let Unit::Block(b) = unit {
                if !mask.is_active(spec, b) {
                    continue;
                }
            }
            for id in pool.unit_ids(unit) {
                let shape = pool.param(id).unwrap().value.shape().to_vec();
                params.insert(id, Tensor::filled(&shape, value));
            }
        }
        UploadPayload {
            client,
            samples,
            mask: mask.clone(),
            params,
        }
    }

    fn block_w(pool: &ModulePool, index: usize) -> f64 {
        pool.value(2, index, Slot::W1).unwrap().data()[0]
    }

    #[test]
    fn equal_weights_average() {
        let pool = tiny();
        let all = ActiveMask::all(pool.spec());
        let out = aggregate(
            &[
                filled(&pool, 1.0, &all, 0, 5),
                filled(&pool, 3.0, &all, 1, 5),
            ],
            &pool,
            AggregationMode::Renormalized,
        )
        .unwrap();
        assert_eq!(block_w(&out, 0), 2.0);
        assert_eq!(out.version, 1);
    }

    #[test]
    fn sample_weighted_average() {
        let pool = tiny();
        let all = ActiveMask::all(pool.spec());
        let out = aggregate(
            &[
                filled(&pool, 1.0, &all, 0, 1),
                filled(&pool, 3.0, &all, 1, 3),
            ],
            &pool,
            AggregationMode::Renormalized,
        )
        .unwrap();
        assert_eq!(block_w(&out, 1), 2.5);
    }

    #[test]
    fn partial_masks() {
        let pool = tiny();
        let spec = pool.spec().clone();
        let all = ActiveMask::all(&spec);
        // client 0 active on block 0 only; nobody on block 1
        let mut only0 = ActiveMask::none(&spec);
        only0.0[spec.block_position(BlockId { layer: 2, index: 0 })] = true;
        let out = aggregate(
            &[
                filled(&pool, 1.0, &only0, 0, 1),
                filled(&pool, 3.0, &ActiveMask::none(&spec), 1, 1),
            ],
            &pool,
            AggregationMode::Renormalized,
        )
        .unwrap();
        assert_eq!(block_w(&out, 0), 1.0);
        assert_eq!(block_w(&out, 1), block_w(&pool, 1));
        // encoders average over everyone
        assert_eq!(out.value(1, 0, Slot::W1).unwrap().data()[0], 2.0);

        let literal = aggregate(
            &[
                filled(&pool, 1.0, &only0, 0, 1),
                filled(&pool, 3.0, &all, 1, 1),
            ],
            &pool,
            AggregationMode::Literal,
        )
        .unwrap();
        assert_eq!(block_w(&literal, 0), 0.5 * 1.0 + 0.5 * 3.0);
        assert_eq!(block_w(&literal, 1), 0.5 * 3.0);
    }

    #[test]
    fn order_does_not_matter() {
        let pool = tiny();
        let all = ActiveMask::all(pool.spec());
        let a = filled(&pool, 0.1, &all, 0, 3);
        let b = filled(&pool, 0.7, &all, 1, 5);
        let c = filled(&pool, -0.3, &all, 2, 11);
        let x = aggregate(
            &[a.clone(), b.clone(), c.clone()],
            &pool,
            AggregationMode::Renormalized,
        )
        .unwrap();
        let y = aggregate(&[c, a, b], &pool, AggregationMode::Renormalized).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let pool = tiny();
        let all = ActiveMask::all(pool.spec());
        let mut p = filled(&pool, 1.0, &all, 0, 1);
        let id = ParamId::new(2, 1, Slot::W1);
        p.params.insert(id, Tensor::zeros(&[3, 1]));
        match aggregate(&[p], &pool, AggregationMode::Renormalized) {
            Err(Error::ParamShape { id: got, .. }) => assert_eq!(got, id),
            other => panic!("unexpected {other:?}"),
        }
    }
}
