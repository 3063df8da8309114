//! Architecture bookkeeping for the modular network: layer widths, path and
//! block counts, the canonical layout of decision vectors, connection
//! matrices, and active-block masks.
//!
//! Layers are numbered from 1: layer 1 holds the encoders, layers `2..=L`
//! hold module blocks. A decision vector stores the gates of each
//! layer pair `(l-1, l)` in order, source-major within the pair, followed by
//! the `n_L` gates from the last-layer blocks to the output.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Slot;

/// Layer widths `[n_1, ..., n_L]`, written `n_1xn_2x...xn_L`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerWidths(pub Vec<usize>);

impl FromStr for LayerWidths {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let widths = s
            .split(['x', 'X', '×'])
            .map(|part| {
                part.trim().parse::<usize>().map_err(|_| {
                    Error::Config(format!("bad architecture `{s}`: `{part}` is not a width"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "architecture `{s}` needs at least two layers"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!(
                "architecture `{s}` has an empty layer"
            )));
        }
        Ok(LayerWidths(widths))
    }
}

impl fmt::Display for LayerWidths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join("x"))
    }
}

/// Identity of a module block (layers `2..=L`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub layer: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub layer_widths: Vec<usize>,
    pub input_dim: usize,
    pub encoder_out_dim: usize,
    /// Width of the hidden layer inside each block; `None` makes every
    /// block a single dense layer.
    pub block_hidden_dim: Option<usize>,
    /// Output width of blocks in layers `2..L`; last-layer blocks emit
    /// `num_classes` logits.
    pub block_out_dim: usize,
    pub num_classes: usize,
}

impl ArchitectureSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        input_dim: usize,
        encoder_out_dim: usize,
        block_hidden_dim: Option<usize>,
        block_out_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let spec = ArchitectureSpec {
            layer_widths,
            input_dim,
            encoder_out_dim,
            block_hidden_dim,
            block_out_dim,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.layer_widths.len() < 2 {
            problems.push("architecture needs at least two layers".to_string());
        }
        if self.layer_widths.contains(&0) {
            problems.push("every layer needs at least one block".to_string());
        }
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("encoder_out_dim", self.encoder_out_dim),
            ("block_out_dim", self.block_out_dim),
            ("block_hidden_dim", self.block_hidden_dim.unwrap_or(1)),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.num_classes < 2 {
            problems.push("num_classes must be at least 2".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    /// `L`.
    pub fn num_layers(&self) -> usize {
        self.layer_widths.len()
    }

    /// `n_l` for a 1-based layer index.
    pub fn width(&self, layer: usize) -> usize {
        self.layer_widths[layer - 1]
    }

    pub fn num_encoders(&self) -> usize {
        self.layer_widths[0]
    }

    /// Number of gates in a decision vector: `Σ_{j<L} n_j n_{j+1} + n_L`.
    pub fn path_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1])
            .sum::<usize>()
            + self.width(self.num_layers())
    }

    /// Number of module blocks outside the encoder layer: `n_2 + ... + n_L`.
    pub fn block_count(&self) -> usize {
        self.layer_widths[1..].iter().sum()
    }

    /// Offset of the gates feeding `layer` (2..=L) in a decision vector.
    pub fn pair_offset(&self, layer: usize) -> usize {
        debug_assert!(layer >= 2 && layer <= self.num_layers());
        (2..layer).map(|l| self.width(l - 1) * self.width(l)).sum()
    }

    /// Offset of the output gates in a decision vector.
    pub fn output_offset(&self) -> usize {
        self.path_count() - self.width(self.num_layers())
    }

    /// Gate index of the path from block `source` in `layer - 1` to block
    /// `target` in `layer`.
    pub fn gate_index(&self, layer: usize, target: usize, source: usize) -> usize {
        self.pair_offset(layer) + source * self.width(layer) + target
    }

    /// Position of a block in an [`ActiveMask`].
    pub fn block_position(&self, block: BlockId) -> usize {
        (2..block.layer).map(|l| self.width(l)).sum::<usize>() + block.index
    }

    /// All module blocks, layer by layer.
    pub fn blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        (2..=self.num_layers()).flat_map(move |layer| {
            (0..self.width(layer)).map(move |index| BlockId { layer, index })
        })
    }

    pub fn is_last_layer(&self, layer: usize) -> bool {
        layer == self.num_layers()
    }

    pub fn block_input_dim(&self, layer: usize) -> usize {
        if layer == 2 {
            self.encoder_out_dim
        } else {
            self.block_out_dim
        }
    }

    pub fn block_output_dim(&self, layer: usize) -> usize {
        if self.is_last_layer(layer) {
            self.num_classes
        } else {
            self.block_out_dim
        }
    }

    pub fn encoder_shapes(&self) -> Vec<(Slot, Vec<usize>)> {
        vec![
            (Slot::W1, vec![self.input_dim, self.encoder_out_dim]),
            (Slot::B1, vec![self.encoder_out_dim]),
        ]
    }

    pub fn block_shapes(&self, layer: usize) -> Vec<(Slot, Vec<usize>)> {
        let (din, dout) = (self.block_input_dim(layer), self.block_output_dim(layer));
        match self.block_hidden_dim {
            Some(h) => vec![
                (Slot::W1, vec![din, h]),
                (Slot::B1, vec![h]),
                (Slot::W2, vec![h, dout]),
                (Slot::B2, vec![dout]),
            ],
            None => vec![(Slot::W1, vec![din, dout]), (Slot::B1, vec![dout])],
        }
    }

    pub fn encoder_param_count(&self) -> usize {
        shape_count(&self.encoder_shapes())
    }

    pub fn block_param_count(&self, layer: usize) -> usize {
        shape_count(&self.block_shapes(layer))
    }

    /// Encoders plus every module block.
    pub fn model_param_count(&self) -> usize {
        self.num_encoders() * self.encoder_param_count()
            + self
                .blocks()
                .map(|b| self.block_param_count(b.layer))
                .sum::<usize>()
    }

    pub fn widths(&self) -> LayerWidths {
        LayerWidths(self.layer_widths.clone())
    }
}

pub(crate) fn shape_count(shapes: &[(Slot, Vec<usize>)]) -> usize {
    shapes
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Widths of the routing hypernetwork's feature and label maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypernetSpec {
    pub feature_dim: usize,
    pub label_dim: usize,
}

impl Default for HypernetSpec {
    fn default() -> Self {
        HypernetSpec {
            feature_dim: 32,
            label_dim: 32,
        }
    }
}

impl HypernetSpec {
    pub fn shapes(&self, arch: &ArchitectureSpec) -> Vec<(Slot, Vec<usize>)> {
        let e = arch.path_count();
        vec![
            (Slot::FeatureW, vec![arch.input_dim, self.feature_dim]),
            (Slot::FeatureB, vec![self.feature_dim]),
            (Slot::LabelW, vec![arch.num_classes, self.label_dim]),
            (Slot::LabelB, vec![self.label_dim]),
            (Slot::HeadW, vec![self.feature_dim + self.label_dim, e]),
            (Slot::HeadB, vec![e]),
        ]
    }

    pub fn param_count(&self, arch: &ArchitectureSpec) -> usize {
        shape_count(&self.shapes(arch))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    Relaxed,
    Hard,
}

/// Path gates, one per possible connection.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVector {
    values: Vec<f64>,
    mode: GateMode,
}

impl DecisionVector {
    pub fn hard(bits: &[bool]) -> Self {
        DecisionVector {
            values: bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            mode: GateMode::Hard,
        }
    }

    pub fn ones(len: usize) -> Self {
        DecisionVector {
            values: vec![1.0; len],
            mode: GateMode::Hard,
        }
    }

    pub fn relaxed(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("gate value {v} outside [0, 1]")));
        }
        Ok(DecisionVector {
            values,
            mode: GateMode::Relaxed,
        })
    }

    /// Parses a `0`/`1` bitstring.
    pub fn from_bitstring(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::Data(format!("bad decision bitstring `{s}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DecisionVector::hard(&bits))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Entry `i` becomes 1 iff its value is strictly above 0.5.
    pub fn harden(&self) -> DecisionVector {
        DecisionVector {
            values: self
                .values
                .iter()
                .map(|&v| if v > 0.5 { 1.0 } else { 0.0 })
                .collect(),
            mode: GateMode::Hard,
        }
    }

    pub fn bits(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v > 0.5).collect()
    }

    pub fn bitstring(&self) -> String {
        self.bits()
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }

    pub fn check_len(&self, spec: &ArchitectureSpec) -> Result<()> {
        if self.len() != spec.path_count() {
            return Err(Error::DecisionLength {
                expected: spec.path_count(),
                got: self.len(),
            });
        }
        Ok(())
    }

    /// Copy of a hard decision with every gate leaving an inactive block
    /// closed, so inactive blocks cannot reach the output.
    pub fn pruned(&self, spec: &ArchitectureSpec) -> Result<DecisionVector> {
        self.check_len(spec)?;
        let mask = active_mask(self, spec)?;
        let mut values = self.values.clone();
        for layer in 3..=spec.num_layers() {
            for source in 0..spec.width(layer - 1) {
                let src = BlockId {
                    layer: layer - 1,
                    index: source,
                };
                if !mask.is_active(spec, src) {
                    for target in 0..spec.width(layer) {
                        values[spec.gate_index(layer, target, source)] = 0.0;
                    }
                }
            }
        }
        let last = spec.num_layers();
        for j in 0..spec.width(last) {
            if !mask.is_active(
                spec,
                BlockId {
                    layer: last,
                    index: j,
                },
            ) {
                values[spec.output_offset() + j] = 0.0;
            }
        }
        Ok(DecisionVector {
            values,
            mode: self.mode,
        })
    }
}

/// Per-layer-pair gate matrices `C` of shape `n_l x n_{l-1}` plus the output
/// gates; a reshaping of a [`DecisionVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionMatrix {
    /// `pairs[l - 2][target][source]` for layers `l = 2..=L`.
    pub pairs: Vec<Vec<Vec<f64>>>,
    pub output: Vec<f64>,
}

impl ConnectionMatrix {
    pub fn from_decision(spec: &ArchitectureSpec, decision: &DecisionVector) -> Result<Self> {
        decision.check_len(spec)?;
        let v = decision.values();
        let pairs = (2..=spec.num_layers())
            .map(|layer| {
                (0..spec.width(layer))
                    .map(|j| {
                        (0..spec.width(layer - 1))
                            .map(|k| v[spec.gate_index(layer, j, k)])
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let output = v[spec.output_offset()..].to_vec();
        Ok(ConnectionMatrix { pairs, output })
    }

    /// Incoming gates of block `target` in `layer`.
    pub fn incoming(&self, layer: usize, target: usize) -> &[f64] {
        &self.pairs[layer - 2][target]
    }

    pub fn entry_count(&self) -> usize {
        self.pairs
            .iter()
            .flat_map(|m| m.iter().map(Vec::len))
            .sum::<usize>()
            + self.output.len()
    }

    /// Inverse of [`ConnectionMatrix::from_decision`] (values only).
    pub fn to_values(&self, spec: &ArchitectureSpec) -> Vec<f64> {
        let mut v = vec![0.0; spec.path_count()];
        for layer in 2..=spec.num_layers() {
            for (j, row) in self.pairs[layer - 2].iter().enumerate() {
                for (k, &g) in row.iter().enumerate() {
                    v[spec.gate_index(layer, j, k)] = g;
                }
            }
        }
        v[spec.output_offset()..].copy_from_slice(&self.output);
        v
    }
}

/// Which module blocks (layers `2..=L`) a client uses, in
/// [`ArchitectureSpec::blocks`] order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveMask(pub Vec<bool>);

impl ActiveMask {
    pub fn all(spec: &ArchitectureSpec) -> Self {
        ActiveMask(vec![true; spec.block_count()])
    }

    pub fn none(spec: &ArchitectureSpec) -> Self {
        ActiveMask(vec![false; spec.block_count()])
    }

    pub fn is_active(&self, spec: &ArchitectureSpec, block: BlockId) -> bool {
        self.0[spec.block_position(block)]
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&a| a).count()
    }

    pub fn is_all_active(&self) -> bool {
        self.0.iter().all(|&a| a)
    }

    pub fn bitstring(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// A block in layer 2 is active iff some incoming gate is open; a block in a
/// later layer is active iff some open gate reaches it from an active block.
/// Entries are read as open when strictly above 0.5.
pub fn active_mask(decision: &DecisionVector, spec: &ArchitectureSpec) -> Result<ActiveMask> {
    decision.check_len(spec)?;
    let open = decision.bits();
    let mut mask = Vec::with_capacity(spec.block_count());
    let mut upstream = vec![true; spec.num_encoders()];
    for layer in 2..=spec.num_layers() {
        let current: Vec<bool> = (0..spec.width(layer))
            .map(|j| {
                upstream
                    .iter()
                    .enumerate()
                    .any(|(k, &alive)| alive && open[spec.gate_index(layer, j, k)])
            })
            .collect();
        mask.extend_from_slice(&current);
        upstream = current;
    }
    Ok(ActiveMask(mask))
}
