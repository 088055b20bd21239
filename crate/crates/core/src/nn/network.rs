//! Instantiated networks: parameters laid out stage by stage.

use crate::error::{Error, Result};
use crate::math::{Element, Matrix, RngStream};

use super::arch::{Architecture, Residual};

/// Batch-normalisation parameters and running statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![T::one(); width],
            beta: vec![T::zero(); width],
            running_mean: vec![T::zero(); width],
            running_var: vec![T::one(); width],
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }
}

/// Dense layer `W x + b` with optional batch normalisation. `w` is stored
/// `out x in`, `b` as an `out x 1` column.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub w: Matrix<T>,
    pub b: Matrix<T>,
    pub bn: Option<BatchNorm<T>>,
}

impl<T: Element> DenseLayer<T> {
    fn he(fan_in: usize, fan_out: usize, batch_norm: bool, rng: &mut RngStream) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::from_f64_rounded(rng.normal() * std))
            .collect();
        Self {
            w: Matrix::from_vec(fan_out, fan_in, data).expect("finite He draw"),
            b: Matrix::zeros(fan_out, 1),
            bn: batch_norm.then(|| BatchNorm::new(fan_out)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.w.rows()
    }

    /// Number of stored scalars (including running statistics).
    pub fn scalar_count(&self) -> usize {
        self.w.len() + self.b.len() + self.bn.as_ref().map_or(0, |bn| 4 * bn.width())
    }
}

/// One step of the hidden stack.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage<T> {
    /// `relu(bn(W x + b))`.
    Plain {
        block: usize,
        offset: usize,
        layer: DenseLayer<T>,
    },
    /// `r(x) + bn(W2 relu(bn(W1 x + b1)) + b2)`.
    Residual {
        block: usize,
        unit: usize,
        kind: Residual,
        first: DenseLayer<T>,
        second: DenseLayer<T>,
    },
    /// A residual unit whose branch was deleted: only `r(x)` remains.
    Bypass { block: usize, unit: usize, kind: Residual },
}

/// Identifies a residual unit by block index and 0-based unit index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct UnitId {
    pub block: usize,
    pub unit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    stages: Vec<Stage<T>>,
    head: DenseLayer<T>,
    seed: u64,
    version: u64,
}

impl<T: Element> Network<T> {
    /// He-initialised network: every weight drawn from `N(0, 2 / fan_in)`,
    /// biases zero, batch-norm at identity with running stats `(0, 1)`.
    pub fn build(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = RngStream::new(seed);
        let mut stages = Vec::new();
        let mut width_in = arch.input_dim;
        for (bi, block) in arch.blocks.iter().enumerate() {
            if block.residual.is_residual() {
                for unit in 0..block.units() {
                    let first = DenseLayer::he(width_in, block.width, block.batch_norm, &mut rng);
                    let second = DenseLayer::he(block.width, block.width, block.batch_norm, &mut rng);
                    stages.push(Stage::Residual {
                        block: bi,
                        unit,
                        kind: block.residual,
                        first,
                        second,
                    });
                }
            } else {
                for offset in 1..=block.layer_count {
                    let layer = DenseLayer::he(width_in, block.width, block.batch_norm, &mut rng);
                    stages.push(Stage::Plain {
                        block: bi,
                        offset,
                        layer,
                    });
                    width_in = block.width;
                }
            }
            if block.layer_count > 0 {
                width_in = block.width;
            }
        }
        let head = DenseLayer::he(width_in, arch.num_classes, false, &mut rng);
        Ok(Self {
            arch: arch.clone(),
            stages,
            head,
            seed,
            version: 0,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn stages(&self) -> &[Stage<T>] {
        &self.stages
    }

    pub fn head(&self) -> &DenseLayer<T> {
        &self.head
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Parameter version, bumped on every mutation. Traces record it so that
    /// backprop through a stale trace is detected.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Hidden dense layers in forward order (head excluded).
    pub fn hidden_layers(&self) -> Vec<&DenseLayer<T>> {
        let mut out = Vec::new();
        for stage in &self.stages {
            match stage {
                Stage::Plain { layer, .. } => out.push(layer),
                Stage::Residual { first, second, .. } => {
                    out.push(first);
                    out.push(second);
                }
                Stage::Bypass { .. } => {}
            }
        }
        out
    }

    /// Hidden layers followed by the head: the canonical parameter order.
    pub fn dense_layers(&self) -> Vec<&DenseLayer<T>> {
        let mut out = self.hidden_layers();
        out.push(&self.head);
        out
    }

    pub(crate) fn dense_layers_mut(&mut self) -> Vec<&mut DenseLayer<T>> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            match stage {
                Stage::Plain { layer, .. } => out.push(layer),
                Stage::Residual { first, second, .. } => {
                    out.push(first);
                    out.push(second);
                }
                Stage::Bypass { .. } => {}
            }
        }
        out.push(&mut self.head);
        out
    }

    /// Mutable access to dense layer `index` in parameter order (the head is
    /// the last index). Bumps the parameter version.
    pub fn layer_mut(&mut self, index: usize) -> &mut DenseLayer<T> {
        self.version += 1;
        self.dense_layers_mut()
            .into_iter()
            .nth(index)
            .expect("dense layer index out of range")
    }

    pub fn head_mut(&mut self) -> &mut DenseLayer<T> {
        self.version += 1;
        &mut self.head
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn hidden_layer_count(&self) -> usize {
        self.hidden_layers().len()
    }

    /// Residual units still carrying a branch.
    pub fn residual_units(&self) -> Vec<UnitId> {
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Residual { block, unit, .. } => Some(UnitId {
                    block: *block,
                    unit: *unit,
                }),
                _ => None,
            })
            .collect()
    }

    /// Units whose branch has been deleted.
    pub fn lesioned_units(&self) -> Vec<UnitId> {
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Bypass { block, unit, .. } => Some(UnitId {
                    block: *block,
                    unit: *unit,
                }),
                _ => None,
            })
            .collect()
    }

    /// Forces hidden layer `index` (0-based, parameter order) to map every
    /// non-negative input to zero: `W = -1`, `b = 0`.
    pub fn set_fully_conflicting(&mut self, index: usize) -> Result<()> {
        if index >= self.hidden_layer_count() {
            return Err(Error::Config(format!(
                "hidden layer {index} does not exist ({} hidden layers)",
                self.hidden_layer_count()
            )));
        }
        let layer = self.layer_mut(index);
        layer.w = Matrix::filled(layer.w.rows(), layer.w.cols(), -T::one());
        layer.b = Matrix::zeros(layer.b.rows(), 1);
        Ok(())
    }

    /// Replaces residual unit `(block, unit)` by its skip path alone. All other
    /// parameters are kept bitwise.
    pub fn delete_unit(&self, id: UnitId) -> Result<Self> {
        let mut out = self.clone();
        let stage = out
            .stages
            .iter_mut()
            .find(|s| match s {
                Stage::Residual { block, unit, .. } | Stage::Bypass { block, unit, .. } => {
                    *block == id.block && *unit == id.unit
                }
                Stage::Plain { .. } => false,
            })
            .ok_or_else(|| Error::Config(format!("block {} has no residual unit {}", id.block, id.unit)))?;
        match stage {
            Stage::Residual {
                block,
                unit,
                kind,
                first,
                second,
            } => {
                if first.fan_in() != second.fan_out() {
                    return Err(Error::Config(format!(
                        "unit {}/{} changes width and cannot be deleted",
                        block, unit
                    )));
                }
                *stage = Stage::Bypass {
                    block: *block,
                    unit: *unit,
                    kind: *kind,
                };
            }
            _ => {
                return Err(Error::Config(format!(
                    "unit {}/{} was already deleted",
                    id.block, id.unit
                )))
            }
        }
        out.version += 1;
        Ok(out)
    }

    /// FNV-1a checksum over every trainable parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        let mut feed = |v: T| {
            h ^= v.bits();
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        };
        for layer in self.dense_layers() {
            layer.w.as_slice().iter().for_each(|&v| feed(v));
            layer.b.as_slice().iter().for_each(|&v| feed(v));
            if let Some(bn) = &layer.bn {
                bn.gamma.iter().chain(&bn.beta).for_each(|&v| feed(v));
            }
        }
        h
    }
}

/// He-initialised network for `arch`.
pub fn build_network<T: Element>(arch: &Architecture, seed: u64) -> Result<Network<T>> {
    Network::build(arch, seed)
}

/// Sets the first hidden layer to `W = -1, b = 0`, so every input in
/// `[0, 1)^d` yields an all-zero first-layer output under ReLU.
pub fn init_fully_conflicting<T: Element>(net: &Network<T>) -> Result<Network<T>> {
    let mut out = net.clone();
    out.set_fully_conflicting(0)?;
    Ok(out)
}

/// Deletes residual unit `unit_index` of block `block_index`.
pub fn delete_block<T: Element>(net: &Network<T>, block_index: usize, unit_index: usize) -> Result<Network<T>> {
    net.delete_unit(UnitId {
        block: block_index,
        unit: unit_index,
    })
}
