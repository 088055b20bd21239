//! Block-structured architecture descriptions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Skip path of a residual block.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residual {
    /// Plain block: no skip connection.
    #[default]
    None,
    /// `r(x) = x`.
    Identity,
    /// `r(x) = scale * x + shift`, bijective for `scale != 0`.
    Affine { scale: f64, shift: f64 },
}

impl Residual {
    pub fn is_residual(self) -> bool {
        !matches!(self, Residual::None)
    }

    /// Derivative of the skip path (zero for plain blocks).
    pub fn slope(self) -> f64 {
        match self {
            Residual::None => 0.0,
            Residual::Identity => 1.0,
            Residual::Affine { scale, .. } => scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub tag: String,
    #[serde(rename = "layers")]
    pub layer_count: usize,
    pub width: usize,
    #[serde(default)]
    pub residual: Residual,
    #[serde(default)]
    pub batch_norm: bool,
}

impl Block {
    pub fn plain(tag: &str, layer_count: usize, width: usize) -> Self {
        Self {
            tag: tag.to_string(),
            layer_count,
            width,
            residual: Residual::None,
            batch_norm: false,
        }
    }

    pub fn residual(tag: &str, layer_count: usize, width: usize, kind: Residual) -> Self {
        Self {
            tag: tag.to_string(),
            layer_count,
            width,
            residual: kind,
            batch_norm: false,
        }
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = on;
        self
    }

    /// Number of two-layer residual units (zero for plain blocks).
    pub fn units(&self) -> usize {
        if self.residual.is_residual() {
            self.layer_count / 2
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub num_classes: usize,
    pub blocks: Vec<Block>,
}

/// Position of a hidden layer inside the block structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPosition {
    pub block: usize,
    pub tag: String,
    /// 1-based offset within the block.
    pub offset: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, num_classes: usize, blocks: Vec<Block>) -> Result<Self> {
        let arch = Self {
            input_dim,
            num_classes,
            blocks,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Plain fully connected net with `depth` hidden layers of equal width.
    pub fn fc(input_dim: usize, num_classes: usize, depth: usize, width: usize) -> Result<Self> {
        Self::new(input_dim, num_classes, vec![Block::plain("a", depth, width)])
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        let mut width_in = self.input_dim;
        for (i, block) in self.blocks.iter().enumerate() {
            if block.tag.is_empty() || !block.tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::Config(format!(
                    "block tag {:?} must be non-empty ASCII alphanumeric",
                    block.tag
                )));
            }
            if self.blocks[..i].iter().any(|b| b.tag == block.tag) {
                return Err(Error::Config(format!("duplicate block tag {:?}", block.tag)));
            }
            if block.width == 0 {
                return Err(Error::Config(format!("block {} has zero width", block.tag)));
            }
            if let Residual::Affine { scale, shift } = block.residual {
                if scale == 0.0 || !scale.is_finite() || !shift.is_finite() {
                    return Err(Error::Config(format!(
                        "block {}: affine residual needs a finite non-zero scale",
                        block.tag
                    )));
                }
            }
            if block.layer_count == 0 {
                continue;
            }
            if block.residual.is_residual() {
                if block.layer_count % 2 != 0 {
                    return Err(Error::Config(format!(
                        "residual block {} needs an even layer count, got {}",
                        block.tag, block.layer_count
                    )));
                }
                if width_in != block.width {
                    return Err(Error::Config(format!(
                        "residual block {} receives width {width_in} but has width {}; \
                         insert a plain transition block",
                        block.tag, block.width
                    )));
                }
            }
            width_in = block.width;
        }
        Ok(())
    }

    /// Total hidden layer count `L`.
    pub fn hidden_layers(&self) -> usize {
        self.blocks.iter().map(|b| b.layer_count).sum()
    }

    pub fn block_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.layer_count).collect()
    }

    pub fn block_index(&self, tag: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.tag == tag)
    }

    /// Width feeding the output head.
    pub fn final_width(&self) -> usize {
        self.blocks
            .iter()
            .rev()
            .find(|b| b.layer_count > 0)
            .map_or(self.input_dim, |b| b.width)
    }

    /// Maps a 1-based global hidden-layer index to its block and offset.
    pub fn locate(&self, global: usize) -> Option<LayerPosition> {
        if global == 0 {
            return None;
        }
        let mut remaining = global;
        for (i, block) in self.blocks.iter().enumerate() {
            if remaining <= block.layer_count {
                return Some(LayerPosition {
                    block: i,
                    tag: block.tag.clone(),
                    offset: remaining,
                });
            }
            remaining -= block.layer_count;
        }
        None
    }

    /// Shrinks block `tag` to `keep_count` layers (rounded down to even for
    /// residual blocks), leaving every other block untouched.
    pub fn prune(&self, tag: &str, keep_count: usize) -> Result<Self> {
        let index = self
            .block_index(tag)
            .ok_or_else(|| Error::Config(format!("unknown block tag {tag:?}")))?;
        let block = &self.blocks[index];
        if keep_count >= block.layer_count {
            return Err(Error::Config(format!(
                "cannot prune block {tag} from {} to {keep_count} layers",
                block.layer_count
            )));
        }
        let keep = if block.residual.is_residual() {
            keep_count - keep_count % 2
        } else {
            keep_count
        };
        let mut pruned = self.clone();
        pruned.blocks[index].layer_count = keep;
        pruned.validate()?;
        Ok(pruned)
    }
}

/// Free-function form of [`Architecture::prune`].
pub fn prune_architecture(arch: &Architecture, block_tag: &str, keep_count: usize) -> Result<Architecture> {
    arch.prune(block_tag, keep_count)
}
