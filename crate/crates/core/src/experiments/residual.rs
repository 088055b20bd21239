//! A residual unit whose branch is forced to collapse every sample.

use serde::{Deserialize, Serialize};

use crate::bundle::{measure_probe, BundleConfig, BundleEntropyRecord, Location};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{derive_seed, Matrix};
use crate::nn::{accuracy, Architecture, Block, Network, Residual, TrainConfig};

use super::runner::train_with_measurement;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualProbeConfig {
    pub width: usize,
    /// Replace the collapsed branch by `-r(x)` so that the unit output is
    /// identically zero.
    pub negate: bool,
    pub probe_size: usize,
}

impl Default for ResidualProbeConfig {
    fn default() -> Self {
        Self {
            width: 32,
            negate: false,
            probe_size: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitEntropy {
    /// Entropy of the branch output before the skip path is added.
    pub pre_add: f64,
    /// Entropy of the unit output `r(x) + d`.
    pub post_add: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualProbeResult {
    pub residual: Residual,
    pub negated: bool,
    pub initial: UnitEntropy,
    pub trained: UnitEntropy,
    pub test_accuracy: f64,
}

/// Plain transition layer into `width`, then a single residual unit whose
/// branch is either collapsed (first layer `W = -1, b = 0`) or, with
/// `negate`, the exact negation of the skip map.
pub fn residual_probe_network(
    kind: Residual,
    input_dim: usize,
    num_classes: usize,
    cfg: &ResidualProbeConfig,
    seed: u64,
) -> Result<Network<f32>> {
    let (scale, shift) = match kind {
        Residual::None => return Err(Error::Config("residual probe needs a residual kind".into())),
        Residual::Identity => (1.0, 0.0),
        Residual::Affine { scale, shift } => (scale, shift),
    };
    let arch = Architecture::new(
        input_dim,
        num_classes,
        vec![
            Block::plain("t", 1, cfg.width),
            Block::residual("r", 2, cfg.width, kind),
        ],
    )?;
    let mut net = Network::<f32>::build(&arch, seed)?;
    if cfg.negate {
        let w = cfg.width;
        let first = net.layer_mut(1);
        first.w = Matrix::identity(w);
        first.b = Matrix::zeros(w, 1);
        let second = net.layer_mut(2);
        second.w = Matrix::identity(w).scale(-(scale as f32));
        second.b = Matrix::filled(w, 1, -(shift as f32));
    } else {
        net.set_fully_conflicting(1)?;
    }
    Ok(net)
}

fn unit_entropy(records: &[BundleEntropyRecord]) -> Result<UnitEntropy> {
    let find = |loc: Location| {
        records
            .iter()
            .find(|r| r.location == loc && r.block == "r" && r.offset == 2)
            .map(|r| r.entropy)
            .ok_or_else(|| Error::Internal("residual unit record missing".into()))
    };
    Ok(UnitEntropy {
        pre_add: find(Location::ResidualBranchPreAdd)?,
        post_add: find(Location::LayerOutput)?,
    })
}

/// Measures the unit before and after training, plus final test accuracy.
pub fn residual_probe(
    kind: Residual,
    cfg: &ResidualProbeConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    train: &TrainConfig,
    bundles: &BundleConfig,
) -> Result<ResidualProbeResult> {
    let bundles = BundleConfig {
        probe_size: cfg.probe_size,
        ..bundles.clone()
    };
    let mut net = residual_probe_network(
        kind,
        train_set.dim(),
        train_set.num_classes,
        cfg,
        derive_seed(train.seed, 7),
    )?;
    let probe = super::runner::measurement_probe(train_set, &bundles, train.seed);
    let initial = unit_entropy(&measure_probe(&net, &probe, &bundles, train, 0)?)?;
    let run = train_with_measurement(&mut net, train_set, None, train, &bundles)?;
    let trained = unit_entropy(&run.final_records())?;
    Ok(ResidualProbeResult {
        residual: kind,
        negated: cfg.negate,
        initial,
        trained,
        test_accuracy: accuracy(&net, test_set)?,
    })
}
