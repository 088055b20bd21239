//! Per-layer bundle entropy measurement over an activation trace.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{Element, Matrix};
use crate::nn::{forward, ActivationTrace, Architecture, Mode, Network, TrainConfig};

use super::{bundle_entropy, partition_layer, resolution_threshold, ResolutionPolicy, DEFAULT_EPSILON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BundleConfig {
    pub policy: ResolutionPolicy,
    pub probe_size: usize,
    pub epsilon: f64,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            policy: ResolutionPolicy::WeightUlp,
            probe_size: 2048,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl BundleConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.probe_size == 0 {
            return Err(Error::Config("probe_size must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    LayerOutput,
    /// Branch output `d` of a residual unit before the skip path is added.
    ResidualBranchPreAdd,
}

impl Location {
    pub fn name(self) -> &'static str {
        match self {
            Location::LayerOutput => "layer_output",
            Location::ResidualBranchPreAdd => "residual_branch_pre_add",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleEntropyRecord {
    pub epoch: usize,
    /// 1-based global hidden layer index.
    pub layer: usize,
    pub block: String,
    pub offset: usize,
    pub location: Location,
    pub entropy: f64,
    pub bundle_count: usize,
    /// Number of probe samples measured.
    pub batch_size: usize,
}

/// One record per hidden layer output plus one per residual branch.
///
/// `train` supplies the learning rate and training batch size that scale the
/// activation distances; γ comes from each layer's own weights.
pub fn measure<T: Element>(
    trace: &ActivationTrace<T>,
    labels: &[usize],
    net: &Network<T>,
    cfg: &BundleConfig,
    train: &TrainConfig,
    epoch: usize,
) -> Result<Vec<BundleEntropyRecord>> {
    if labels.len() != trace.batch_size() {
        return Err(Error::Shape(format!(
            "trace holds {} samples but {} labels were given",
            trace.batch_size(),
            labels.len()
        )));
    }
    let layers = net.hidden_layers();
    if layers.len() != trace.layers.len() {
        return Err(Error::Shape(format!(
            "trace has {} layers, network {}",
            trace.layers.len(),
            layers.len()
        )));
    }
    let num_classes = net.architecture().num_classes;
    let mut jobs: Vec<(usize, Location, &Matrix<T>)> = Vec::new();
    for (i, lt) in trace.layers.iter().enumerate() {
        jobs.push((i, Location::LayerOutput, &lt.output));
        if let Some(branch) = &lt.branch {
            jobs.push((i, Location::ResidualBranchPreAdd, branch));
        }
    }
    jobs.par_iter()
        .map(|&(i, location, acts)| {
            let gamma = resolution_threshold(&layers[i].w, cfg.policy, T::FORMAT)?;
            let partition = partition_layer(acts, train.learning_rate, train.batch_size, gamma);
            let entropy = bundle_entropy(&partition, labels, num_classes, cfg.epsilon)?;
            let info = &trace.layers[i].info;
            Ok(BundleEntropyRecord {
                epoch,
                layer: info.global,
                block: info.tag.clone(),
                offset: info.offset,
                location,
                entropy,
                bundle_count: partition.len(),
                batch_size: labels.len(),
            })
        })
        .collect()
}

/// Eval-mode forward of `probe` followed by [`measure`].
pub fn measure_probe<T: Element>(
    net: &Network<T>,
    probe: &Dataset,
    cfg: &BundleConfig,
    train: &TrainConfig,
    epoch: usize,
) -> Result<Vec<BundleEntropyRecord>> {
    let trace = forward(net, &probe.inputs_as::<T>(), Mode::Eval)?;
    measure(&trace, &probe.labels, net, cfg, train, epoch)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictLocation {
    pub block_tag: String,
    /// 1-based offset within the block.
    pub offset: usize,
    pub global: usize,
}

/// Lowest layer whose output has positive bundle entropy.
pub fn first_conflicting_layer(records: &[BundleEntropyRecord], arch: &Architecture) -> Option<ConflictLocation> {
    let global = records
        .iter()
        .filter(|r| r.location == Location::LayerOutput && r.entropy > 0.0)
        .map(|r| r.layer)
        .min()?;
    let pos = arch.locate(global)?;
    Some(ConflictLocation {
        block_tag: pos.tag,
        offset: pos.offset,
        global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_fully_conflicting, Block, Residual};
    use approx::assert_abs_diff_eq;

    fn record(layer: usize, entropy: f64) -> BundleEntropyRecord {
        BundleEntropyRecord {
            epoch: 0,
            layer,
            block: String::new(),
            offset: 0,
            location: Location::LayerOutput,
            entropy,
            bundle_count: 1,
            batch_size: 1,
        }
    }

    #[test]
    fn first_conflict_lookup() {
        let arch = Architecture::new(
            4,
            2,
            vec![
                Block::plain("a", 3, 4),
                Block::plain("b", 12, 4),
                Block::plain("c", 2, 4),
            ],
        )
        .unwrap();
        let zeros: Vec<_> = (1..=17).map(|l| record(l, 0.0)).collect();
        assert_eq!(first_conflicting_layer(&zeros, &arch), None);
        let four = Architecture::fc(4, 2, 4, 4).unwrap();
        let hs: Vec<_> = [0.0, 0.0, 0.3, 0.1]
            .iter()
            .enumerate()
            .map(|(i, &h)| record(i + 1, h))
            .collect();
        assert_eq!(first_conflicting_layer(&hs, &four).unwrap().global, 3);
        let mut at8 = zeros.clone();
        at8[7].entropy = 0.5;
        at8[10].entropy = 0.7;
        let hit = first_conflicting_layer(&at8, &arch).unwrap();
        assert_eq!((hit.block_tag.as_str(), hit.offset, hit.global), ("b", 5, 8));
    }

    fn balanced_probe(n: usize, dim: usize, classes: usize) -> Dataset {
        let mut rng = crate::math::RngStream::new(11);
        let data: Vec<f64> = (0..n * dim).map(|_| rng.uniform()).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        Dataset::new("probe", Matrix::from_vec(n, dim, data).unwrap(), labels, classes).unwrap()
    }

    #[test]
    fn fully_conflicting_net_has_maximal_entropy_everywhere() {
        let arch = Architecture::fc(6, 10, 3, 5).unwrap();
        let net = init_fully_conflicting(&crate::nn::build_network::<f32>(&arch, 2).unwrap()).unwrap();
        let probe = balanced_probe(200, 6, 10);
        let recs = measure_probe(&net, &probe, &BundleConfig::default(), &TrainConfig::default(), 0).unwrap();
        assert_eq!(recs.len(), 3);
        for r in &recs {
            assert_abs_diff_eq!(r.entropy, 10f64.ln(), epsilon = 1e-6);
            assert_eq!(r.bundle_count, 1);
        }
    }

    #[test]
    fn residual_records_include_branch() {
        let arch = Architecture::new(
            4,
            2,
            vec![Block::plain("t", 1, 4), Block::residual("r", 2, 4, Residual::Identity)],
        )
        .unwrap();
        let mut net = crate::nn::build_network::<f32>(&arch, 5).unwrap();
        // Injective transition, and a branch whose first layer maps
        // everything to zero so that d is constant.
        net.layer_mut(0).w = Matrix::identity(4);
        net.set_fully_conflicting(1).unwrap();
        let mut rng = crate::math::RngStream::new(1);
        let data: Vec<f64> = (0..64 * 4).map(|_| rng.uniform()).collect();
        let labels = (0..64).map(|i| i % 2).collect();
        let probe = Dataset::new("p", Matrix::from_vec(64, 4, data).unwrap(), labels, 2).unwrap();
        let recs = measure_probe(&net, &probe, &BundleConfig::default(), &TrainConfig::default(), 3).unwrap();
        let pre: Vec<_> = recs
            .iter()
            .filter(|r| r.location == Location::ResidualBranchPreAdd)
            .collect();
        assert_eq!(pre.len(), 1);
        assert_abs_diff_eq!(pre[0].entropy, 2f64.ln(), epsilon = 1e-9);
        assert_eq!(pre[0].epoch, 3);
        let post = recs
            .iter()
            .find(|r| r.location == Location::LayerOutput && r.layer == 3)
            .unwrap();
        assert_eq!((post.block.as_str(), post.offset), ("r", 2));
        assert_eq!(post.entropy, 0.0);
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        let arch = Architecture::fc(2, 2, 1, 2).unwrap();
        let net = crate::nn::build_network::<f32>(&arch, 0).unwrap();
        let x = Matrix::from_vec(3, 2, vec![0.1; 6]).unwrap();
        let trace = forward(&net, &x, Mode::Eval).unwrap();
        let r = measure(
            &trace,
            &[0, 1],
            &net,
            &BundleConfig::default(),
            &TrainConfig::default(),
            0,
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
