//! Training loop with per-epoch bundle measurement.

use serde::{Deserialize, Serialize};

use crate::bundle::{measure_probe, BundleConfig, BundleEntropyRecord, Location};
use crate::data::Dataset;
use crate::error::Result;
use crate::math::{derive_seed, Element};
use crate::nn::{accuracy, train_epoch, EpochStats, Network, TrainConfig};

/// Seed stream index used to draw the fixed measurement probe.
const PROBE_STREAM: u64 = 0x5052_4f42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    /// Entropy of the last hidden layer output (`H^L`); zero for networks
    /// without hidden layers.
    pub last_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub epochs: Vec<EpochSummary>,
    /// Records of every measured epoch, in epoch order.
    pub records: Vec<BundleEntropyRecord>,
}

impl TrainingRun {
    pub fn final_records(&self) -> Vec<BundleEntropyRecord> {
        let last = self.epochs.last().map_or(0, |e| e.epoch);
        self.records.iter().filter(|r| r.epoch == last).cloned().collect()
    }

    /// Mean test accuracy over the last `window` epochs.
    pub fn tail_test_accuracy(&self, window: usize) -> Option<f64> {
        let tail: Vec<f64> = self
            .epochs
            .iter()
            .rev()
            .take(window)
            .filter_map(|e| e.test_accuracy)
            .collect();
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// The fixed probe drawn from `data` for a run seeded with `seed`.
pub fn measurement_probe(data: &Dataset, cfg: &BundleConfig, seed: u64) -> Dataset {
    data.probe(cfg.probe_size.min(data.len()), derive_seed(seed, PROBE_STREAM))
}

pub fn last_layer_entropy(records: &[BundleEntropyRecord]) -> f64 {
    records
        .iter()
        .filter(|r| r.location == Location::LayerOutput)
        .max_by_key(|r| r.layer)
        .map_or(0.0, |r| r.entropy)
}

/// Trains for `train.epochs` epochs, measuring bundle entropy on a fixed
/// probe after each epoch (Eval mode).
pub fn train_with_measurement<T: Element>(
    net: &mut Network<T>,
    data: &Dataset,
    test: Option<&Dataset>,
    train: &TrainConfig,
    bundles: &BundleConfig,
) -> Result<TrainingRun> {
    train.validate()?;
    bundles.validate()?;
    let probe = measurement_probe(data, bundles, train.seed);
    let mut run = TrainingRun {
        epochs: Vec::with_capacity(train.epochs),
        records: Vec::new(),
    };
    for epoch in 1..=train.epochs {
        let EpochStats {
            mean_loss,
            train_accuracy,
            ..
        } = train_epoch(net, data, train, epoch)?;
        let records = measure_probe(net, &probe, bundles, train, epoch)?;
        let test_accuracy = test.map(|t| accuracy(net, t)).transpose()?;
        log::debug!("epoch {epoch}: loss {mean_loss:.4} train acc {train_accuracy:.4} test acc {test_accuracy:?}");
        run.epochs.push(EpochSummary {
            epoch,
            mean_loss,
            train_accuracy,
            test_accuracy,
            last_entropy: last_layer_entropy(&records),
        });
        run.records.extend(records);
    }
    Ok(run)
}
