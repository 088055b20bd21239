//! Depth/width grid of plain fully connected networks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{first_conflicting_layer, BundleConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::{format_float, header, opt, ReportKind, ReportRow};
use crate::math::derive_seed;
use crate::nn::{Architecture, Network, TrainConfig};

use super::runner::{last_layer_entropy, train_with_measurement};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    /// Test accuracy is averaged over this many final epochs.
    pub accuracy_window: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            depths: vec![5, 15, 25, 50],
            widths: vec![10, 25, 100],
            accuracy_window: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub depth: usize,
    pub width: usize,
    pub test_accuracy: f64,
    /// Bundle entropy of the last hidden layer after the final epoch.
    pub last_entropy: f64,
    pub first_conflicting_layer: Option<usize>,
}

/// Trains one plain network per `(depth, width)` cell. Each cell's seed is
/// derived from the cell itself, so results do not depend on scheduling.
pub fn sweep(
    cfg: &SweepConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    train: &TrainConfig,
    bundles: &BundleConfig,
) -> Result<Vec<SweepRecord>> {
    if cfg.depths.is_empty() || cfg.widths.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()));
    }
    let cells: Vec<(usize, usize)> = cfg
        .depths
        .iter()
        .flat_map(|&d| cfg.widths.iter().map(move |&w| (d, w)))
        .collect();
    let mut out: Vec<SweepRecord> = cells
        .par_iter()
        .map(|&(depth, width)| {
            let seed = derive_seed(derive_seed(train.seed, depth as u64), width as u64);
            let arch = Architecture::fc(train_set.dim(), train_set.num_classes, depth, width)?;
            let mut net = Network::<f32>::build(&arch, seed)?;
            let cell_train = TrainConfig { seed, ..train.clone() };
            let run = train_with_measurement(&mut net, train_set, Some(test_set), &cell_train, bundles)?;
            let records = run.final_records();
            log::info!("sweep cell depth {depth} width {width} done");
            Ok(SweepRecord {
                depth,
                width,
                test_accuracy: run.tail_test_accuracy(cfg.accuracy_window.max(1)).unwrap_or(0.0),
                last_entropy: last_layer_entropy(&records),
                first_conflicting_layer: first_conflicting_layer(&records, &arch).map(|c| c.global),
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by_key(|r| (r.depth, r.width));
    Ok(out)
}

impl ReportRow for SweepRecord {
    const KIND: ReportKind = ReportKind::Sweep;

    fn header(_: &[Self]) -> Vec<String> {
        header(&["depth", "width", "accuracy", "H_L", "first_conflicting_layer"])
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.depth.to_string(),
            self.width.to_string(),
            format_float(self.test_accuracy),
            format_float(self.last_entropy),
            opt(self.first_conflicting_layer),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_generate;

    #[test]
    fn tiny_sweep_is_deterministic_and_sorted() {
        let data = toy_generate(200, 0.5, 1).unwrap();
        let test = toy_generate(100, 0.5, 2).unwrap();
        let cfg = SweepConfig {
            depths: vec![3, 1],
            widths: vec![4, 2],
            accuracy_window: 2,
        };
        let train = TrainConfig {
            learning_rate: 0.05,
            batch_size: 20,
            epochs: 2,
            ..TrainConfig::default()
        };
        let bundles = BundleConfig {
            probe_size: 64,
            ..BundleConfig::default()
        };
        let a = sweep(&cfg, &data, &test, &train, &bundles).unwrap();
        let cells: Vec<_> = a.iter().map(|r| (r.depth, r.width)).collect();
        assert_eq!(cells, vec![(1, 2), (1, 4), (3, 2), (3, 4)]);
        for r in &a {
            assert!(r.last_entropy >= 0.0 && r.last_entropy <= 2f64.ln() + 1e-12);
            assert!((0.0..=1.0).contains(&r.test_accuracy));
        }
        assert_eq!(sweep(&cfg, &data, &test, &train, &bundles).unwrap(), a);
    }

    #[test]
    fn sweep_csv() {
        let r = SweepRecord {
            depth: 5,
            width: 10,
            test_accuracy: 0.9,
            last_entropy: 0.0,
            first_conflicting_layer: None,
        };
        assert_eq!(
            crate::io::render_report(&[r]),
            "depth,width,accuracy,H_L,first_conflicting_layer\n5,10,0.9,0,\n"
        );
    }
}
