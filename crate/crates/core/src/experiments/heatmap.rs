//! Bundles predicted by the bundling test versus bundles actually produced by
//! binary32 weight updates.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{partition_exact, partition_layer, resolution_threshold, BundlePartition, ResolutionPolicy};
use crate::error::{Error, Result};
use crate::io::{format_float, header, ReportKind, ReportRow};
use crate::math::{derive_seed, FloatFormat, Matrix, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    pub samples: usize,
    pub weights: usize,
    pub lr_grid: Vec<f64>,
    pub batch_grid: Vec<usize>,
    pub seed: u64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            samples: 4096,
            weights: 8,
            lr_grid: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
            batch_grid: vec![1, 16, 64, 256, 1024, 4096],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub lr: f64,
    pub batch_size: usize,
    pub oracle_bundles: usize,
    pub metric_bundles: usize,
    pub exact_eq_bundles: usize,
}

/// Ground-truth bundles: samples whose single-sample updates
/// `W - (lr / batch) * a_i` leave bitwise identical binary32 weights, with
/// rounding after every operation.
pub fn oracle_bundles(a_values: &[f32], weights: &[f32], lr: f64, batch_size: usize) -> Result<BundlePartition> {
    if a_values.len() < 2 || weights.is_empty() {
        return Err(Error::Config("oracle needs at least 2 samples and 1 weight".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let step = (lr / batch_size as f64) as f32;
    Ok(BundlePartition::group_by_key(a_values.iter().map(|&a| {
        let u = step * a;
        weights.iter().map(|&w| (w - u).to_bits()).collect::<Vec<u32>>()
    })))
}

/// `n` distinct binary32 values drawn uniformly from `[0, 1)`.
pub fn distinct_activations(n: usize, rng: &mut RngStream) -> Vec<f32> {
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = rng.uniform() as f32;
        if v < 1.0 && seen.insert(v.to_bits()) {
            out.push(v);
        }
    }
    out
}

pub fn heatmap(cfg: &HeatmapConfig) -> Result<Vec<HeatmapCell>> {
    if cfg.lr_grid.is_empty() || cfg.batch_grid.is_empty() {
        return Err(Error::Config("heatmap grids must be non-empty".into()));
    }
    let mut rng = RngStream::new(derive_seed(cfg.seed, 0));
    let a = distinct_activations(cfg.samples, &mut rng);
    let w: Vec<f32> = (0..cfg.weights).map(|_| rng.uniform_range(0.5, 1.0) as f32).collect();
    let acts = Matrix::from_vec(a.len(), 1, a.clone())?;
    let gamma = resolution_threshold(
        &Matrix::from_vec(1, w.len(), w.clone())?,
        ResolutionPolicy::WeightUlp,
        FloatFormat::Binary32,
    )?;
    let exact = partition_exact(&acts).len();
    let grid: Vec<(f64, usize)> = cfg
        .lr_grid
        .iter()
        .flat_map(|&lr| cfg.batch_grid.iter().map(move |&b| (lr, b)))
        .collect();
    grid.par_iter()
        .map(|&(lr, batch_size)| {
            Ok(HeatmapCell {
                lr,
                batch_size,
                oracle_bundles: oracle_bundles(&a, &w, lr, batch_size)?.len(),
                metric_bundles: partition_layer(&acts, lr, batch_size, gamma).len(),
                exact_eq_bundles: exact,
            })
        })
        .collect()
}

impl ReportRow for HeatmapCell {
    const KIND: ReportKind = ReportKind::Heatmap;

    fn header(_: &[Self]) -> Vec<String> {
        header(&["lr", "batch_size", "oracle", "metric", "exact_eq"])
    }

    fn cells(&self) -> Vec<String> {
        vec![
            format_float(self.lr),
            self.batch_size.to_string(),
            self.oracle_bundles.to_string(),
            self.metric_bundles.to_string(),
            self.exact_eq_bundles.to_string(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_examples() {
        // Unit step: gaps of 2^-10 survive the subtraction.
        let a: Vec<f32> = (0..16).map(|i| i as f32 / 1024.0).collect();
        assert_eq!(oracle_bundles(&a, &[0.75, 0.5], 1.0, 1).unwrap().len(), 16);
        // Step 1e-5 / 4096 = 2.4e-9 times a < 0.5 stays below half an ulp of
        // weights near 1 (2^-25 = 3e-8), so every weight is unchanged.
        let a: Vec<f32> = (0..100).map(|i| i as f32 / 200.0).collect();
        assert_eq!(oracle_bundles(&a, &[0.99, 0.999], 1e-5, 4096).unwrap().len(), 1);
        let dup = [0.3f32, 0.7, 0.3];
        for (lr, b) in [(1.0, 1), (1e-3, 64), (1e-5, 4096)] {
            let p = oracle_bundles(&dup, &[0.6], lr, b).unwrap();
            assert_eq!(p.assignment()[0], p.assignment()[2]);
        }
        assert!(oracle_bundles(&[0.1], &[0.6], 1.0, 1).is_err());
    }

    #[test]
    fn exact_pairs_are_metric_pairs() {
        let a = [0.25f32, 0.5, 0.25, 0.75, 0.5];
        let m = Matrix::from_vec(5, 1, a.to_vec()).unwrap();
        let exact = partition_exact(&m).assignment();
        for (lr, b) in [(1e-1, 1), (1e-5, 4096)] {
            let metric = partition_layer(&m, lr, b, 2f64.powi(-24)).assignment();
            for i in 0..5 {
                for j in 0..5 {
                    if exact[i] == exact[j] {
                        assert_eq!(metric[i], metric[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn small_grid_bounds() {
        let cfg = HeatmapConfig {
            samples: 256,
            lr_grid: vec![1e-1, 1e-5],
            batch_grid: vec![1, 4096],
            ..HeatmapConfig::default()
        };
        let cells = heatmap(&cfg).unwrap();
        assert_eq!(cells.len(), 4);
        for c in &cells {
            assert_eq!(c.exact_eq_bundles, 256);
            assert!((1..=256).contains(&c.oracle_bundles) && (1..=256).contains(&c.metric_bundles));
        }
        assert_eq!(cells[0].oracle_bundles, 256);
        assert_eq!(heatmap(&cfg).unwrap(), cells);
    }
}
