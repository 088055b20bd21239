//! Deleting residual units from a trained network.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{measure_probe, BundleConfig, Location};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::{format_float, header, ReportKind, ReportRow};
use crate::math::{derive_seed, RngStream};
use crate::nn::{accuracy, Network, Stage, TrainConfig, UnitId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Conflicting,
    NonConflicting,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Conflicting, Strategy::NonConflicting, Strategy::Random];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Conflicting => "conflicting",
            Strategy::NonConflicting => "non_conflicting",
            Strategy::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LesionConfig {
    /// Deletion counts; empty means half the smaller pool plus the whole
    /// conflicting pool (see [`default_k_values`]).
    pub k_values: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for LesionConfig {
    fn default() -> Self {
        Self {
            k_values: Vec::new(),
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl LesionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("lesion study needs at least one seed".into()));
        }
        Ok(())
    }

    pub fn resolve_k_values(&self, units: &[UnitClass]) -> Vec<usize> {
        if self.k_values.is_empty() {
            default_k_values(units)
        } else {
            self.k_values.clone()
        }
    }
}

/// `[0, half, full]`: half of the smaller of the two pools, so that both
/// strategies can draw it, and the size of the whole conflicting pool.
pub fn default_k_values(units: &[UnitClass]) -> Vec<usize> {
    let conflicting = units.iter().filter(|u| u.conflicting).count();
    let half = conflicting.min(units.len() - conflicting) / 2;
    let mut ks = vec![0, half, conflicting];
    ks.sort_unstable();
    ks.dedup();
    ks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitClass {
    pub unit: UnitId,
    pub branch_entropy: f64,
    pub conflicting: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRow {
    pub strategy: Strategy,
    pub k: usize,
    pub seed: u64,
    /// `None` when `k` exceeds the strategy's pool.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionReport {
    pub baseline: f64,
    pub units: Vec<UnitClass>,
    pub rows: Vec<LesionRow>,
}

impl LesionReport {
    /// Mean accuracy drop from baseline over seeds, if every seed ran.
    pub fn mean_degradation(&self, strategy: Strategy, k: usize) -> Option<f64> {
        let accs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.strategy == strategy && r.k == k)
            .map(|r| r.accuracy)
            .collect::<Option<_>>()?;
        (!accs.is_empty()).then(|| self.baseline - accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn pool(&self, strategy: Strategy) -> Vec<UnitId> {
        pool(&self.units, strategy)
    }
}

/// Units whose branch output, before the skip path is added, has positive
/// bundle entropy on `probe` are conflicting.
pub fn classify_units<T: crate::math::Element>(
    net: &Network<T>,
    probe: &Dataset,
    bundles: &BundleConfig,
    train: &TrainConfig,
) -> Result<Vec<UnitClass>> {
    if net.residual_units().is_empty() {
        return Err(Error::Config("network has no residual units to classify".into()));
    }
    let arch = net.architecture();
    let records = measure_probe(net, probe, bundles, train, 0)?;
    records
        .iter()
        .filter(|r| r.location == Location::ResidualBranchPreAdd)
        .map(|r| {
            let block = arch
                .block_index(&r.block)
                .ok_or_else(|| Error::Internal(format!("record names unknown block {}", r.block)))?;
            Ok(UnitClass {
                unit: UnitId {
                    block,
                    unit: r.offset / 2 - 1,
                },
                branch_entropy: r.entropy,
                conflicting: r.entropy > 0.0,
            })
        })
        .collect()
}

/// Units with an equal-width branch, the only ones that can be deleted.
pub fn lesionable_units<T: crate::math::Element>(net: &Network<T>) -> Vec<UnitId> {
    net.stages()
        .iter()
        .filter_map(|s| match s {
            Stage::Residual {
                block,
                unit,
                first,
                second,
                ..
            } if first.fan_in() == second.fan_out() => Some(UnitId {
                block: *block,
                unit: *unit,
            }),
            _ => None,
        })
        .collect()
}

fn pool(units: &[UnitClass], strategy: Strategy) -> Vec<UnitId> {
    units
        .iter()
        .filter(|u| match strategy {
            Strategy::Conflicting => u.conflicting,
            Strategy::NonConflicting => !u.conflicting,
            Strategy::Random => true,
        })
        .map(|u| u.unit)
        .collect()
}

/// Deletes `units` one after another.
pub fn delete_units<T: crate::math::Element>(net: &Network<T>, units: &[UnitId]) -> Result<Network<T>> {
    let mut out = net.clone();
    for &u in units {
        out = out.delete_unit(u)?;
    }
    Ok(out)
}

/// For each `(strategy, k, seed)` deletes `k` units drawn from the strategy's
/// pool and evaluates on `test_set`. No statistics are recalibrated.
pub fn lesion_study<T: crate::math::Element>(
    net: &Network<T>,
    units: &[UnitClass],
    test_set: &Dataset,
    strategies: &[Strategy],
    k_values: &[usize],
    seeds: &[u64],
) -> Result<LesionReport> {
    let allowed = lesionable_units(net);
    let units: Vec<UnitClass> = units.iter().filter(|u| allowed.contains(&u.unit)).cloned().collect();
    let baseline = accuracy(net, test_set)?;
    let mut cells = Vec::new();
    for &strategy in strategies {
        for &k in k_values {
            for &seed in seeds {
                cells.push((strategy, k, seed));
            }
        }
    }
    let rows = cells
        .par_iter()
        .map(|&(strategy, k, seed)| {
            let mut candidates = pool(&units, strategy);
            if k > candidates.len() {
                return Ok(LesionRow {
                    strategy,
                    k,
                    seed,
                    accuracy: None,
                });
            }
            if k == 0 {
                return Ok(LesionRow {
                    strategy,
                    k,
                    seed,
                    accuracy: Some(baseline),
                });
            }
            let mut rng = RngStream::new(derive_seed(seed, strategy as u64));
            rng.shuffle(&mut candidates);
            let lesioned = delete_units(net, &candidates[..k])?;
            Ok(LesionRow {
                strategy,
                k,
                seed,
                accuracy: Some(accuracy(&lesioned, test_set)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LesionReport { baseline, units, rows })
}

impl ReportRow for LesionRow {
    const KIND: ReportKind = ReportKind::Lesion;

    fn header(_: &[Self]) -> Vec<String> {
        header(&["strategy", "k", "seed", "accuracy"])
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.strategy.name().to_string(),
            self.k.to_string(),
            self.seed.to_string(),
            self.accuracy.map(format_float).unwrap_or_default(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Matrix;
    use crate::nn::{forward, Architecture, Block, Mode, Residual};

    fn data(n: usize, seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x: Vec<f64> = labels
            .iter()
            .flat_map(|&l| (0..4).map(|_| 0.5 * l as f64 + 0.5 * rng.uniform()).collect::<Vec<_>>())
            .collect();
        Dataset::new("d", Matrix::from_vec(n, 4, x).unwrap(), labels, 2).unwrap()
    }

    fn net() -> Network<f32> {
        let arch = Architecture::new(
            4,
            2,
            vec![Block::plain("t", 1, 4), Block::residual("r", 6, 4, Residual::Identity)],
        )
        .unwrap();
        let mut net = Network::build(&arch, 3).unwrap();
        // Unit 0: null branch (W2 = 0, b2 = 0). Unit 1: collapsed branch.
        let l = net.layer_mut(2);
        l.w = Matrix::zeros(4, 4);
        net.set_fully_conflicting(3).unwrap();
        // Unit 2: injective branch.
        net.layer_mut(5).w = Matrix::identity(4);
        net.layer_mut(6).w = Matrix::identity(4);
        net.layer_mut(0).w = Matrix::identity(4);
        net
    }

    #[test]
    fn classification_follows_branch_entropy() {
        let net = net();
        let units = classify_units(&net, &data(40, 1), &BundleConfig::default(), &TrainConfig::default()).unwrap();
        let flags: Vec<bool> = units.iter().map(|u| u.conflicting).collect();
        assert_eq!(flags, vec![true, true, false]);
        assert!((units[1].branch_entropy - 2f64.ln()).abs() < 1e-9);
        let plain = Network::<f32>::build(&Architecture::fc(4, 2, 2, 4).unwrap(), 0).unwrap();
        assert!(matches!(
            classify_units(&plain, &data(10, 1), &BundleConfig::default(), &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn null_branch_deletion_is_exact() {
        let net = net();
        let x = data(30, 2).inputs_as::<f32>();
        let before = forward(&net, &x, Mode::Eval).unwrap();
        let after = forward(
            &delete_units(&net, &[UnitId { block: 1, unit: 0 }]).unwrap(),
            &x,
            Mode::Eval,
        )
        .unwrap();
        assert_eq!(before.logits, after.logits);
        assert_eq!(delete_units(&net, &[]).unwrap(), net);
    }

    #[test]
    fn deletion_commutes() {
        let net = net();
        let u = UnitId { block: 1, unit: 0 };
        let v = UnitId { block: 1, unit: 2 };
        let a = delete_units(&net, &[u, v]).unwrap();
        let b = delete_units(&net, &[v, u]).unwrap();
        assert_eq!(a.stages(), b.stages());
    }

    #[test]
    fn default_k_values_cover_half_and_full_pool() {
        let unit = |i, conflicting| UnitClass {
            unit: UnitId { block: 1, unit: i },
            branch_entropy: 0.0,
            conflicting,
        };
        let units: Vec<_> = (0..16).map(|i| unit(i, i < 5)).collect();
        assert_eq!(default_k_values(&units), vec![0, 2, 5]);
        let none: Vec<_> = (0..4).map(|i| unit(i, false)).collect();
        assert_eq!(default_k_values(&none), vec![0]);
        assert_eq!(
            LesionConfig {
                k_values: vec![3],
                ..LesionConfig::default()
            }
            .resolve_k_values(&units),
            vec![3]
        );
        assert!(LesionConfig {
            seeds: vec![],
            ..LesionConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn study_rows_and_skips() {
        let net = net();
        let units = classify_units(&net, &data(40, 1), &BundleConfig::default(), &TrainConfig::default()).unwrap();
        let test = data(50, 3);
        let report = lesion_study(&net, &units, &test, &Strategy::ALL, &[0, 1, 2], &[1, 2]).unwrap();
        assert_eq!(report.rows.len(), 18);
        for r in &report.rows {
            if r.k == 0 {
                assert_eq!(r.accuracy, Some(report.baseline));
            }
            if r.strategy == Strategy::NonConflicting && r.k == 2 {
                assert_eq!(r.accuracy, None);
            }
        }
        assert_eq!(report.pool(Strategy::Conflicting).len(), 2);
        assert_eq!(report.mean_degradation(Strategy::Random, 0), Some(0.0));
        assert_eq!(report.mean_degradation(Strategy::NonConflicting, 2), None);
        let again = lesion_study(&net, &units, &test, &Strategy::ALL, &[0, 1, 2], &[1, 2]).unwrap();
        assert_eq!(again, report);
        let csv = crate::io::render_report(&report.rows);
        assert!(csv.starts_with("strategy,k,seed,accuracy\nconflicting,0,1,"));
        assert!(csv.contains("non_conflicting,2,1,\n"));
    }
}
