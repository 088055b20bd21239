//! Controlled two-class runs with hand-set weights.

use serde::{Deserialize, Serialize};

use crate::data::{toy_generate, Dataset};
use crate::error::Result;
use crate::io::{format_float, ReportKind, ReportRow};
use crate::math::{derive_seed, Matrix};
use crate::nn::{forward, train_epoch, Architecture, Mode, Network, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub samples: usize,
    /// Sample count of the imbalanced variant (divisible by 3 for an exact
    /// 2:1 split).
    pub imbalanced_samples: usize,
    pub imbalanced_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Bias of the second hidden layer in the conflicting network; makes the
    /// collapsed activation a non-zero constant.
    pub conflict_bias: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            imbalanced_samples: 999,
            imbalanced_fraction: 2.0 / 3.0,
            epochs: 50,
            lr: 0.1,
            batch_size: 64,
            seed: 0,
            conflict_bias: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEpoch {
    pub epoch: usize,
    /// Mean over the epoch's batches of the head-weight gradient L2 norm.
    pub grad_norm: f64,
    pub train_accuracy: f64,
    /// Mean softmax output per class over the training set.
    pub mean_output: Vec<f64>,
    /// Standard deviation of the outputs over the training set, averaged over
    /// output neurons.
    pub std_output: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrace {
    pub conflict: bool,
    pub balanced: bool,
    pub epochs: Vec<ToyEpoch>,
}

impl ToyTrace {
    pub fn last(&self) -> &ToyEpoch {
        self.epochs.last().expect("at least one epoch")
    }
}

/// Two hidden layers of width 2 on `x` in `[0, 1)`.
///
/// Without conflict the first layer computes `(x, 1 - x)` and the second is
/// the identity, so the classes stay separable. With conflict the first
/// layer maps every sample to zero and the second emits its bias only.
pub fn toy_network(conflict: bool, cfg: &ToyConfig) -> Result<Network<f32>> {
    let arch = Architecture::fc(1, 2, 2, 2)?;
    let mut net = Network::<f32>::build(&arch, derive_seed(cfg.seed, 1))?;
    if conflict {
        net.set_fully_conflicting(0)?;
        let l2 = net.layer_mut(1);
        l2.w = Matrix::identity(2);
        l2.b = Matrix::filled(2, 1, cfg.conflict_bias as f32);
    } else {
        let l1 = net.layer_mut(0);
        l1.w = Matrix::from_vec(2, 1, vec![1.0, -1.0])?;
        l1.b = Matrix::from_vec(2, 1, vec![0.0, 1.0])?;
        let l2 = net.layer_mut(1);
        l2.w = Matrix::identity(2);
        l2.b = Matrix::zeros(2, 1);
    }
    Ok(net)
}

pub fn toy_dataset(balanced: bool, cfg: &ToyConfig) -> Result<Dataset> {
    if balanced {
        toy_generate(cfg.samples, 0.5, derive_seed(cfg.seed, 2))
    } else {
        toy_generate(
            cfg.imbalanced_samples,
            cfg.imbalanced_fraction,
            derive_seed(cfg.seed, 2),
        )
    }
}

/// Trains the toy network and records per-epoch output statistics.
///
/// Balanced runs use class-stratified batches; imbalanced runs shuffle
/// uniformly so that batch label frequencies follow the dataset prior.
pub fn run_toy(conflict: bool, balanced: bool, cfg: &ToyConfig) -> Result<ToyTrace> {
    let data = toy_dataset(balanced, cfg)?;
    let mut net = toy_network(conflict, cfg)?;
    let train = TrainConfig {
        learning_rate: cfg.lr,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        seed: derive_seed(cfg.seed, 3),
        stratified: balanced,
        ..TrainConfig::default()
    };
    let inputs = data.inputs_as::<f32>();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let stats = train_epoch(&mut net, &data, &train, epoch)?;
        let trace = forward(&net, &inputs, Mode::Eval)?;
        let probs = trace.probs.to_f64();
        let n = probs.rows() as f64;
        let mean_output: Vec<f64> = probs.column_sums().into_iter().map(|s| s / n).collect();
        let mut std_output = 0.0;
        for (c, &m) in mean_output.iter().enumerate() {
            let var = (0..probs.rows()).map(|r| (probs[(r, c)] - m).powi(2)).sum::<f64>() / n;
            std_output += var.sqrt();
        }
        std_output /= mean_output.len() as f64;
        let preds = trace.predictions();
        let correct = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
        epochs.push(ToyEpoch {
            epoch,
            grad_norm: stats.head_grad_norm,
            train_accuracy: correct as f64 / data.len() as f64,
            mean_output,
            std_output,
        });
    }
    Ok(ToyTrace {
        conflict,
        balanced,
        epochs,
    })
}

impl ReportRow for ToyEpoch {
    const KIND: ReportKind = ReportKind::Toy;

    fn header(rows: &[Self]) -> Vec<String> {
        let classes = rows.first().map_or(2, |r| r.mean_output.len());
        let mut h: Vec<String> = ["epoch", "grad_norm", "accuracy"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((0..classes).map(|c| format!("mean_out_{c}")));
        h.push("std_out".into());
        h
    }

    fn cells(&self) -> Vec<String> {
        let mut c = vec![
            self.epoch.to_string(),
            format_float(self.grad_norm),
            format_float(self.train_accuracy),
        ];
        c.extend(self.mean_output.iter().map(|&m| format_float(m)));
        c.push(format_float(self.std_output));
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_invariants_and_gradient_scale() {
        let cfg = ToyConfig {
            epochs: 3,
            ..ToyConfig::default()
        };
        let clean = run_toy(false, true, &cfg).unwrap();
        let conflict = run_toy(true, true, &cfg).unwrap();
        for t in [&clean, &conflict] {
            assert_eq!(t.epochs.len(), 3);
            for e in &t.epochs {
                assert!((0.0..=1.0).contains(&e.train_accuracy));
                assert!((e.mean_output.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                assert!(e.mean_output.iter().all(|m| (0.0..=1.0).contains(m)));
            }
        }
        // Both start with gradients of the same order of magnitude.
        let ratio = clean.epochs[0].grad_norm / conflict.epochs[0].grad_norm;
        assert!((0.1..=10.0).contains(&ratio), "ratio {ratio}");
        // A collapsed first layer yields identical outputs for every sample.
        assert_eq!(conflict.last().std_output, 0.0);
    }

    #[test]
    fn toy_csv_header() {
        assert_eq!(
            crate::io::render_report::<ToyEpoch>(&[]),
            "epoch,grad_norm,accuracy,mean_out_0,mean_out_1,std_out\n"
        );
    }
}
