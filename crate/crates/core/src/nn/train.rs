//! Mini-batch SGD with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::data::{stratified_batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::math::{derive_seed, Element, FloatFormat};

use super::backward::{apply_update, backward, loss_and_output_grad, Gradients};
use super::forward::{forward, Mode};
use super::network::Network;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(rename = "lr")]
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub stratified: bool,
    pub format: FloatFormat,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 64,
            epochs: 1,
            weight_decay: 0.0,
            seed: 0,
            stratified: true,
            format: FloatFormat::Binary32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub train_accuracy: f64,
    /// Mean over batches of the head-weight gradient L2 norm.
    pub head_grad_norm: f64,
}

/// Forward, backward and update on one batch. Returns the loss and the
/// gradients that were applied.
pub fn train_step<T: Element>(
    net: &mut Network<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<(f64, Gradients<T>, Vec<usize>)> {
    let trace = forward(net, &batch.inputs, Mode::Train)?;
    let (loss, dlogits) = loss_and_output_grad(&trace.logits, &batch.labels)?;
    let grads = backward(net, &trace, &dlogits)?;
    net.absorb_batch_stats(&trace);
    apply_update(net, &grads, cfg)?;
    Ok((loss, grads, trace.predictions()))
}

/// One pass over `data`. The batch order is seeded from `(cfg.seed, epoch)`.
pub fn train_epoch<T: Element>(
    net: &mut Network<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate()?;
    let batches = stratified_batches::<T>(
        data,
        cfg.batch_size,
        derive_seed(cfg.seed, epoch as u64),
        cfg.stratified,
    )?;
    if batches.is_empty() {
        return Err(Error::Config("dataset too small for a single batch".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut grad_norm = 0.0;
    for batch in &batches {
        let (l, grads, preds) = train_step(net, batch, cfg)?;
        loss += l;
        let head = grads.head();
        grad_norm += head
            .dw
            .as_slice()
            .iter()
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        let targets = batch.labels.argmax_rows();
        correct += preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
        seen += preds.len();
    }
    let n = batches.len() as f64;
    Ok(EpochStats {
        mean_loss: loss / n,
        train_accuracy: correct as f64 / seen as f64,
        head_grad_norm: grad_norm / n,
    })
}

/// Eval-mode accuracy on `data`.
pub fn accuracy<T: Element>(net: &Network<T>, data: &Dataset) -> Result<f64> {
    let preds = net.predict(&data.inputs_as::<T>())?;
    let correct = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}
