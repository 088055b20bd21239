//! Depth tuning by pruning at the first conflicting layer.
//!
//! Train one epoch, measure bundle entropy on a fixed probe, and if any layer
//! output is conflicting cut its block back to the layers before it, then
//! restart from freshly drawn weights. Stops once `target_epochs`
//! consecutive epochs pass without a conflict.

use serde::{Deserialize, Serialize};

use crate::bundle::{first_conflicting_layer, measure_probe, BundleConfig, BundleEntropyRecord, Location};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::experiments::measurement_probe;
use crate::io::{header, opt, ReportKind, ReportRow};
use crate::math::derive_seed;
use crate::nn::{train_epoch, Architecture, Network, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbaConfig {
    /// Conflict-free epochs required before the search ends.
    pub target_epochs: usize,
    /// Measure after every `measure_every`-th epoch (and always after the
    /// last one).
    pub measure_every: usize,
}

impl Default for CbaConfig {
    fn default() -> Self {
        Self {
            target_epochs: 20,
            measure_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionStep {
    pub step: usize,
    /// Epoch of the current restart at which this row was recorded.
    pub epoch_reached: usize,
    pub block_tags: Vec<String>,
    pub block_counts: Vec<usize>,
    pub pruned_block: Option<String>,
    pub keep_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionLog {
    /// Start row, one row per prune, and a final conflict-free row.
    pub steps: Vec<EvolutionStep>,
    pub final_architecture: Architecture,
    pub total_epochs: usize,
    /// Measurement after the last epoch of the final run.
    pub final_records: Vec<BundleEntropyRecord>,
    /// Parameter checksum of each freshly initialised network, one per run.
    pub restart_checksums: Vec<u64>,
}

impl EvolutionLog {
    pub fn prune_count(&self) -> usize {
        self.steps.iter().filter(|s| s.pruned_block.is_some()).count()
    }
}

fn row(step: usize, epoch: usize, arch: &Architecture, pruned: Option<(String, usize)>) -> EvolutionStep {
    EvolutionStep {
        step,
        epoch_reached: epoch,
        block_tags: arch.blocks.iter().map(|b| b.tag.clone()).collect(),
        block_counts: arch.block_counts(),
        keep_count: pruned.as_ref().map(|p| p.1),
        pruned_block: pruned.map(|p| p.0),
    }
}

pub fn cba_tune(
    initial: &Architecture,
    data: &Dataset,
    cfg: &CbaConfig,
    train: &TrainConfig,
    bundles: &BundleConfig,
) -> Result<(Network<f32>, EvolutionLog)> {
    initial.validate()?;
    train.validate()?;
    bundles.validate()?;
    if cfg.target_epochs == 0 || cfg.measure_every == 0 {
        return Err(Error::Config("target_epochs and measure_every must be positive".into()));
    }
    let probe = measurement_probe(data, bundles, train.seed);
    let mut arch = initial.clone();
    let mut prune_step = 0u64;
    let mut steps = vec![row(0, 0, &arch, None)];
    let mut total_epochs = 0;
    let mut restart_checksums = Vec::new();
    'restart: loop {
        let seed = derive_seed(train.seed, prune_step);
        let run_cfg = TrainConfig { seed, ..train.clone() };
        let mut net = Network::<f32>::build(&arch, seed)?;
        restart_checksums.push(net.checksum());
        let mut last_records = Vec::new();
        for epoch in 1..=cfg.target_epochs {
            train_epoch(&mut net, data, &run_cfg, epoch)?;
            total_epochs += 1;
            if epoch % cfg.measure_every != 0 && epoch != cfg.target_epochs {
                continue;
            }
            let records = measure_probe(&net, &probe, bundles, &run_cfg, epoch)?;
            let conflicting = records
                .iter()
                .any(|r| r.location == Location::LayerOutput && r.entropy > 0.0);
            if !conflicting {
                last_records = records;
                continue;
            }
            let hit = first_conflicting_layer(&records, &arch).ok_or_else(|| {
                Error::Config("conflict in non-prunable layer: no block holds the conflicting layer".into())
            })?;
            if arch.blocks[arch.block_index(&hit.block_tag).expect("located tag")].layer_count == 0 {
                return Err(Error::Internal(format!(
                    "conflict reported in empty block {}",
                    hit.block_tag
                )));
            }
            let before = arch.hidden_layers();
            let pruned = arch.prune(&hit.block_tag, hit.offset - 1).map_err(|_| {
                Error::Config(format!(
                    "conflict in non-prunable layer {} (block {}, offset {})",
                    hit.global, hit.block_tag, hit.offset
                ))
            })?;
            if pruned.hidden_layers() >= before {
                return Err(Error::Internal("pruning did not remove a layer".into()));
            }
            prune_step += 1;
            let keep = pruned.blocks[pruned.block_index(&hit.block_tag).expect("tag kept")].layer_count;
            log::info!(
                "epoch {epoch}: first conflicting layer {} ({}:{}), block {} -> {keep} layers",
                hit.global,
                hit.block_tag,
                hit.offset,
                hit.block_tag,
            );
            arch = pruned;
            steps.push(row(prune_step as usize, epoch, &arch, Some((hit.block_tag, keep))));
            continue 'restart;
        }
        steps.push(row(prune_step as usize + 1, cfg.target_epochs, &arch, None));
        let log = EvolutionLog {
            steps,
            final_architecture: arch,
            total_epochs,
            final_records: last_records,
            restart_checksums,
        };
        return Ok((net, log));
    }
}

impl ReportRow for EvolutionStep {
    const KIND: ReportKind = ReportKind::Evolution;

    fn header(rows: &[Self]) -> Vec<String> {
        let mut h = header(&["step", "epoch_reached"]);
        if let Some(first) = rows.first() {
            h.extend(first.block_tags.iter().map(|t| format!("block_{t}")));
        }
        h.extend(header(&["pruned_block", "keep_count"]));
        h
    }

    fn cells(&self) -> Vec<String> {
        let mut c = vec![self.step.to_string(), self.epoch_reached.to_string()];
        c.extend(self.block_counts.iter().map(|n| n.to_string()));
        c.push(self.pruned_block.clone().unwrap_or_default());
        c.push(opt(self.keep_count));
        c
    }
}
