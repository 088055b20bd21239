//! One function per subcommand. Each writes its reports under `output_dir`,
//! which [`echo_config`] creates first.

use std::path::{Path, PathBuf};

use bundlescope_core::bundle::measure_probe;
use bundlescope_core::cba::cba_tune;
use bundlescope_core::data::Dataset;
use bundlescope_core::experiments::{
    heatmap, measurement_probe, residual_probe, run_toy, sweep, train_with_measurement, EpochSummary,
    ResidualProbeConfig, ResidualProbeResult,
};
use bundlescope_core::io::{
    load_checkpoint, read_checkpoint_meta, save_checkpoint_with, write_report, AnyNetwork, ReportRow,
};
use bundlescope_core::lesion::{classify_units, lesion_study, Strategy, UnitClass};
use bundlescope_core::math::{Element, FloatFormat};
use bundlescope_core::nn::{accuracy, Architecture, Network, Residual, TrainConfig};
use bundlescope_core::{Error, Result};
use serde::Serialize;

use crate::config::{check_compatible, RunConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.cbnd";

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn report<R: ReportRow>(cfg: &RunConfig, rows: &[R]) -> Result<()> {
    let path = out_path(cfg, R::KIND.file_name());
    write_report(rows, &path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_json<S: Serialize>(cfg: &RunConfig, name: &str, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(format!("encoding {name}: {e}")))?;
    text.push('\n');
    write_file(&out_path(cfg, name), text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}

/// Writes the fully-resolved configuration beside the outputs.
pub fn echo_config(cfg: &RunConfig) -> Result<()> {
    write_file(&out_path(cfg, CONFIG_FILE), cfg.resolved_json().as_bytes())
}

pub fn toy(cfg: &RunConfig) -> Result<()> {
    let trace = run_toy(cfg.toy.conflict, cfg.toy.balanced, &cfg.toy.params)?;
    let last = trace.last();
    log::info!(
        "toy conflict={} balanced={}: accuracy {:.3}, mean outputs {:?}",
        trace.conflict,
        trace.balanced,
        last.train_accuracy,
        last.mean_output
    );
    report(cfg, &trace.epochs)
}

pub fn sweep_cmd(cfg: &RunConfig) -> Result<()> {
    let (train_set, test_set) = cfg.load_datasets()?;
    let rows = sweep(&cfg.sweep, &train_set, &test_set, &cfg.train, &cfg.bundles)?;
    report(cfg, &rows)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    epochs: &'a [EpochSummary],
    checkpoint: &'a Path,
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let (train_set, test_set) = cfg.load_datasets()?;
    check_compatible(&cfg.architecture, &train_set)?;
    match cfg.train.format {
        FloatFormat::Binary32 => train_as::<f32>(cfg, &train_set, &test_set),
        FloatFormat::Binary64 => train_as::<f64>(cfg, &train_set, &test_set),
    }
}

fn train_as<T: Element>(cfg: &RunConfig, train_set: &Dataset, test_set: &Dataset) -> Result<()> {
    let mut net = Network::<T>::build(&cfg.architecture, cfg.train.seed)?;
    let run = train_with_measurement(&mut net, train_set, Some(test_set), &cfg.train, &cfg.bundles)?;
    if let Some(last) = run.epochs.last() {
        log::info!(
            "epoch {}: test accuracy {:.4}, H_L {:.4}",
            last.epoch,
            last.test_accuracy.unwrap_or(f64::NAN),
            last.last_entropy
        );
    }
    let ckpt = out_path(cfg, CHECKPOINT_FILE);
    save_checkpoint_with(&net, Some(&cfg.train), cfg.train.epochs, &ckpt)?;
    report(cfg, &run.records)?;
    write_json(
        cfg,
        "summary.json",
        &TrainSummary {
            epochs: &run.epochs,
            checkpoint: Path::new(CHECKPOINT_FILE),
        },
    )
}

/// The training set a checkpoint is analysed against.
fn analysis_set(cfg: &RunConfig, arch: &Architecture) -> Result<Dataset> {
    let data = cfg.load_train_set()?;
    check_compatible(arch, &data)?;
    Ok(data)
}

/// The training configuration stored in the checkpoint, if any; its learning
/// rate and batch size scale the bundling test.
fn checkpoint_train(cfg: &RunConfig, path: &Path) -> Result<TrainConfig> {
    let meta = read_checkpoint_meta(path)?;
    Ok(meta.train.unwrap_or_else(|| cfg.train.clone()))
}

pub fn measure(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let net = load_checkpoint(checkpoint)?;
    let train = checkpoint_train(cfg, checkpoint)?;
    let data = analysis_set(cfg, net.architecture())?;
    let probe = measurement_probe(&data, &cfg.bundles, train.seed);
    let records = match &net {
        AnyNetwork::F32(n) => measure_probe(n, &probe, &cfg.bundles, &train, 0)?,
        AnyNetwork::F64(n) => measure_probe(n, &probe, &cfg.bundles, &train, 0)?,
    };
    report(cfg, &records)
}

#[derive(Serialize)]
struct CbaSummary<'a> {
    final_architecture: &'a Architecture,
    prune_count: usize,
    total_epochs: usize,
    test_accuracy: f64,
}

pub fn cba(cfg: &RunConfig) -> Result<()> {
    let (train_set, test_set) = cfg.load_datasets()?;
    check_compatible(&cfg.architecture, &train_set)?;
    let (net, log) = cba_tune(&cfg.architecture, &train_set, &cfg.cba, &cfg.train, &cfg.bundles)?;
    let test_accuracy = accuracy(&net, &test_set)?;
    log::info!(
        "{} prune steps; final blocks {:?}; test accuracy {test_accuracy:.4}",
        log.prune_count(),
        log.final_architecture.block_counts()
    );
    report(cfg, &log.steps)?;
    report(cfg, &log.final_records)?;
    save_checkpoint_with(
        &net,
        Some(&cfg.train),
        cfg.cba.target_epochs,
        &out_path(cfg, CHECKPOINT_FILE),
    )?;
    write_json(
        cfg,
        "summary.json",
        &CbaSummary {
            final_architecture: &log.final_architecture,
            prune_count: log.prune_count(),
            total_epochs: log.total_epochs,
            test_accuracy,
        },
    )
}

#[derive(Serialize)]
struct LesionSummary<'a> {
    baseline: f64,
    units: &'a [UnitClass],
    k_values: &'a [usize],
}

pub fn lesion(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    match load_checkpoint(checkpoint)? {
        AnyNetwork::F32(n) => lesion_as(cfg, checkpoint, &n),
        AnyNetwork::F64(n) => lesion_as(cfg, checkpoint, &n),
    }
}

fn lesion_as<T: Element>(cfg: &RunConfig, checkpoint: &Path, net: &Network<T>) -> Result<()> {
    let train = checkpoint_train(cfg, checkpoint)?;
    let data = analysis_set(cfg, net.architecture())?;
    let test_set = cfg.load_test_set()?;
    let probe = measurement_probe(&data, &cfg.bundles, train.seed);
    let units = classify_units(net, &probe, &cfg.bundles, &train)?;
    let k_values = cfg.lesion.resolve_k_values(&units);
    let study = lesion_study(net, &units, &test_set, &Strategy::ALL, &k_values, &cfg.lesion.seeds)?;
    for strategy in Strategy::ALL {
        for &k in &k_values {
            if let Some(d) = study.mean_degradation(strategy, k) {
                log::info!("{} k={k}: mean degradation {d:.4}", strategy.name());
            }
        }
    }
    report(cfg, &study.rows)?;
    write_json(
        cfg,
        "units.json",
        &LesionSummary {
            baseline: study.baseline,
            units: &study.units,
            k_values: &k_values,
        },
    )
}

pub fn heatmap_cmd(cfg: &RunConfig) -> Result<()> {
    let cells = heatmap(&cfg.heatmap)?;
    let agree = cells.iter().filter(|c| c.metric_bundles == c.oracle_bundles).count();
    log::info!("metric matches oracle in {agree}/{} cells", cells.len());
    report(cfg, &cells)
}

pub fn residual(cfg: &RunConfig) -> Result<Vec<ResidualProbeResult>> {
    let (train_set, test_set) = cfg.load_datasets()?;
    let probe_cfg: &ResidualProbeConfig = &cfg.residual_probe;
    let kinds = [Residual::Identity, Residual::Affine { scale: 2.0, shift: 0.1 }];
    let results = kinds
        .iter()
        .map(|&kind| residual_probe(kind, probe_cfg, &train_set, &test_set, &cfg.train, &cfg.bundles))
        .collect::<Result<Vec<_>>>()?;
    write_json(cfg, "residual_probe.json", &results)?;
    Ok(results)
}
