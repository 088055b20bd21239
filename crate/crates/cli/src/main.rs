//! `bundlescope`: run conflicting-bundle experiments from a JSON config.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data, format or
//! I/O error, 3 internal error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use bundlescope_core::Error;
use clap::{Args, Parser, Subcommand};

use config::{DatasetName, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "bundlescope",
    version,
    about = "Detect and remove conflicting training bundles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Jobs {
    /// Worker threads for independent grid cells.
    #[arg(long, env = "BUNDLESCOPE_THREADS")]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One run of the 1-D toy problem.
    Toy {
        #[command(flatten)]
        common: Common,
        /// Start from the fully conflicting initialisation.
        #[arg(long)]
        conflict: bool,
        /// Balanced classes instead of the 2:1 split.
        #[arg(long)]
        balanced: bool,
    },
    /// Depth x width grid of plain networks.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        jobs: Jobs,
    },
    /// Train the configured architecture and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Bundle entropy of every layer of a checkpoint.
    Measure {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        dataset: Option<DatasetName>,
    },
    /// Prune the configured architecture until no layer conflicts.
    CbaTune {
        #[command(flatten)]
        common: Common,
    },
    /// Delete residual units of a trained checkpoint by strategy.
    Lesion {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        jobs: Jobs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Bundling test against brute-force binary32 updates.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        jobs: Jobs,
    },
    /// A collapsed branch behind identity and affine skip paths.
    ResidualProbe {
        #[command(flatten)]
        common: Common,
        /// Make the branch cancel the skip path.
        #[arg(long)]
        negate: bool,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Toy { common, .. }
            | Command::Sweep { common, .. }
            | Command::Train { common }
            | Command::Measure { common, .. }
            | Command::CbaTune { common }
            | Command::Lesion { common, .. }
            | Command::Heatmap { common, .. }
            | Command::ResidualProbe { common, .. } => common,
        }
    }

    /// Thread count: grid commands honour `--jobs`, everything else runs on
    /// one thread.
    fn threads(&self) -> usize {
        match self {
            Command::Sweep { jobs, .. } | Command::Lesion { jobs, .. } | Command::Heatmap { jobs, .. } => {
                jobs.jobs.unwrap_or(1).max(1)
            }
            _ => 1,
        }
    }
}

fn resolve(cmd: &Command) -> bundlescope_core::Result<RunConfig> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.toy.params.seed = seed;
        cfg.heatmap.seed = seed;
    }
    if let Some(epochs) = common.epochs {
        cfg.train.epochs = epochs;
        cfg.toy.params.epochs = epochs;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    match cmd {
        Command::Toy { conflict, balanced, .. } => {
            cfg.toy.conflict |= conflict;
            cfg.toy.balanced |= balanced;
        }
        Command::Measure {
            dataset: Some(name), ..
        } => cfg.dataset.name = *name,
        Command::ResidualProbe { negate, .. } => cfg.residual_probe.negate |= negate,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: &Command) -> bundlescope_core::Result<()> {
    let cfg = resolve(cmd)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cmd.threads())
        .build_global()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    commands::echo_config(&cfg)?;
    match cmd {
        Command::Toy { .. } => commands::toy(&cfg),
        Command::Sweep { .. } => commands::sweep_cmd(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::Measure { checkpoint, .. } => commands::measure(&cfg, checkpoint),
        Command::CbaTune { .. } => commands::cba(&cfg),
        Command::Lesion { checkpoint, .. } => commands::lesion(&cfg, checkpoint),
        Command::Heatmap { .. } => commands::heatmap_cmd(&cfg),
        Command::ResidualProbe { .. } => commands::residual(&cfg).map(|_| ()),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Data(_) | Error::Format { .. } | Error::Version { .. } | Error::Io { .. } => 2,
        Error::Shape(_) | Error::Domain(_) | Error::State(_) | Error::Internal(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bundlescope: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
