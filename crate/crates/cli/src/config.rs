//! Run configuration: one JSON document, strict keys, defaults filled in.

use std::path::{Path, PathBuf};

use bundlescope_core::bundle::BundleConfig;
use bundlescope_core::cba::CbaConfig;
use bundlescope_core::data::{mnist_load, toy_generate, Dataset};
use bundlescope_core::experiments::{HeatmapConfig, ResidualProbeConfig, SweepConfig, ToyConfig};
use bundlescope_core::lesion::LesionConfig;
use bundlescope_core::math::derive_seed;
use bundlescope_core::nn::{Architecture, TrainConfig};
use bundlescope_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub bundles: BundleConfig,
    pub output_dir: PathBuf,
    pub toy: ToySection,
    pub sweep: SweepConfig,
    pub cba: CbaConfig,
    pub lesion: LesionConfig,
    pub heatmap: HeatmapConfig,
    pub residual_probe: ResidualProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            architecture: Architecture::fc(784, 10, 5, 25).expect("valid default architecture"),
            train: TrainConfig::default(),
            bundles: BundleConfig::default(),
            output_dir: PathBuf::from("runs/latest"),
            toy: ToySection::default(),
            sweep: SweepConfig::default(),
            cba: CbaConfig::default(),
            lesion: LesionConfig::default(),
            heatmap: HeatmapConfig::default(),
            residual_probe: ResidualProbeConfig::default(),
        }
    }
}

/// Which toy run to perform, and its settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub conflict: bool,
    pub balanced: bool,
    pub params: ToyConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    /// The balanced 1-D two-class problem.
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetName,
    pub paths: DatasetPaths,
    /// Keep only the first `limit` training samples.
    pub limit: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: DatasetName::Mnist,
            paths: DatasetPaths::default(),
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl Default for DatasetPaths {
    fn default() -> Self {
        let dir = Path::new("data/mnist-subset");
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }
}

/// Toy datasets hold this many samples unless `limit` says otherwise.
const TOY_SAMPLES: usize = 1000;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        self.train.validate()?;
        self.bundles.validate()?;
        self.lesion.validate()?;
        if self.dataset.limit == Some(0) {
            return Err(Error::Config("dataset limit must be positive".into()));
        }
        Ok(())
    }

    /// Pretty JSON with every default spelled out.
    pub fn resolved_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn load_train_set(&self) -> Result<Dataset> {
        match self.dataset.name {
            DatasetName::Mnist => {
                let p = &self.dataset.paths;
                mnist_load(&p.train_images, &p.train_labels, self.dataset.limit)
            }
            DatasetName::Toy => toy_generate(self.toy_samples(), 0.5, derive_seed(self.train.seed, 1)),
        }
    }

    pub fn load_test_set(&self) -> Result<Dataset> {
        match self.dataset.name {
            DatasetName::Mnist => {
                let p = &self.dataset.paths;
                mnist_load(&p.test_images, &p.test_labels, None)
            }
            DatasetName::Toy => toy_generate(self.toy_samples(), 0.5, derive_seed(self.train.seed, 2)),
        }
    }

    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        Ok((self.load_train_set()?, self.load_test_set()?))
    }

    fn toy_samples(&self) -> usize {
        self.dataset.limit.unwrap_or(TOY_SAMPLES)
    }
}

pub fn check_compatible(arch: &Architecture, data: &Dataset) -> Result<()> {
    if arch.input_dim != data.dim() || arch.num_classes != data.num_classes {
        return Err(Error::Config(format!(
            "architecture expects {} inputs and {} classes, dataset {} has {} and {}",
            arch.input_dim,
            arch.num_classes,
            data.name,
            data.dim(),
            data.num_classes
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.resolved_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"learning_rate": 0.1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bundles": {"policy": {"fixed_gamma": 1e-6}}}"#).is_ok());
        assert!(serde_json::from_str::<RunConfig>(r#"{"toy": {"conflict": true, "params": {"epochs": 3}}}"#).is_ok());
        assert!(serde_json::from_str::<RunConfig>(r#"{"toy": {"conflcit": true}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"toy": {"params": {"epoch": 3}}}"#).is_err());
    }

    #[test]
    fn partial_sections_take_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"lr": 0.01}}"#).unwrap();
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.bundles.probe_size, 2048);
    }
}
