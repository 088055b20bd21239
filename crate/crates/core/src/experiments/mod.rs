//! Scripted reproductions of the controlled experiments.

mod heatmap;
mod residual;
mod runner;
mod sweep;
mod toy;

pub use heatmap::{distinct_activations, heatmap, oracle_bundles, HeatmapCell, HeatmapConfig};
pub use residual::{residual_probe, residual_probe_network, ResidualProbeConfig, ResidualProbeResult, UnitEntropy};
pub use runner::{last_layer_entropy, measurement_probe, train_with_measurement, EpochSummary, TrainingRun};
pub use sweep::{sweep, SweepConfig, SweepRecord};
pub use toy::{run_toy, toy_dataset, toy_network, ToyConfig, ToyEpoch, ToyTrace};
