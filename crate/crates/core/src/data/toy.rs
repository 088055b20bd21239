use crate::error::{Error, Result};
use crate::math::{Matrix, RngStream};

use super::Dataset;

/// One-dimensional two-class problem: class 0 iff `x < 0.5`.
///
/// Exactly `round(n * class_zero_fraction)` samples are drawn uniformly from
/// `[0, 0.5)` and labelled 0, the rest from `[0.5, 1)`; the result is
/// shuffled.
pub fn toy_generate(n: usize, class_zero_fraction: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config(format!("toy dataset needs n >= 2, got {n}")));
    }
    if !(class_zero_fraction > 0.0 && class_zero_fraction < 1.0) {
        return Err(Error::Config(format!(
            "class-zero fraction must lie in (0, 1), got {class_zero_fraction}"
        )));
    }
    let zeros = (n as f64 * class_zero_fraction).round() as usize;
    let mut rng = RngStream::new(seed);
    let mut samples: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            if i < zeros {
                (rng.uniform_range(0.0, 0.5), 0)
            } else {
                (rng.uniform_range(0.5, 1.0), 1)
            }
        })
        .collect();
    rng.shuffle(&mut samples);
    let inputs = Matrix::from_vec(n, 1, samples.iter().map(|s| s.0).collect())?;
    let labels = samples.iter().map(|s| s.1).collect();
    Dataset::new("toy", inputs, labels, 2)
}
