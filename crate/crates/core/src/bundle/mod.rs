//! Resolution-aware bundling, bundle partitions and bundle entropy.

mod measure;

pub use measure::{
    first_conflicting_layer, measure, measure_probe, BundleConfig, BundleEntropyRecord, ConflictLocation, Location,
};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ulp, Element, FloatFormat, Matrix};

/// Added inside the logarithm of the entropy for numerical stability.
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// How the resolution threshold γ of a layer is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionPolicy {
    /// Spacing of the largest-magnitude weight of the layer.
    #[default]
    WeightUlp,
    FixedGamma(f64),
}

impl ResolutionPolicy {
    pub fn validate(self) -> Result<()> {
        match self {
            ResolutionPolicy::FixedGamma(g) if !(g > 0.0 && g.is_finite()) => Err(Error::Config(format!(
                "fixed gamma must be positive and finite, got {g}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Resolution threshold γ for a layer with weight matrix `weights`.
pub fn resolution_threshold<T: Element>(
    weights: &Matrix<T>,
    policy: ResolutionPolicy,
    format: FloatFormat,
) -> Result<f64> {
    policy.validate()?;
    match policy {
        ResolutionPolicy::FixedGamma(g) => Ok(g),
        ResolutionPolicy::WeightUlp => {
            let max = weights.max_abs().as_f64();
            if max == 0.0 {
                log::warn!("all-zero weight matrix; using the spacing at zero as resolution");
            }
            ulp(max, format)
        }
    }
}

/// Whether two activation vectors are indistinguishable after scaling by
/// `lr / batch_size`. Always evaluated in binary64.
pub fn bundled<T: Element>(a_i: &[T], a_j: &[T], lr: f64, batch_size: usize, gamma: f64) -> Result<bool> {
    if a_i.len() != a_j.len() {
        return Err(Error::Shape(format!(
            "cannot compare activations of length {} and {}",
            a_i.len(),
            a_j.len()
        )));
    }
    Ok(within(a_i, a_j, lr / batch_size as f64, gamma))
}

fn within<T: Element>(a: &[T], b: &[T], scale: f64, gamma: f64) -> bool {
    let dist = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (&x, &y)| m.max((x.as_f64() - y.as_f64()).abs()));
    scale * dist <= gamma
}

/// Disjoint cover of the probe samples `0..len` by bundles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundlePartition {
    /// Sample indices per bundle, ascending; the first entry is the
    /// representative.
    pub bundles: Vec<Vec<usize>>,
}

impl BundlePartition {
    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    /// Number of samples covered.
    pub fn samples(&self) -> usize {
        self.bundles.iter().map(Vec::len).sum()
    }

    /// Bundle index per sample.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.samples()];
        for (b, members) in self.bundles.iter().enumerate() {
            for &i in members {
                out[i] = b;
            }
        }
        out
    }

    /// Groups samples by an exact key, numbering bundles by first occurrence.
    pub fn group_by_key<K: std::hash::Hash + Eq>(keys: impl IntoIterator<Item = K>) -> Self {
        let mut index: HashMap<K, usize> = HashMap::new();
        let mut bundles: Vec<Vec<usize>> = Vec::new();
        for (i, key) in keys.into_iter().enumerate() {
            let next = bundles.len();
            let b = *index.entry(key).or_insert(next);
            if b == next {
                bundles.push(Vec::new());
            }
            bundles[b].push(i);
        }
        Self { bundles }
    }
}

/// Single pass over the rows of `activations`: each row joins the first
/// bundle (in creation order) whose representative it is bundled with, or
/// opens a new one.
///
/// Candidates are pre-filtered on the column with the largest spread; the
/// filter only discards representatives that cannot pass the exact test.
pub fn partition_layer<T: Element>(activations: &Matrix<T>, lr: f64, batch_size: usize, gamma: f64) -> BundlePartition {
    let (n, width) = activations.shape();
    let scale = lr / batch_size as f64;
    if width == 0 {
        return BundlePartition {
            bundles: vec![(0..n).collect()],
        };
    }
    let pivot = (0..width)
        .max_by(|&a, &b| spread(activations, a).total_cmp(&spread(activations, b)))
        .unwrap_or(0);
    // Any pair passing the exact test has pivot distance below this bound.
    let reach = if scale > 0.0 {
        (gamma / scale) * (1.0 + 1e-9) + f64::MIN_POSITIVE
    } else {
        f64::INFINITY
    };

    let mut bundles: Vec<Vec<usize>> = Vec::new();
    // Representatives sorted by pivot value: (value, bundle index).
    let mut reps: Vec<(f64, usize)> = Vec::new();
    let mut candidates = Vec::new();
    for i in 0..n {
        let row = activations.row(i);
        let v = row[pivot].as_f64();
        let lo = reps.partition_point(|&(p, _)| p < v - reach);
        let hi = reps.partition_point(|&(p, _)| p <= v + reach);
        candidates.clear();
        candidates.extend(reps[lo..hi].iter().map(|&(_, b)| b));
        candidates.sort_unstable();
        let found = candidates
            .iter()
            .copied()
            .find(|&b| within(row, activations.row(bundles[b][0]), scale, gamma));
        match found {
            Some(b) => bundles[b].push(i),
            None => {
                let b = bundles.len();
                bundles.push(vec![i]);
                let at = reps.partition_point(|&(p, _)| p <= v);
                reps.insert(at, (v, b));
            }
        }
    }
    BundlePartition { bundles }
}

fn spread<T: Element>(m: &Matrix<T>, col: usize) -> f64 {
    let (lo, hi) = (0..m.rows()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        let v = m[(r, col)].as_f64();
        (lo.min(v), hi.max(v))
    });
    hi - lo
}

/// Partition by bitwise equality of activation rows (`a_i == a_j`).
pub fn partition_exact<T: Element>(activations: &Matrix<T>) -> BundlePartition {
    BundlePartition::group_by_key(
        (0..activations.rows()).map(|i| activations.row(i).iter().map(|v| v.bits()).collect::<Vec<_>>()),
    )
}

/// Size-weighted label entropy of a partition. Label-pure bundles contribute
/// exactly zero.
pub fn bundle_entropy(partition: &BundlePartition, labels: &[usize], num_classes: usize, epsilon: f64) -> Result<f64> {
    let n = partition.samples();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "partition covers {n} samples but {} labels were given",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
    }
    let mut counts = vec![0usize; num_classes];
    let mut total = 0.0;
    for members in &partition.bundles {
        counts.iter_mut().for_each(|c| *c = 0);
        for &i in members {
            counts[labels[i]] += 1;
        }
        if counts.iter().filter(|&&c| c > 0).count() <= 1 {
            continue;
        }
        let size = members.len() as f64;
        let h: f64 = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / size;
                -p * (p + epsilon).ln()
            })
            .sum();
        total += size * h;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rows(v: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_f64_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn thresholds() {
        let w = Matrix::from_vec(1, 2, vec![1.0f32, -0.5]).unwrap();
        assert_eq!(
            resolution_threshold(&w, ResolutionPolicy::WeightUlp, FloatFormat::Binary32).unwrap(),
            2f64.powi(-23)
        );
        let w = Matrix::from_vec(1, 2, vec![0.75f32, 0.1]).unwrap();
        assert_eq!(
            resolution_threshold(&w, ResolutionPolicy::WeightUlp, FloatFormat::Binary32).unwrap(),
            2f64.powi(-24)
        );
        assert_eq!(
            resolution_threshold(&w, ResolutionPolicy::FixedGamma(1e-6), FloatFormat::Binary32).unwrap(),
            1e-6
        );
        let z = Matrix::<f32>::zeros(2, 2);
        assert_eq!(
            resolution_threshold(&z, ResolutionPolicy::WeightUlp, FloatFormat::Binary32).unwrap(),
            2f64.powi(-149)
        );
        assert!(resolution_threshold(&w, ResolutionPolicy::FixedGamma(0.0), FloatFormat::Binary32).is_err());
    }

    #[test]
    fn bundled_arithmetic() {
        let g = 2f64.powi(-23);
        assert!(bundled(&[0.5, 0.5], &[0.5, 0.5], 0.001, 64, 1e-300).unwrap());
        // 1e-3 / 64 * 1e-3 = 1.5625e-8 <= 1.19e-7
        assert!(bundled(&[0.0], &[1e-3], 0.001, 64, g).unwrap());
        // 1e-3 / 64 * 1e-2 = 1.5625e-7 > 1.19e-7
        assert!(!bundled(&[0.0, 0.3], &[1e-2, 0.3], 0.001, 64, g).unwrap());
        assert!(matches!(
            bundled(&[0.0], &[0.0, 1.0], 0.001, 64, g),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn identical_rows_form_one_bundle() {
        let m = Matrix::filled(7, 3, 0.25f32);
        let p = partition_layer(&m, 0.001, 64, 1e-30);
        assert_eq!(p.bundles, vec![(0..7).collect::<Vec<_>>()]);
    }

    #[test]
    fn separated_rows_are_singletons() {
        // gamma * |B| / alpha = 1e-6 * 64 / 1e-3 = 0.064; rows are 0.2 apart.
        let m = Matrix::from_vec(5, 1, vec![0.0, 0.2, 0.4, 0.6, 0.8]).unwrap();
        assert_eq!(partition_layer(&m, 0.001, 64, 1e-6).len(), 5);
    }

    #[test]
    fn chain_follows_representative_rule() {
        // Threshold distance 1.0 (scale 1); A~B, B~C, A!~C.
        let m = rows(&[&[0.0, 0.0], &[0.9, 0.0], &[1.8, 0.0]]);
        let p = partition_layer(&m, 1.0, 1, 1.0);
        assert_eq!(p.bundles, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn first_matching_bundle_wins() {
        // Row 2 is within reach of both representatives; the older bundle wins
        // even though it sorts later on the pivot column.
        let m = rows(&[&[1.0], &[0.0], &[0.6]]);
        let p = partition_layer(&m, 1.0, 1, 0.7);
        assert_eq!(p.bundles, vec![vec![0, 2], vec![1]]);
    }

    #[test]
    fn entropy_closed_forms() {
        let singletons = BundlePartition {
            bundles: (0..4).map(|i| vec![i]).collect(),
        };
        assert_eq!(
            bundle_entropy(&singletons, &[0, 1, 0, 1], 2, DEFAULT_EPSILON).unwrap(),
            0.0
        );
        let all = BundlePartition {
            bundles: vec![(0..100).collect()],
        };
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        assert_abs_diff_eq!(
            bundle_entropy(&all, &labels, 10, DEFAULT_EPSILON).unwrap(),
            10f64.ln(),
            epsilon = 1e-6
        );
        let pure = BundlePartition {
            bundles: vec![vec![0, 1, 2], vec![3]],
        };
        assert_eq!(bundle_entropy(&pure, &[4, 4, 4, 1], 10, DEFAULT_EPSILON).unwrap(), 0.0);
        let mixed = BundlePartition {
            bundles: vec![vec![0, 1], vec![2], vec![3]],
        };
        let h = bundle_entropy(&mixed, &[0, 1, 0, 1], 2, DEFAULT_EPSILON).unwrap();
        assert_abs_diff_eq!(h, 0.25 * 2.0 * 2f64.ln(), epsilon = 1e-9);
        assert!(matches!(
            bundle_entropy(&mixed, &[0, 1, 0, 2], 2, DEFAULT_EPSILON),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            bundle_entropy(&mixed, &[0, 1], 2, DEFAULT_EPSILON),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn exact_partition_groups_bit_patterns() {
        let m = Matrix::from_vec(4, 1, vec![0.5f32, 0.25, 0.5, 0.25 + f32::EPSILON]).unwrap();
        assert_eq!(partition_exact(&m).bundles, vec![vec![0, 2], vec![1], vec![3]]);
    }

    /// Quadratic reference without the pivot filter.
    fn brute(m: &Matrix<f64>, lr: f64, bs: usize, gamma: f64) -> Vec<Vec<usize>> {
        let mut bundles: Vec<Vec<usize>> = Vec::new();
        for i in 0..m.rows() {
            match bundles
                .iter()
                .position(|b| bundled(m.row(i), m.row(b[0]), lr, bs, gamma).unwrap())
            {
                Some(b) => bundles[b].push(i),
                None => bundles.push(vec![i]),
            }
        }
        bundles
    }

    fn activations() -> impl Strategy<Value = Matrix<f64>> {
        (1usize..40, 1usize..5).prop_flat_map(|(n, w)| {
            prop::collection::vec(
                prop::sample::select(vec![0.0, 0.01, 0.02, 0.5, 0.51, 1.0, 1.0005]),
                n * w,
            )
            .prop_map(move |d| Matrix::from_vec(n, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn partition_matches_reference_and_covers(m in activations(), gamma in 1e-6f64..1e-4) {
            let p = partition_layer(&m, 0.001, 64, gamma);
            prop_assert_eq!(&p.bundles, &brute(&m, 0.001, 64, gamma));
            let mut seen: Vec<usize> = p.bundles.concat();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..m.rows()).collect::<Vec<_>>());
            prop_assert!(!p.is_empty() && p.len() <= m.rows());
        }

        #[test]
        fn larger_gamma_never_adds_bundles(m in activations(), g in 1e-7f64..1e-4, f in 1.0f64..100.0) {
            prop_assert!(partition_layer(&m, 0.001, 64, g * f).len() <= partition_layer(&m, 0.001, 64, g).len());
        }

        #[test]
        fn duplicates_are_co_bundled(m in activations(), g in 1e-9f64..1e-4) {
            let a = partition_layer(&m, 0.001, 64, g).assignment();
            for i in 0..m.rows() {
                for j in 0..m.rows() {
                    if m.row(i) == m.row(j) {
                        prop_assert_eq!(a[i], a[j]);
                    }
                }
            }
        }

        #[test]
        fn scaling_is_equivalent(
            a in prop::collection::vec(0.0f64..1.0, 3),
            b in prop::collection::vec(0.0f64..1.0, 3),
            e in -8i32..8,
            g in 1e-6f64..1e-3,
        ) {
            let c = 2f64.powi(e);
            let ca: Vec<f64> = a.iter().map(|v| v * c).collect();
            let cb: Vec<f64> = b.iter().map(|v| v * c).collect();
            prop_assert_eq!(
                bundled(&a, &b, 0.001, 64, g).unwrap(),
                bundled(&ca, &cb, 0.001, 64, g * c).unwrap()
            );
        }

        #[test]
        fn entropy_bounds(
            assignment in prop::collection::vec(0usize..6, 1..60),
            seed_labels in prop::collection::vec(0usize..4, 60),
        ) {
            let n = assignment.len();
            let labels = &seed_labels[..n];
            let p = BundlePartition::group_by_key(assignment.iter().copied());
            let h = bundle_entropy(&p, labels, 4, DEFAULT_EPSILON).unwrap();
            prop_assert!(h >= 0.0 && h <= 4f64.ln() + 1e-12);
            let pure = p.bundles.iter().all(|b| b.iter().all(|&i| labels[i] == labels[b[0]]));
            prop_assert_eq!(h == 0.0, pure);
        }
    }
}
