//! Datasets: the synthetic 1-D toy problem, MNIST IDX files, probe subsets and
//! class-stratified batching.

mod batches;
mod mnist;
mod toy;

pub use batches::{stratified_batches, Batch};
pub use mnist::{mnist_load, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use toy::toy_generate;

use crate::error::{Error, Result};
use crate::math::{Element, Matrix, RngStream};

/// Labelled samples with inputs in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub inputs: Matrix<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(name: &str, inputs: Matrix<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} samples",
                labels.len(),
                inputs.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
        }
        if inputs.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("inputs must lie in [0, 1]".into()));
        }
        Ok(Self {
            name: name.to_string(),
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `limit` samples, file order preserved.
    pub fn truncate(&self, limit: usize) -> Self {
        let n = limit.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    pub fn inputs_as<T: Element>(&self) -> Matrix<T> {
        convert(&self.inputs)
    }

    pub fn one_hot<T: Element>(&self) -> Matrix<T> {
        one_hot(&self.labels, self.num_classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Random probe of up to `size` samples, balanced across classes as far
    /// as the class counts allow. Sample order is shuffled.
    pub fn probe(&self, size: usize, seed: u64) -> Self {
        let size = size.min(self.len());
        let mut rng = RngStream::new(seed);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        for pool in &mut by_class {
            rng.shuffle(pool);
        }
        let per_class = size / self.num_classes;
        let mut chosen = Vec::with_capacity(size);
        let mut leftover = Vec::new();
        for pool in &by_class {
            let take = per_class.min(pool.len());
            chosen.extend_from_slice(&pool[..take]);
            leftover.extend_from_slice(&pool[take..]);
        }
        rng.shuffle(&mut leftover);
        let missing = size - chosen.len();
        chosen.extend_from_slice(&leftover[..missing]);
        rng.shuffle(&mut chosen);
        self.subset(&chosen)
    }
}

pub fn convert<T: Element>(m: &Matrix<f64>) -> Matrix<T> {
    let data = m.as_slice().iter().map(|&v| T::from_f64_rounded(v)).collect();
    Matrix::from_vec(m.rows(), m.cols(), data).expect("finite conversion")
}

pub fn one_hot<T: Element>(labels: &[usize], num_classes: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(labels.len().max(1), num_classes);
    for (i, &l) in labels.iter().enumerate() {
        m[(i, l)] = T::one();
    }
    m
}
