use crate::error::{Error, Result};
use crate::math::{Element, Matrix, RngStream};

use super::{one_hot, Dataset};

/// A materialised mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub inputs: Matrix<T>,
    pub labels: Matrix<T>,
}

/// One epoch of mini-batches drawn without replacement.
///
/// Stratified mode puts `batch_size / N_c` samples of every class into each
/// batch and drops what does not fill a whole batch. Otherwise the dataset is
/// shuffled uniformly and cut into full batches (a dataset smaller than one
/// batch yields a single short batch).
pub fn stratified_batches<T: Element>(
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
    stratified: bool,
) -> Result<Vec<Batch<T>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = RngStream::new(seed);
    let groups: Vec<Vec<usize>> = if stratified {
        if !batch_size.is_multiple_of(ds.num_classes) {
            return Err(Error::Config(format!(
                "stratified batch size {batch_size} is not divisible by {} classes",
                ds.num_classes
            )));
        }
        let per_class = batch_size / ds.num_classes;
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
        for (i, &l) in ds.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        for pool in &mut by_class {
            rng.shuffle(pool);
        }
        let count = by_class.iter().map(|p| p.len() / per_class).min().unwrap_or(0);
        (0..count)
            .map(|b| {
                let mut idx: Vec<usize> = by_class
                    .iter()
                    .flat_map(|p| p[b * per_class..(b + 1) * per_class].iter().copied())
                    .collect();
                rng.shuffle(&mut idx);
                idx
            })
            .collect()
    } else {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        rng.shuffle(&mut order);
        if order.len() < batch_size {
            vec![order]
        } else {
            order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
        }
    };
    Ok(groups
        .into_iter()
        .map(|indices| {
            let labels: Vec<usize> = indices.iter().map(|&i| ds.labels[i]).collect();
            Batch {
                inputs: super::convert(&ds.inputs.select_rows(&indices)),
                labels: one_hot(&labels, ds.num_classes),
                indices,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_generate;

    #[test]
    fn balanced_toy_batches_are_half_and_half() {
        let ds = toy_generate(1000, 0.5, 0).unwrap();
        let batches = stratified_batches::<f32>(&ds, 64, 1, true).unwrap();
        assert_eq!(batches.len(), 500 / 32);
        for b in &batches {
            let ones = b.indices.iter().filter(|&&i| ds.labels[i] == 1).count();
            assert_eq!(ones, 32);
        }
    }

    #[test]
    fn divisibility_enforced() {
        let x = Matrix::from_vec(20, 1, vec![0.5; 20]).unwrap();
        let ds = Dataset::new("d", x, (0..20).map(|i| i % 10).collect(), 10).unwrap();
        assert!(matches!(
            stratified_batches::<f32>(&ds, 64, 0, true),
            Err(Error::Config(_))
        ));
        assert!(stratified_batches::<f32>(&ds, 60, 0, true).is_ok());
        assert!(stratified_batches::<f32>(&ds, 64, 0, false).is_ok());
    }

    #[test]
    fn epoch_has_no_duplicates_and_is_deterministic() {
        let ds = toy_generate(333, 0.66, 2).unwrap();
        for stratified in [true, false] {
            let a = stratified_batches::<f32>(&ds, 16, 5, stratified).unwrap();
            let b = stratified_batches::<f32>(&ds, 16, 5, stratified).unwrap();
            let mut seen: Vec<usize> = a.iter().flat_map(|b| b.indices.clone()).collect();
            assert!(seen.len() <= ds.len());
            let n = seen.len();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), n);
            let ia: Vec<_> = a.iter().map(|b| b.indices.clone()).collect();
            let ib: Vec<_> = b.iter().map(|b| b.indices.clone()).collect();
            assert_eq!(ia, ib);
        }
    }
}
