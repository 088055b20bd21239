//! Forward propagation with full activation traces.

use crate::error::{Error, Result};
use crate::math::{Element, Matrix};

use super::arch::Residual;
use super::network::{BatchNorm, DenseLayer, Network, Stage};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Where a hidden layer sits in the block structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    /// 1-based index among the hidden layers actually present.
    pub global: usize,
    pub block: usize,
    pub tag: String,
    /// 1-based offset within the block.
    pub offset: usize,
    /// Residual unit this layer closes (second layer of a unit only).
    pub closes_unit: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    pub info: LayerInfo,
    /// Post-nonlinearity output `a^(l+1)`; for the closing layer of a
    /// residual unit this is `r(x) + d`.
    pub output: Matrix<T>,
    /// Pre-add branch output `d` for closing layers of residual units.
    pub branch: Option<Matrix<T>>,
}

#[derive(Debug, Clone)]
pub(crate) struct BnCache<T> {
    pub xhat: Matrix<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct DenseCache<T> {
    pub input: Matrix<T>,
    pub bn: Option<BnCache<T>>,
}

/// Everything recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace<T> {
    pub layers: Vec<LayerTrace<T>>,
    pub logits: Matrix<T>,
    pub probs: Matrix<T>,
    pub mode: Mode,
    pub(crate) version: u64,
    /// One entry per dense layer in parameter order (head last).
    pub(crate) caches: Vec<DenseCache<T>>,
}

impl<T: Element> ActivationTrace<T> {
    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }

    /// Output of the last hidden layer (the network input if there is none).
    pub fn last_hidden(&self) -> &Matrix<T> {
        self.layers
            .last()
            .map_or(&self.caches.last().expect("head cache").input, |l| &l.output)
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probs.argmax_rows()
    }
}

/// Per-feature batch normalisation.
///
/// Train mode normalises with batch statistics (population variance); Eval
/// mode uses the running statistics.
pub fn batchnorm<T: Element>(x: &Matrix<T>, params: &BatchNorm<T>, mode: Mode) -> Result<Matrix<T>> {
    Ok(batchnorm_cached(x, params, mode)?.0)
}

fn batchnorm_cached<T: Element>(x: &Matrix<T>, params: &BatchNorm<T>, mode: Mode) -> Result<(Matrix<T>, BnCache<T>)> {
    let (n, width) = x.shape();
    if width != params.width() {
        return Err(Error::Shape(format!(
            "batchnorm over {width} features with {} parameters",
            params.width()
        )));
    }
    let eps = T::from_f64_rounded(BN_EPSILON);
    let (mean, var) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::Config(
                    "batch normalisation in train mode needs at least 2 rows".into(),
                ));
            }
            let count = T::from_f64_rounded(n as f64);
            let mean: Vec<T> = x.column_sums().into_iter().map(|s| s / count).collect();
            let mut var = vec![T::zero(); width];
            for r in 0..n {
                for ((v, &xv), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                    let d = xv - m;
                    *v += d * d;
                }
            }
            for v in &mut var {
                *v = *v / count;
            }
            (mean, var)
        }
        Mode::Eval => (params.running_mean.clone(), params.running_var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for r in 0..n {
        let xr = xhat.row_mut(r);
        for (j, v) in xr.iter_mut().enumerate() {
            *v = (*v - mean[j]) * inv_std[j];
        }
        let yr = y.row_mut(r);
        for (j, v) in yr.iter_mut().enumerate() {
            *v = params.gamma[j] * xhat.row(r)[j] + params.beta[j];
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Row-wise softmax with max-logit subtraction.
pub fn softmax<T: Element>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    let maxes = logits.row_max();
    for (r, m) in maxes.into_iter().enumerate() {
        let row = out.row_mut(r);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// `W x + b`, then batch-norm when present. Returns the pre-activation.
fn dense_forward<T: Element>(
    layer: &DenseLayer<T>,
    input: &Matrix<T>,
    mode: Mode,
) -> Result<(Matrix<T>, DenseCache<T>)> {
    let z = input.matmul_nt(&layer.w)?.add_row_vector(layer.b.as_slice())?;
    let (out, bn) = match &layer.bn {
        Some(params) => {
            let (y, cache) = batchnorm_cached(&z, params, mode)?;
            (y, Some(cache))
        }
        None => (z, None),
    };
    Ok((
        out,
        DenseCache {
            input: input.clone(),
            bn,
        },
    ))
}

pub(crate) fn apply_residual<T: Element>(kind: Residual, x: &Matrix<T>) -> Matrix<T> {
    match kind {
        Residual::None => Matrix::zeros(x.rows(), x.cols()),
        Residual::Identity => x.clone(),
        Residual::Affine { scale, shift } => {
            let s = T::from_f64_rounded(scale);
            let t = T::from_f64_rounded(shift);
            x.map(|v| s * v + t)
        }
    }
}

/// Runs `inputs` through the network recording every hidden layer.
pub fn forward<T: Element>(net: &Network<T>, inputs: &Matrix<T>, mode: Mode) -> Result<ActivationTrace<T>> {
    let arch = net.architecture();
    if inputs.cols() != arch.input_dim {
        return Err(Error::Shape(format!(
            "network expects {} input features, got {}",
            arch.input_dim,
            inputs.cols()
        )));
    }
    let mut layers = Vec::new();
    let mut caches = Vec::new();
    let mut x = inputs.clone();
    let push = |layers: &mut Vec<LayerTrace<T>>,
                block: usize,
                offset: usize,
                closes: Option<usize>,
                output: Matrix<T>,
                branch: Option<Matrix<T>>| {
        layers.push(LayerTrace {
            info: LayerInfo {
                global: layers.len() + 1,
                block,
                tag: arch.blocks[block].tag.clone(),
                offset,
                closes_unit: closes,
            },
            output,
            branch,
        });
    };
    for stage in net.stages() {
        match stage {
            Stage::Plain { block, offset, layer } => {
                let (z, cache) = dense_forward(layer, &x, mode)?;
                caches.push(cache);
                x = z.relu();
                push(&mut layers, *block, *offset, None, x.clone(), None);
            }
            Stage::Residual {
                block,
                unit,
                kind,
                first,
                second,
            } => {
                let (z1, c1) = dense_forward(first, &x, mode)?;
                caches.push(c1);
                let h = z1.relu();
                push(&mut layers, *block, 2 * unit + 1, None, h.clone(), None);
                let (d, c2) = dense_forward(second, &h, mode)?;
                caches.push(c2);
                let out = apply_residual(*kind, &x).add(&d)?;
                push(&mut layers, *block, 2 * unit + 2, Some(*unit), out.clone(), Some(d));
                x = out;
            }
            Stage::Bypass { kind, .. } => {
                x = apply_residual(*kind, &x);
            }
        }
    }
    let (logits, head_cache) = dense_forward(net.head(), &x, mode)?;
    caches.push(head_cache);
    let probs = softmax(&logits);
    Ok(ActivationTrace {
        layers,
        logits,
        probs,
        mode,
        version: net.version(),
        caches,
    })
}

impl<T: Element> Network<T> {
    /// Folds the batch statistics of a Train-mode trace into the running
    /// statistics (`running = m * running + (1 - m) * batch`).
    pub fn absorb_batch_stats(&mut self, trace: &ActivationTrace<T>) {
        if trace.mode != Mode::Train {
            return;
        }
        let m = T::from_f64_rounded(BN_MOMENTUM);
        let one_minus = T::one() - m;
        for (layer, cache) in self.dense_layers_mut().into_iter().zip(&trace.caches) {
            if let (Some(bn), Some(c)) = (layer.bn.as_mut(), cache.bn.as_ref()) {
                for j in 0..bn.width() {
                    bn.running_mean[j] = m * bn.running_mean[j] + one_minus * c.batch_mean[j];
                    bn.running_var[j] = m * bn.running_var[j] + one_minus * c.batch_var[j];
                }
            }
        }
    }

    /// Class predictions in Eval mode, processed in chunks.
    pub fn predict(&self, inputs: &Matrix<T>) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(inputs.rows());
        let chunk = 512;
        let mut start = 0;
        while start < inputs.rows() {
            let end = (start + chunk).min(inputs.rows());
            let idx: Vec<usize> = (start..end).collect();
            let trace = forward(self, &inputs.select_rows(&idx), Mode::Eval)?;
            preds.extend(trace.predictions());
            start = end;
        }
        Ok(preds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::{Architecture, Block};

    #[test]
    fn hand_computed_relu_layer() {
        let arch = Architecture::fc(2, 2, 1, 2).unwrap();
        let mut net: Network<f64> = Network::build(&arch, 0).unwrap();
        net.layer_mut(0).w = Matrix::identity(2);
        let x = Matrix::from_vec(1, 2, vec![-1.0, 2.0]).unwrap();
        let t = forward(&net, &x, Mode::Eval).unwrap();
        assert_eq!(t.layers[0].output.as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits() {
        let l = Matrix::from_vec(1, 2, vec![0.0f32, 0.0]).unwrap();
        assert_eq!(softmax(&l).as_slice(), &[0.5, 0.5]);
        let big = Matrix::from_vec(1, 3, vec![1000.0f32, 999.0, -1000.0]).unwrap();
        let s = softmax(&big);
        assert!((s.as_slice().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_train_normalises() {
        let x = Matrix::from_f64_rows(&[vec![1.0, 10.0], vec![2.0, 20.0], vec![3.0, 35.0], vec![6.0, 5.0]]).unwrap();
        let bn = BatchNorm::<f64>::new(2);
        let y = batchnorm(&x, &bn, Mode::Train).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..4).map(|i| y[(i, j)]).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_affine_law() {
        let x = Matrix::from_f64_rows(&[vec![1.0], vec![3.0], vec![5.0]]).unwrap();
        let plain = batchnorm(&x, &BatchNorm::<f64>::new(1), Mode::Train).unwrap();
        let mut bn = BatchNorm::<f64>::new(1);
        bn.gamma = vec![2.0];
        bn.beta = vec![3.0];
        let y = batchnorm(&x, &bn, Mode::Train).unwrap();
        for i in 0..3 {
            assert!((y[(i, 0)] - (2.0 * plain[(i, 0)] + 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let x = Matrix::from_f64_rows(&[vec![0.5, -2.0]]).unwrap();
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma = vec![1.5, 1.0];
        bn.beta = vec![0.25, 0.0];
        let y = batchnorm(&x, &bn, Mode::Eval).unwrap();
        let s = (1.0f64 + 1e-5).sqrt();
        assert!((y[(0, 0)] - (1.5 * 0.5 / s + 0.25)).abs() < 1e-15);
        assert!((y[(0, 1)] - (-2.0 / s)).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_single_row_train_rejected() {
        let x = Matrix::from_f64_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(
            batchnorm(&x, &BatchNorm::<f64>::new(1), Mode::Train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn residual_output_is_skip_plus_branch() {
        let arch = Architecture::new(
            3,
            2,
            vec![
                Block::plain("t", 1, 3),
                Block::residual("r", 2, 3, Residual::Affine { scale: 2.0, shift: 0.1 }),
            ],
        )
        .unwrap();
        let net: Network<f32> = Network::build(&arch, 4).unwrap();
        let x = Matrix::from_f64_rows(&[vec![0.1, 0.2, 0.3], vec![0.9, 0.1, 0.5]]).unwrap();
        let t = forward(&net, &x, Mode::Eval).unwrap();
        assert_eq!(t.layers.len(), 3);
        let unit_in = &t.layers[0].output;
        let expected = apply_residual(Residual::Affine { scale: 2.0, shift: 0.1 }, unit_in)
            .add(t.layers[2].branch.as_ref().unwrap())
            .unwrap();
        assert_eq!(t.layers[2].output, expected);
        assert_eq!(t.layers[2].info.offset, 2);
        assert_eq!(t.layers[2].info.closes_unit, Some(0));
    }

    #[test]
    fn input_width_checked() {
        let arch = Architecture::fc(3, 2, 1, 2).unwrap();
        let net: Network<f32> = Network::build(&arch, 0).unwrap();
        let x = Matrix::<f32>::zeros(1, 4);
        assert!(matches!(forward(&net, &x, Mode::Eval), Err(Error::Shape(_))));
    }
}
