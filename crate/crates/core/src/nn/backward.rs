//! Cross-entropy loss, backpropagation and the SGD update.

use crate::error::{Error, Result};
use crate::math::{Element, Matrix};

use super::forward::{softmax, ActivationTrace, BnCache, Mode};
use super::network::{DenseLayer, Network, Stage};
use super::train::TrainConfig;

/// Gradient for one dense layer, shaped like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub dw: Matrix<T>,
    pub db: Matrix<T>,
    pub dgamma: Option<Vec<T>>,
    pub dbeta: Option<Vec<T>>,
}

/// Gradients in parameter order: hidden layers, then the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGrad<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn head(&self) -> &LayerGrad<T> {
        self.layers.last().expect("head gradient")
    }

    /// L2 norm over every gradient entry, accumulated in binary64.
    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0;
        for g in &self.layers {
            for v in g.dw.as_slice().iter().chain(g.db.as_slice()) {
                acc += v.as_f64().powi(2);
            }
            for v in g.dgamma.iter().chain(&g.dbeta).flatten() {
                acc += v.as_f64().powi(2);
            }
        }
        acc.sqrt()
    }
}

/// Mean cross-entropy and `(h - y) / batch`.
///
/// The loss uses a log-sum-exp in the element type, so a prediction that
/// equals its one-hot label exactly has loss exactly zero.
pub fn loss_and_output_grad<T: Element>(logits: &Matrix<T>, labels: &Matrix<T>) -> Result<(f64, Matrix<T>)> {
    if logits.shape() != labels.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs labels {:?}",
            logits.shape(),
            labels.shape()
        )));
    }
    let (n, classes) = logits.shape();
    let mut targets = Vec::with_capacity(n);
    for r in 0..n {
        let row = labels.row(r);
        let ones: Vec<usize> = (0..classes).filter(|&j| row[j] == T::one()).collect();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones.len() != 1 || zeros != classes - 1 {
            return Err(Error::Data(format!("label row {r} is not one-hot")));
        }
        targets.push(ones[0]);
    }
    let h = softmax(logits);
    let maxes = logits.row_max();
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let sum: T = row.iter().map(|&z| (z - maxes[r]).exp()).sum();
        let lse = sum.ln();
        loss += (lse - (row[t] - maxes[r])).as_f64();
    }
    let inv_n = T::from_f64_rounded(n as f64);
    let dlogits = h.sub(labels)?.map(|v| v / inv_n);
    Ok((loss / n as f64, dlogits))
}

/// Undoes batch-norm: maps the gradient w.r.t. the normalised output back to
/// the pre-normalisation input.
fn batchnorm_backward<T: Element>(
    dy: &Matrix<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    mode: Mode,
) -> (Matrix<T>, Vec<T>, Vec<T>) {
    let (n, width) = dy.shape();
    let mut dgamma = vec![T::zero(); width];
    let mut dbeta = vec![T::zero(); width];
    for r in 0..n {
        for j in 0..width {
            dgamma[j] += dy.row(r)[j] * cache.xhat.row(r)[j];
            dbeta[j] += dy.row(r)[j];
        }
    }
    let mut dx = dy.clone();
    match mode {
        Mode::Eval => {
            for r in 0..n {
                for (j, v) in dx.row_mut(r).iter_mut().enumerate() {
                    *v = *v * gamma[j] * cache.inv_std[j];
                }
            }
        }
        Mode::Train => {
            let count = T::from_f64_rounded(n as f64);
            // dxhat = dy * gamma; dx = inv_std / n * (n dxhat - sum dxhat - xhat sum(dxhat xhat))
            let mut sum_dxhat = vec![T::zero(); width];
            let mut sum_dxhat_xhat = vec![T::zero(); width];
            for r in 0..n {
                for j in 0..width {
                    let g = dy.row(r)[j] * gamma[j];
                    sum_dxhat[j] += g;
                    sum_dxhat_xhat[j] += g * cache.xhat.row(r)[j];
                }
            }
            for r in 0..n {
                let xhat = cache.xhat.row(r).to_vec();
                for (j, v) in dx.row_mut(r).iter_mut().enumerate() {
                    let g = *v * gamma[j];
                    *v = cache.inv_std[j] / count * (count * g - sum_dxhat[j] - xhat[j] * sum_dxhat_xhat[j]);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Backprop through one dense layer given the gradient w.r.t. its
/// (post-BN, pre-activation) output. Returns the input gradient.
fn dense_backward<T: Element>(
    layer: &DenseLayer<T>,
    cache: &super::forward::DenseCache<T>,
    dout: &Matrix<T>,
    mode: Mode,
    grads: &mut Vec<LayerGrad<T>>,
) -> Result<Matrix<T>> {
    let (dz, dgamma, dbeta) = match (&layer.bn, &cache.bn) {
        (Some(bn), Some(c)) => {
            let (dz, dg, db) = batchnorm_backward(dout, c, &bn.gamma, mode);
            (dz, Some(dg), Some(db))
        }
        _ => (dout.clone(), None, None),
    };
    let dw = dz.matmul_tn(&cache.input)?;
    let db = Matrix::from_vec(dz.cols(), 1, dz.column_sums())?;
    let dx = dz.matmul(&layer.w)?;
    grads.push(LayerGrad { dw, db, dgamma, dbeta });
    Ok(dx)
}

/// Zeroes gradient entries where the ReLU output was not strictly positive.
fn relu_mask<T: Element>(grad: &Matrix<T>, output: &Matrix<T>) -> Result<Matrix<T>> {
    let mask = output.map(|v| if v > T::zero() { T::one() } else { T::zero() });
    grad.hadamard(&mask)
}

/// Gradients for every parameter given `dlogits`.
pub fn backward<T: Element>(net: &Network<T>, trace: &ActivationTrace<T>, dlogits: &Matrix<T>) -> Result<Gradients<T>> {
    Ok(propagate(net, trace, dlogits)?.0)
}

/// Gradient of the mean loss w.r.t. the network input.
pub fn input_gradient<T: Element>(
    net: &Network<T>,
    trace: &ActivationTrace<T>,
    dlogits: &Matrix<T>,
) -> Result<Matrix<T>> {
    Ok(propagate(net, trace, dlogits)?.1)
}

fn propagate<T: Element>(
    net: &Network<T>,
    trace: &ActivationTrace<T>,
    dlogits: &Matrix<T>,
) -> Result<(Gradients<T>, Matrix<T>)> {
    if trace.version != net.version() {
        return Err(Error::State(format!(
            "trace recorded at parameter version {}, network is at {}",
            trace.version,
            net.version()
        )));
    }
    if dlogits.shape() != trace.logits.shape() {
        return Err(Error::Shape(format!(
            "dlogits {:?} vs logits {:?}",
            dlogits.shape(),
            trace.logits.shape()
        )));
    }
    let mode = trace.mode;
    let mut caches = trace.caches.iter().rev();
    let mut layer_traces = trace.layers.iter().rev();
    // Collected in reverse parameter order, flipped at the end.
    let mut grads = Vec::new();
    let mut g = dense_backward(
        net.head(),
        caches.next().expect("head cache"),
        dlogits,
        mode,
        &mut grads,
    )?;
    for stage in net.stages().iter().rev() {
        match stage {
            Stage::Plain { layer, .. } => {
                let lt = layer_traces.next().expect("layer trace");
                let dz = relu_mask(&g, &lt.output)?;
                g = dense_backward(layer, caches.next().expect("cache"), &dz, mode, &mut grads)?;
            }
            Stage::Residual {
                kind, first, second, ..
            } => {
                let _closing = layer_traces.next().expect("closing trace");
                let opening = layer_traces.next().expect("opening trace");
                let dh = dense_backward(second, caches.next().expect("cache"), &g, mode, &mut grads)?;
                let dz1 = relu_mask(&dh, &opening.output)?;
                let dx_branch = dense_backward(first, caches.next().expect("cache"), &dz1, mode, &mut grads)?;
                // The add routes the same gradient into both paths.
                let slope = T::from_f64_rounded(kind.slope());
                g = dx_branch.add(&g.scale(slope))?;
            }
            Stage::Bypass { kind, .. } => {
                g = g.scale(T::from_f64_rounded(kind.slope()));
            }
        }
    }
    grads.reverse();
    Ok((Gradients { layers: grads }, g))
}

/// `W <- W - lr * grad - lr * decay * W` in the element type. Decay applies
/// to weight matrices only; biases and batch-norm parameters take plain SGD.
pub fn apply_update<T: Element>(net: &mut Network<T>, grads: &Gradients<T>, cfg: &TrainConfig) -> Result<()> {
    let layers = net.dense_layers_mut();
    if layers.len() != grads.layers.len() {
        return Err(Error::Shape(format!(
            "{} gradient entries for {} layers",
            grads.layers.len(),
            layers.len()
        )));
    }
    let lr = T::from_f64_rounded(cfg.learning_rate);
    let decay = T::from_f64_rounded(cfg.learning_rate * cfg.weight_decay);
    for (layer, g) in layers.into_iter().zip(&grads.layers) {
        if layer.w.shape() != g.dw.shape() || layer.b.shape() != g.db.shape() {
            return Err(Error::Shape("gradient shape does not match parameters".into()));
        }
        for (w, &d) in layer.w.as_mut_slice().iter_mut().zip(g.dw.as_slice()) {
            *w = *w - lr * d - decay * *w;
        }
        for (b, &d) in layer.b.as_mut_slice().iter_mut().zip(g.db.as_slice()) {
            *b = *b - lr * d;
        }
        if let (Some(bn), Some(dg), Some(db)) = (layer.bn.as_mut(), &g.dgamma, &g.dbeta) {
            for (p, &d) in bn.gamma.iter_mut().zip(dg) {
                *p = *p - lr * d;
            }
            for (p, &d) in bn.beta.iter_mut().zip(db) {
                *p = *p - lr * d;
            }
        }
        debug_assert!(layer.w.is_all_finite() && layer.b.is_all_finite());
    }
    net.bump_version();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::{Architecture, Block, Residual};
    use crate::nn::forward::forward;

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        let logits = Matrix::from_vec(1, 2, vec![0.0f32, -200.0]).unwrap();
        let y = Matrix::from_vec(1, 2, vec![1.0f32, 0.0]).unwrap();
        let (loss, d) = loss_and_output_grad(&logits, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert!(d.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_class_hand_values() {
        let logits = Matrix::from_vec(1, 2, vec![0.0f64, 0.0]).unwrap();
        let y = Matrix::from_vec(1, 2, vec![1.0f64, 0.0]).unwrap();
        let (loss, d) = loss_and_output_grad(&logits, &y).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(d.as_slice(), &[-0.5, 0.5]);
    }

    #[test]
    fn non_one_hot_rejected() {
        let logits = Matrix::from_vec(1, 2, vec![0.0f32, 0.0]).unwrap();
        let y = Matrix::from_vec(1, 2, vec![0.5f32, 0.5]).unwrap();
        assert!(matches!(loss_and_output_grad(&logits, &y), Err(Error::Data(_))));
    }

    fn small_net() -> (Network<f64>, Matrix<f64>) {
        let arch = Architecture::fc(3, 2, 2, 4).unwrap();
        let net = Network::build(&arch, 5).unwrap();
        let x = Matrix::from_f64_rows(&[vec![0.1, 0.5, 0.9], vec![0.7, 0.2, 0.3]]).unwrap();
        (net, x)
    }

    #[test]
    fn zero_dlogits_give_zero_gradients() {
        let (net, x) = small_net();
        let t = forward(&net, &x, Mode::Train).unwrap();
        let g = backward(&net, &t, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(g.l2_norm(), 0.0);
        assert_eq!(g.layers.len(), 3);
    }

    #[test]
    fn stale_trace_rejected() {
        let (mut net, x) = small_net();
        let t = forward(&net, &x, Mode::Train).unwrap();
        net.layer_mut(0);
        assert!(matches!(backward(&net, &t, &Matrix::zeros(2, 2)), Err(Error::State(_))));
    }

    #[test]
    fn residual_gradient_is_branch_plus_skip() {
        let kind = Residual::Affine { scale: 2.0, shift: 0.1 };
        let arch = Architecture::new(2, 2, vec![Block::residual("r", 2, 2, kind)]).unwrap();
        let mut net: Network<f64> = Network::build(&arch, 3).unwrap();
        let x = Matrix::from_f64_rows(&[vec![0.3, 0.8]]).unwrap();
        let d = Matrix::from_vec(1, 2, vec![0.25, -0.25]).unwrap();
        let upstream = d.matmul(&net.head().w).unwrap();
        // Identity branch on positive inputs: d/dx of relu(x) is I, so the
        // total is branch (1x) plus skip (2x).
        net.layer_mut(0).w = Matrix::identity(2);
        net.layer_mut(1).w = Matrix::identity(2);
        let t = forward(&net, &x, Mode::Eval).unwrap();
        let full = input_gradient(&net, &t, &d).unwrap();
        assert_eq!(full, upstream.scale(3.0));
        // Dead branch: only the skip path carries gradient.
        net.layer_mut(1).w = Matrix::zeros(2, 2);
        let t0 = forward(&net, &x, Mode::Eval).unwrap();
        let skip = input_gradient(&net, &t0, &d).unwrap();
        assert_eq!(skip, upstream.scale(2.0));
    }

    #[test]
    fn decay_arithmetic() {
        let arch = Architecture::fc(1, 2, 1, 1).unwrap();
        let mut net: Network<f32> = Network::build(&arch, 0).unwrap();
        net.layer_mut(0).w = Matrix::filled(1, 1, 1.0);
        let zero = Gradients {
            layers: net
                .dense_layers()
                .iter()
                .map(|l| LayerGrad {
                    dw: Matrix::zeros(l.w.rows(), l.w.cols()),
                    db: Matrix::zeros(l.b.rows(), 1),
                    dgamma: None,
                    dbeta: None,
                })
                .collect(),
        };
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        apply_update(&mut net, &zero, &cfg).unwrap();
        assert_eq!(net.hidden_layers()[0].w[(0, 0)], 0.999f32);
    }

    #[test]
    fn sub_ulp_update_is_absorbed() {
        let arch = Architecture::fc(1, 2, 1, 1).unwrap();
        let mut net: Network<f32> = Network::build(&arch, 0).unwrap();
        net.layer_mut(0).w = Matrix::filled(1, 1, 1.0);
        let mut g = backward(
            &net,
            &forward(&net, &Matrix::filled(1, 1, 0.5), Mode::Eval).unwrap(),
            &Matrix::zeros(1, 2),
        )
        .unwrap();
        g.layers[0].dw = Matrix::filled(1, 1, 1e-9);
        let cfg = TrainConfig {
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        let before = net.clone();
        apply_update(&mut net, &g, &cfg).unwrap();
        assert_eq!(net.hidden_layers()[0].w[(0, 0)].to_bits(), 1.0f32.to_bits());
        // lr = 0 style fixed point: zero gradient, no decay.
        let mut fixed = before.clone();
        let zero = backward(
            &before,
            &forward(&before, &Matrix::filled(1, 1, 0.5), Mode::Eval).unwrap(),
            &Matrix::zeros(1, 2),
        )
        .unwrap();
        apply_update(&mut fixed, &zero, &cfg).unwrap();
        assert_eq!(fixed.checksum(), before.checksum());
    }
}
