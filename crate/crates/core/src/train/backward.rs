use super::{LossParams, FastGemm};
use crate::error::{Error, Result};
use crate::fcn::{forward_logits, ForwardCache, LayerKind, LayerParams, Network};
use crate::mask::BinaryMask;
use crate::scalar::Scalar;
use crate::tensor::{col2im, im2col, matmul_a_bt, matmul_at_b, softmax2, Matrix, Tensor};

/// Per-layer weight and bias gradients, shaped like [`Network::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Gradients {
            layers: net
                .params()
                .iter()
                .map(|p| LayerParams {
                    weights: Matrix::zeros(p.weights.rows(), p.weights.cols()),
                    bias: vec![T::zero(); p.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights
                .data_mut()
                .iter_mut()
                .zip(b.weights.data())
                .for_each(|(x, &y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, &y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: T) {
        for l in &mut self.layers {
            l.weights.data_mut().iter_mut().for_each(|x| *x *= s);
            l.bias.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Loss and its gradient with respect to both logit channels.
fn loss_grad<T: Scalar>(logits: &Tensor<T>, gt: &BinaryMask, params: &LossParams) -> Result<(T, Tensor<T>)> {
    let probs = softmax2(logits)?;
    let loss = super::weighted_bce_loss(&probs, gt, params)?;
    let n = probs.plane_len();
    let a = params.alpha();
    let inv = 1.0 / n as f64;
    let mut grad = vec![T::zero(); 2 * n];
    for (i, &y) in gt.bits().iter().enumerate() {
        let p = probs.data()[n + i].to_f64_lossy();
        // dL/dd with d = z1 - z0 and p = sigmoid(d)
        let dd = if y { -(1.0 - a) * (1.0 - p) } else { a * p } * inv;
        grad[i] = T::from_f64_lossy(-dd);
        grad[n + i] = T::from_f64_lossy(dd);
    }
    Ok((loss, Tensor::from_vec(2, probs.height(), probs.width(), grad)?))
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: &Tensor<T>) {
    match slot {
        Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.clone()),
    }
}

/// Backpropagates `d_logits` through the cached forward pass.
pub fn backward<T: Scalar>(
    net: &Network<T>,
    cache: &ForwardCache<T>,
    d_logits: &Tensor<T>,
) -> Result<Gradients<T>> {
    let n_layers = cache.pre.len();
    if n_layers == 0 || cache.inputs.len() != n_layers {
        return Err(Error::invalid("forward cache is empty or inconsistent"));
    }
    if cache.pre[n_layers - 1].dims() != d_logits.dims() {
        return Err(Error::dim("logit gradient does not match the cached output"));
    }
    let mut grads = Gradients::zeros_like(net);
    let mut d_out: Vec<Option<Tensor<T>>> = vec![None; n_layers];
    d_out[n_layers - 1] = Some(d_logits.clone());
    for i in (0..n_layers).rev() {
        let l = &net.layers()[i];
        let p = &net.params()[i];
        let Some(g) = d_out[i].take() else {
            continue;
        };
        if let Some(src) = l.skip_from {
            accumulate(&mut d_out[src], &g);
        }
        let pre = &cache.pre[i];
        let mut dz = g;
        if l.relu {
            dz.data_mut()
                .iter_mut()
                .zip(pre.data())
                .for_each(|(d, &z)| {
                    if z <= T::zero() {
                        *d = T::zero();
                    }
                });
        }
        let x = &cache.inputs[i];
        let (cin, ih, iw) = x.dims();
        let (cout, oh, ow) = dz.dims();
        let gw = &mut grads.layers[i];
        for (c, b) in gw.bias.iter_mut().enumerate() {
            *b = dz.channel(c).iter().copied().sum();
        }
        let dx = match l.kind {
            LayerKind::Conv => {
                let cols = im2col(x, l.filter, l.stride, l.padding)?;
                let (k, n) = (cols.rows(), cols.cols());
                matmul_a_bt(dz.data(), cols.data(), gw.weights.data_mut(), cout, n, k);
                if i == 0 {
                    None
                } else {
                    let mut dcols = vec![T::zero(); k * n];
                    matmul_at_b(p.weights.data(), dz.data(), &mut dcols, k, cout, n);
                    let dcols = Matrix::from_vec(k, n, dcols)?;
                    Some(col2im(&dcols, cin, ih, iw, l.filter, l.stride, l.padding)?)
                }
            }
            LayerKind::TConv => {
                debug_assert_eq!((oh, ow), (ih * l.stride, iw * l.stride));
                let dcols = im2col(&dz, l.filter, l.stride, l.padding)?;
                let (m, n) = (dcols.rows(), dcols.cols());
                matmul_a_bt(dcols.data(), x.data(), gw.weights.data_mut(), m, n, cin);
                if i == 0 {
                    None
                } else {
                    let mut dxv = vec![T::zero(); cin * n];
                    matmul_at_b(p.weights.data(), dcols.data(), &mut dxv, cin, m, n);
                    Some(Tensor::from_vec(cin, ih, iw, dxv)?)
                }
            }
            LayerKind::Softmax => return Err(Error::invalid("SOFTMAX inside the cached layers")),
        };
        if let Some(dx) = dx {
            accumulate(&mut d_out[i - 1], &dx);
        }
    }
    Ok(grads)
}

/// Forward pass, weighted cross-entropy and backward pass for one sample.
pub fn loss_and_gradients<T: Scalar>(
    net: &Network<T>,
    input: &Tensor<T>,
    gt: &BinaryMask,
    params: &LossParams,
) -> Result<(T, Gradients<T>)> {
    let mut cache = ForwardCache::default();
    let logits = forward_logits(net, input, &mut FastGemm, Some(&mut cache))?;
    if gt.width() != logits.width() || gt.height() != logits.height() {
        return Err(Error::dim("target mask does not match the network output"));
    }
    let (loss, d) = loss_grad(&logits, gt, params)?;
    Ok((loss, backward(net, &cache, &d)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcn::{build_arch, ArchSpec, LayerSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss_of(net: &Network<f64>, x: &Tensor<f64>, gt: &BinaryMask, lp: &LossParams) -> f64 {
        let logits = forward_logits(net, x, &mut crate::fcn::RefGemm, None).unwrap();
        let probs = softmax2(&logits).unwrap();
        super::super::weighted_bce_loss(&probs, gt, lp).unwrap()
    }

    fn param(net: &mut Network<f64>, layer: usize, bias: bool, j: usize) -> &mut f64 {
        let p = &mut net.params_mut()[layer];
        if bias {
            &mut p.bias[j]
        } else {
            &mut p.weights.data_mut()[j]
        }
    }

    fn check_gradients(mut net: Network<f64>, h: usize, w: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_vec(1, h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let gt = BinaryMask::from_fn(w, h, |px, py| (px as f64 - w as f64 / 2.0).hypot(py as f64 - h as f64 / 2.0) < h as f64 / 3.0);
        let lp = LossParams::new(0.3).unwrap();
        let (loss, grads) = loss_and_gradients(&net, &x, &gt, &lp).unwrap();
        assert!((loss - loss_of(&net, &x, &gt, &lp)).abs() < 1e-12);
        let eps = 1e-6;
        let mut checked = 0;
        for li in 0..grads.layers.len() {
            let nw = net.params()[li].weights.data().len();
            let nb = net.params()[li].bias.len();
            for _ in 0..6 {
                let bias = nb > 0 && rng.gen_bool(0.3);
                let j = if bias { rng.gen_range(0..nb) } else { rng.gen_range(0..nw.max(1)) };
                if nw == 0 {
                    continue;
                }
                let analytic = if bias {
                    grads.layers[li].bias[j]
                } else {
                    grads.layers[li].weights.data()[j]
                };
                let orig = *param(&mut net, li, bias, j);
                *param(&mut net, li, bias, j) = orig + eps;
                let up = loss_of(&net, &x, &gt, &lp);
                *param(&mut net, li, bias, j) = orig - eps;
                let down = loss_of(&net, &x, &gt, &lp);
                *param(&mut net, li, bias, j) = orig;
                let numeric = (up - down) / (2.0 * eps);
                let tol = 1e-6 + 1e-4 * numeric.abs().max(analytic.abs());
                assert!(
                    (numeric - analytic).abs() <= tol,
                    "layer {li} {} {j}: numeric {numeric} analytic {analytic}",
                    if bias { "bias" } else { "weight" }
                );
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn gradient_check_single_conv() {
        let layers = vec![LayerSpec::conv(1, 2, 3, 1, 1).without_relu(), LayerSpec::softmax()];
        let mut net: Network<f64> = Network::from_layers(layers).unwrap();
        net.init_he(4);
        check_gradients(net, 6, 7, 1);
    }

    #[test]
    fn gradient_check_strided_conv_and_tconv() {
        let layers = vec![
            LayerSpec::conv(1, 3, 3, 2, 1),
            LayerSpec::tconv(3, 2, 4, 2, 1).without_relu(),
            LayerSpec::softmax(),
        ];
        let mut net: Network<f64> = Network::from_layers(layers).unwrap();
        net.init_he(7);
        check_gradients(net, 8, 8, 2);
    }

    #[test]
    fn gradient_check_full_architecture_with_skips() {
        let spec = ArchSpec::parse(1.0, 4, "0-1-2-4-2-1-0").unwrap();
        let mut net: Network<f64> = build_arch(&spec).unwrap();
        net.init_he(11);
        // Nonzero biases keep ReLUs away from the all-zero kink.
        for p in net.params_mut() {
            p.bias.iter_mut().for_each(|b| *b = 0.05);
        }
        check_gradients(net, 16, 16, 3);
    }

    #[test]
    fn gradients_accumulate_and_scale() {
        let spec = ArchSpec::parse(1.0, 4, "0-4-0").unwrap();
        let mut net: Network<f64> = build_arch(&spec).unwrap();
        net.init_he(1);
        let x = Tensor::filled(1, 16, 16, 0.25);
        let gt = BinaryMask::from_fn(16, 16, |x, _| x < 8);
        let lp = LossParams::new(0.5).unwrap();
        let (_, g) = loss_and_gradients(&net, &x, &gt, &lp).unwrap();
        let mut twice = g.clone();
        twice.add_assign(&g);
        twice.scale(0.5);
        assert_eq!(twice, g);
    }
}
