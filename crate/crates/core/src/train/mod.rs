//! Training with a class-weighted cross-entropy loss and SGD with momentum.
//!
//! Networks are trained without batch normalization; see [`crate::fcn::fold_bn`] for
//! deploying BN-trained weights.

mod backward;

pub use backward::{backward, loss_and_gradients, Gradients};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcn::{prepare_input, FloatGemm, LayerParams, Network};
use crate::mask::BinaryMask;
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, nearest_resize, pad_to, Matrix, Tensor};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPSILON: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    /// Iris-pixel fraction of the training masks.
    Dataset,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub alpha_mode: AlphaMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            epochs: 40,
            batch_size: 4,
            seed: 1,
            alpha_mode: AlphaMode::Dataset,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if let AlphaMode::Fixed(a) = self.alpha_mode {
            LossParams::new(a)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    alpha: f64,
}

impl LossParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(LossParams { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Iris pixels over all pixels, pooled across the set.
pub fn compute_alpha<'a>(masks: impl IntoIterator<Item = &'a BinaryMask>) -> Result<f64> {
    let (mut iris, mut total) = (0usize, 0usize);
    for m in masks {
        iris += m.count();
        total += m.width() * m.height();
    }
    if total == 0 {
        return Err(Error::invalid("alpha needs at least one non-empty mask"));
    }
    Ok(iris as f64 / total as f64)
}

fn iris_probs<T: Scalar>(probs: &Tensor<T>) -> Result<&[T]> {
    match probs.channels() {
        1 => Ok(probs.data()),
        2 => Ok(probs.channel(1)),
        c => Err(Error::dim(format!("probability map with {c} channels"))),
    }
}

/// `-(1/P) * sum((1 - a) y log p + a (1 - y) log(1 - p))` over the `P` pixels, with `p` the
/// iris probability (channel 1 of a softmax output, or a 1-channel map).
pub fn weighted_bce_loss<T: Scalar>(probs: &Tensor<T>, gt: &BinaryMask, params: &LossParams) -> Result<T> {
    let p = iris_probs(probs)?;
    if gt.width() != probs.width() || gt.height() != probs.height() {
        return Err(Error::dim("probability map and ground truth differ in size"));
    }
    let a = params.alpha;
    let mut sum = 0.0f64;
    for (&pi, &yi) in p.iter().zip(gt.bits()) {
        let pi = pi.to_f64_lossy().clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
        sum += if yi {
            (1.0 - a) * pi.ln()
        } else {
            a * (1.0 - pi).ln()
        };
    }
    Ok(T::from_f64_lossy(-sum / p.len() as f64))
}

/// `v <- beta v - lr g`, `w <- w + v`.
pub fn sgd_momentum_update<T: Scalar>(weights: &mut [T], velocity: &mut [T], grads: &[T], lr: T, beta: T) {
    debug_assert_eq!(weights.len(), velocity.len());
    debug_assert_eq!(weights.len(), grads.len());
    for ((w, v), &g) in weights.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = beta * *v - lr * g;
        *w += *v;
    }
}

/// Applies [`sgd_momentum_update`] to every weight and bias of a network.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut [LayerParams<T>],
    velocity: &mut [LayerParams<T>],
    grads: &Gradients<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != velocity.len() || params.len() != grads.layers.len() {
        return Err(Error::dim("parameter, velocity and gradient layer counts differ"));
    }
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let beta = T::from_f64_lossy(cfg.momentum);
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grads.layers) {
        if p.bias.len() != g.bias.len() || p.weights.data().len() != g.weights.data().len() {
            return Err(Error::dim("gradient shape differs from parameters"));
        }
        sgd_momentum_update(p.weights.data_mut(), v.weights.data_mut(), g.weights.data(), lr, beta);
        sgd_momentum_update(&mut p.bias, &mut v.bias, &g.bias, lr, beta);
    }
    Ok(())
}

/// Cache-friendly GEMM for training; fixed i-k-j order, so results are deterministic.
#[derive(Clone, Copy, Debug, Default)]
pub struct FastGemm;

impl<T: Scalar> FloatGemm<T> for FastGemm {
    fn gemm(&mut self, _layer: usize, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
        if a.cols() != b.rows() {
            return Err(Error::dim("gemm shape mismatch"));
        }
        let mut c = vec![T::zero(); a.rows() * b.cols()];
        matmul_into(a.data(), b.data(), &mut c, a.rows(), a.cols(), b.cols());
        Matrix::from_vec(a.rows(), b.cols(), c)
    }
}

/// One training example at network resolution.
#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub input: Tensor<T>,
    pub target: BinaryMask,
}

impl<T: Scalar> TrainSample<T> {
    /// Scales and pads an image in `[0, 1]` and its full-resolution mask the same way
    /// inference does. Padding is labeled non-iris.
    pub fn prepare(net: &Network<T>, image: &Tensor<T>, gt: &BinaryMask) -> Result<Self> {
        if gt.width() != image.width() || gt.height() != image.height() {
            return Err(Error::dim("image and mask differ in size"));
        }
        let (input, _) = prepare_input(image, net.scale(), net.input_multiple())?;
        let m = gt.to_tensor();
        let scaled = if net.scale() == 1.0 {
            m
        } else {
            nearest_resize(&m, net.scale())?
        };
        let padded = pad_to(&scaled, input.height(), input.width())?;
        Ok(TrainSample {
            input,
            target: BinaryMask::from_tensor(&padded)?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub alpha: f64,
    pub epoch_losses: Vec<f64>,
}

/// Minibatch SGD with momentum. Batch gradients are computed in parallel and summed in
/// sample order, so the result depends only on the seed.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    data: &[TrainSample<T>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let alpha = match cfg.alpha_mode {
        AlphaMode::Dataset => compute_alpha(data.iter().map(|s| &s.target))?,
        AlphaMode::Fixed(a) => a,
    };
    let loss_params = LossParams::new(alpha)?;
    let mut velocity = Gradients::zeros_like(net).layers;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport {
        alpha,
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let net_ref = &*net;
            let results: Vec<Result<(T, Gradients<T>)>> = batch
                .par_iter()
                .map(|&i| loss_and_gradients(net_ref, &data[i].input, &data[i].target, &loss_params))
                .collect();
            let mut total = Gradients::zeros_like(net);
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss.to_f64_lossy();
                total.add_assign(&g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: "loss is not finite".into(),
                });
            }
            total.scale(T::from_f64_lossy(1.0 / batch.len() as f64));
            sgd_momentum_step(net.params_mut(), &mut velocity, &total, cfg)?;
            epoch_loss += batch_loss;
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: "loss is not finite".into(),
            });
        }
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcn::{build_arch, ArchSpec, LayerSpec};

    #[test]
    fn alpha_examples() {
        let all = BinaryMask::from_fn(4, 4, |_, _| true);
        assert_eq!(compute_alpha([&all, &all]).unwrap(), 1.0);
        let half = BinaryMask::from_fn(4, 4, |x, _| x < 2);
        assert_eq!(compute_alpha([&half]).unwrap(), 0.5);
        let fifth = BinaryMask::from_fn(10, 2, |x, _| x < 2);
        assert!((compute_alpha([&fifth, &fifth]).unwrap() - 0.2).abs() < 1e-15);
        assert!(compute_alpha(std::iter::empty()).is_err());
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let gt = BinaryMask::from_fn(3, 2, |x, y| (x + y) % 2 == 0);
        let p = Tensor::from_vec(1, 2, 3, gt.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .unwrap();
        let l: f64 = weighted_bce_loss(&p, &gt, &LossParams::new(0.3).unwrap()).unwrap();
        assert!(l >= 0.0 && l < 1e-6);
    }

    #[test]
    fn single_pixel_hand_value() {
        let gt = BinaryMask::from_bits(1, 1, vec![true]).unwrap();
        let p = Tensor::from_vec(1, 1, 1, vec![0.5f64]).unwrap();
        let l = weighted_bce_loss(&p, &gt, &LossParams::new(0.5).unwrap()).unwrap();
        assert!((l - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn half_alpha_is_half_unweighted() {
        let gt = BinaryMask::from_fn(5, 4, |x, y| (x * 3 + y) % 4 == 0);
        let probs: Vec<f64> = (0..20).map(|i| 0.05 + 0.9 * ((i * 7) % 20) as f64 / 20.0).collect();
        let p = Tensor::from_vec(1, 4, 5, probs.clone()).unwrap();
        let l = weighted_bce_loss(&p, &gt, &LossParams::new(0.5).unwrap()).unwrap();
        let unweighted: f64 = -probs
            .iter()
            .zip(gt.bits())
            .map(|(&p, &y)| if y { p.ln() } else { (1.0 - p).ln() })
            .sum::<f64>()
            / 20.0;
        assert!((l - 0.5 * unweighted).abs() < 1e-12);
    }

    #[test]
    fn loss_dimension_mismatch() {
        let gt = BinaryMask::new(2, 2);
        let p = Tensor::<f64>::filled(1, 3, 2, 0.5);
        assert!(weighted_bce_loss(&p, &gt, &LossParams::new(0.5).unwrap()).is_err());
        assert!(LossParams::new(1.5).is_err());
    }

    #[test]
    fn sgd_examples() {
        // beta = 0 is plain SGD
        let mut w = vec![1.0f64, -2.0];
        let mut v = vec![0.0; 2];
        sgd_momentum_update(&mut w, &mut v, &[0.5, -1.0], 0.1, 0.0);
        assert_eq!(w, vec![0.95, -1.9]);
        // zero gradient just coasts on the velocity
        let mut w = vec![1.0f64];
        let mut v = vec![0.4];
        sgd_momentum_update(&mut w, &mut v, &[0.0], 0.1, 0.5);
        assert_eq!(w, vec![1.2]);
        // two steps, constant gradient: v1 = -0.1 g, v2 = 0.9 v1 - 0.1 g = -0.19 g
        let g = 2.0f64;
        let mut w = vec![0.0];
        let mut v = vec![0.0];
        sgd_momentum_update(&mut w, &mut v, &[g], 0.1, 0.9);
        sgd_momentum_update(&mut w, &mut v, &[g], 0.1, 0.9);
        assert!((v[0] + 0.19 * g).abs() < 1e-12);
        assert!((w[0] + 0.29 * g).abs() < 1e-12);
    }

    #[test]
    fn plain_sgd_descends_a_quadratic() {
        // f(w) = 0.5 * sum(c_i w_i^2), grad = c_i w_i
        let c = [1.0f64, 3.0, 0.5];
        let mut w = vec![1.0, -2.0, 4.0];
        let mut v = vec![0.0; 3];
        let f = |w: &[f64]| 0.5 * w.iter().zip(&c).map(|(w, c)| c * w * w).sum::<f64>();
        let mut last = f(&w);
        for _ in 0..20 {
            let g: Vec<f64> = w.iter().zip(&c).map(|(w, c)| c * w).collect();
            sgd_momentum_update(&mut w, &mut v, &g, 0.1, 0.0);
            let now = f(&w);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let spec = ArchSpec::parse(1.0, 4, "0-4-0").unwrap();
        let mut net: Network<f32> = build_arch(&spec).unwrap();
        net.init_he(2);
        let before = net.clone();
        let img = Tensor::from_vec(1, 16, 16, (0..256).map(|i| (i % 5) as f32 / 4.0).collect()).unwrap();
        let gt = BinaryMask::from_fn(16, 16, |x, _| x > 7);
        let sample = TrainSample::prepare(&net, &img, &gt).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..TrainConfig::default()
        };
        let report = train(&mut net, &[sample], &cfg).unwrap();
        assert_eq!(report.epoch_losses.len(), 1);
        assert_eq!(net, before);
    }

    #[test]
    fn toy_pixel_task_loss_decreases() {
        // A single 1x1 CONV must learn iris = bright pixel.
        let layers = vec![LayerSpec::conv(1, 2, 1, 1, 0).without_relu(), LayerSpec::softmax()];
        let mut net: Network<f64> = Network::from_layers(layers).unwrap();
        net.init_he(5);
        let data: Vec<TrainSample<f64>> = (0..4)
            .map(|s| {
                let vals: Vec<f64> = (0..64).map(|i| ((i * 7 + s * 3) % 10) as f64 / 10.0).collect();
                let gt = BinaryMask::from_bits(8, 8, vals.iter().map(|&v| v > 0.45).collect()).unwrap();
                TrainSample {
                    input: Tensor::from_vec(1, 8, 8, vals).unwrap(),
                    target: gt,
                }
            })
            .collect();
        let cfg = TrainConfig {
            learning_rate: 0.5,
            momentum: 0.5,
            epochs: 10,
            batch_size: 4,
            seed: 3,
            alpha_mode: AlphaMode::Fixed(0.5),
        };
        let report = train(&mut net, &data, &cfg).unwrap();
        for w in report.epoch_losses.windows(2) {
            assert!(w[1] < w[0], "{:?}", report.epoch_losses);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let layers = vec![LayerSpec::conv(1, 2, 1, 1, 0).without_relu(), LayerSpec::softmax()];
        let mut net: Network<f64> = Network::from_layers(layers).unwrap();
        net.params_mut()[0].weights.data_mut()[0] = f64::NAN;
        let sample = TrainSample {
            input: Tensor::filled(1, 2, 2, 0.5),
            target: BinaryMask::new(2, 2),
        };
        let err = train(&mut net, &[sample], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Training { epoch: 0, .. }));
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
