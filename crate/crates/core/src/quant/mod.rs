//! Post-training 8-bit dynamic fixed-point quantization.
//!
//! Every parameterized layer carries its own fractional lengths: `w_fl` for weights, `a_in`
//! and `a_out` for activations and, for TCONV layers, `col_fl` for the GEMM output that is
//! scattered by col2im. Biases are 32-bit and live in the accumulator domain.

mod infer;

pub use infer::{
    quantized_forward, quantized_infer, quantized_infer_with, CountingDfpGemm, DfpGemm, RefDfpGemm,
};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcn::{forward_logits, prepare_input, ArchSpec, ForwardCache, LayerKind, LayerSpec, Network, RefGemm};
use crate::scalar::Scalar;
use crate::tensor::{gemm_ref, im2col, quantize_value, saturate_i32, Matrix, Tensor};

pub const BITWIDTH: u8 = 8;
/// Width of the GEMM accumulator buffer the plan must not overflow.
pub const ACC_BITWIDTH: u8 = 16;
/// Slack on the accumulator bound for rounding of weight and activation codes.
const ACC_HEADROOM: f64 = 1.125;
pub const MIN_FL: i32 = -16;
/// Default number of calibration images.
pub const CALIBRATION_SIZE: usize = 16;

/// Largest fractional length the search considers for bitwidth `bw`; also the result for
/// all-zero data.
pub fn max_fl(bw: u8) -> i32 {
    bw as i32 - 1 + 16
}

/// Largest `fl` in `[-16, bw - 1 + 16]` with `max_abs <= (2^(bw-1) - 1) * 2^-fl`. Values too
/// large even for `fl = -16` get `-16` and saturate.
pub fn choose_fl(max_abs: f64, bw: u8) -> i32 {
    let limit = ((1i64 << (bw - 1)) - 1) as f64;
    let mut fl = max_fl(bw);
    while fl > MIN_FL && max_abs > limit * 2f64.powi(-fl) {
        fl -= 1;
    }
    fl
}

pub fn choose_weight_fl<T: Scalar>(weights: &[T], bw: u8) -> Result<i32> {
    if weights.is_empty() {
        return Err(Error::invalid("no weights to choose a fractional length for"));
    }
    let m = weights
        .iter()
        .map(|w| w.to_f64_lossy().abs())
        .fold(0.0, f64::max);
    Ok(choose_fl(m, bw))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDfp {
    pub w_bw: u8,
    pub a_bw: u8,
    pub w_fl: i32,
    pub a_in: i32,
    pub a_out: i32,
    /// TCONV only: fractional length of the GEMM output before col2im (equals `a_out`
    /// elsewhere).
    pub col_fl: i32,
}

/// One record per parameterized layer, in layer order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DfpParams {
    pub layers: Vec<LayerDfp>,
}

/// Largest absolute activations seen during calibration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivationProfile {
    pub input_max: f64,
    /// Per parameterized layer, after ReLU and skip addition.
    pub output_max: Vec<f64>,
    /// Per parameterized layer; the TCONV GEMM output, 0 for CONV.
    pub col_max: Vec<f64>,
    /// Per parameterized layer: largest `|bias| + sum |w| |x|` over GEMM outputs, which bounds
    /// every partial sum in any accumulation order.
    pub acc_max: Vec<f64>,
    pub images: usize,
}

impl ActivationProfile {
    /// Element-wise maximum of two profiles.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.output_max.len() != other.output_max.len() {
            return Err(Error::dim("profiles cover different networks"));
        }
        let mx = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x.max(*y)).collect();
        Ok(ActivationProfile {
            input_max: self.input_max.max(other.input_max),
            output_max: mx(&self.output_max, &other.output_max),
            col_max: mx(&self.col_max, &other.col_max),
            acc_max: mx(&self.acc_max, &other.acc_max),
            images: self.images + other.images,
        })
    }
}

fn max_abs<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.to_f64_lossy().abs()).fold(0.0, f64::max)
}

fn param_layers(layers: &[LayerSpec]) -> usize {
    layers.iter().filter(|l| l.has_params()).count()
}

fn profile_one<T: Scalar>(net: &Network<T>, image: &Tensor<T>) -> Result<ActivationProfile> {
    let (x, _) = prepare_input(image, net.scale(), net.input_multiple())?;
    let mut cache = ForwardCache::default();
    forward_logits(net, &x, &mut RefGemm, Some(&mut cache))?;
    let mut col_max = Vec::with_capacity(cache.outputs.len());
    let mut acc_max = Vec::with_capacity(cache.outputs.len());
    for (i, l) in net.layers().iter().take(cache.outputs.len()).enumerate() {
        let p = &net.params()[i];
        let abs_w = p.weights.map(|v| v.abs());
        if l.kind == LayerKind::TConv {
            let x = cache.inputs[i].to_matrix();
            col_max.push(max_abs(gemm_ref(&p.weights, &x)?.data()));
            acc_max.push(max_abs(gemm_ref(&abs_w, &x.map(|v| v.abs()))?.data()));
        } else {
            col_max.push(0.0);
            let cols = im2col(&cache.inputs[i], l.filter, l.stride, l.padding)?.map(|v| v.abs());
            let acc = gemm_ref(&abs_w, &cols)?;
            let mut m = 0.0f64;
            for r in 0..acc.rows() {
                let b = p.bias[r].to_f64_lossy().abs();
                m = m.max(b + max_abs(acc.row(r)));
            }
            acc_max.push(m);
        }
    }
    Ok(ActivationProfile {
        // pixel range, not the observed maximum
        input_max: 1.0,
        output_max: cache.outputs.iter().map(|t| max_abs(t.data())).collect(),
        col_max,
        acc_max,
        images: 1,
    })
}

/// Runs float forward passes over `images` (intensities in `[0, 1]`) and records the
/// largest activation of every layer.
pub fn profile_activations<T: Scalar>(net: &Network<T>, images: &[Tensor<T>]) -> Result<ActivationProfile> {
    let mut it = images.iter();
    let first = it
        .next()
        .ok_or_else(|| Error::invalid("calibration set is empty"))?;
    let mut p = profile_one(net, first)?;
    for img in it {
        p = p.merge(&profile_one(net, img)?)?;
    }
    Ok(p)
}

/// Fractional lengths from weights and a calibration profile. Layer `i` reads the output of
/// layer `i - 1`, so `a_in(i) = a_out(i - 1)`.
///
/// Products accumulate at `w_fl + a_in`. When the profiled accumulator bound would overflow
/// the 16-bit accumulator at that length, `w_fl` is lowered until it fits.
pub fn plan_dfp<T: Scalar>(net: &Network<T>, profile: &ActivationProfile) -> Result<DfpParams> {
    let n = param_layers(net.layers());
    if profile.output_max.len() != n || profile.col_max.len() != n || profile.acc_max.len() != n {
        return Err(Error::dim("profile does not match the network"));
    }
    let mut layers = Vec::with_capacity(n);
    let mut a_in = choose_fl(profile.input_max, BITWIDTH);
    for (i, l) in net.layers().iter().take(n).enumerate() {
        let w = net.params()[i].weights.data();
        let mut w_fl = if w.is_empty() { max_fl(BITWIDTH) } else { choose_weight_fl(w, BITWIDTH)? };
        if profile.acc_max[i] > 0.0 {
            let acc_fl = choose_fl(profile.acc_max[i] * ACC_HEADROOM, ACC_BITWIDTH);
            w_fl = w_fl.min(acc_fl - a_in).max(MIN_FL);
        }
        let a_out = choose_fl(profile.output_max[i], BITWIDTH);
        let col_fl = if l.kind == LayerKind::TConv {
            choose_fl(profile.col_max[i], BITWIDTH)
        } else {
            a_out
        };
        layers.push(LayerDfp {
            w_bw: BITWIDTH,
            a_bw: BITWIDTH,
            w_fl,
            a_in,
            a_out,
            col_fl,
        });
        a_in = a_out;
    }
    Ok(DfpParams { layers })
}

/// `count` distinct indices out of `0..total`, sorted, chosen with a seeded generator.
pub fn select_calibration(total: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, total, count.min(total)).into_vec();
    idx.sort_unstable();
    idx
}

/// Quantized parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantLayer {
    pub weights: Matrix<i8>,
    /// At `w_fl + a_in` for CONV and at `col_fl` for TCONV.
    pub bias: Vec<i32>,
}

impl QuantLayer {
    pub fn bias_fl(l: &LayerSpec, d: &LayerDfp) -> i32 {
        if l.kind == LayerKind::TConv {
            d.col_fl
        } else {
            d.w_fl + d.a_in
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedNetwork {
    arch: Option<ArchSpec>,
    layers: Vec<LayerSpec>,
    qlayers: Vec<QuantLayer>,
    dfp: DfpParams,
}

impl QuantizedNetwork {
    /// Checks that parameters, fractional lengths and layer specs agree.
    pub fn new(
        arch: Option<ArchSpec>,
        layers: Vec<LayerSpec>,
        qlayers: Vec<QuantLayer>,
        dfp: DfpParams,
    ) -> Result<Self> {
        // same structural checks as the float network
        Network::<f32>::from_layers(layers.clone())?;
        let n = param_layers(&layers);
        if qlayers.len() != n || dfp.layers.len() != n {
            return Err(Error::invalid(format!(
                "{n} parameterized layers but {} weight blocks and {} DFP records",
                qlayers.len(),
                dfp.layers.len()
            )));
        }
        for (i, ((l, q), d)) in layers.iter().zip(&qlayers).zip(&dfp.layers).enumerate() {
            if (q.weights.rows(), q.weights.cols()) != l.weight_shape() || q.bias.len() != l.out_channels {
                return Err(Error::invalid(format!("layer {i} parameter shapes do not match")));
            }
            if d.w_bw != BITWIDTH || d.a_bw != BITWIDTH {
                return Err(Error::invalid(format!("layer {i} bitwidth is not 8")));
            }
            if i > 0 && d.a_in != dfp.layers[i - 1].a_out {
                return Err(Error::invalid(format!("layer {i} a_in does not match layer {} a_out", i - 1)));
            }
        }
        Ok(QuantizedNetwork {
            arch,
            layers,
            qlayers,
            dfp,
        })
    }

    pub fn arch(&self) -> Option<&ArchSpec> {
        self.arch.as_ref()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn qlayers(&self) -> &[QuantLayer] {
        &self.qlayers
    }

    pub fn dfp(&self) -> &DfpParams {
        &self.dfp
    }

    pub fn scale(&self) -> f64 {
        self.arch.as_ref().map_or(1.0, |a| a.scale)
    }

    pub fn input_multiple(&self) -> usize {
        let mut m = 1usize;
        let mut best = 1usize;
        for l in &self.layers {
            match l.kind {
                LayerKind::Conv => m *= l.stride,
                LayerKind::TConv => m /= l.stride.max(1),
                LayerKind::Softmax => {}
            }
            best = best.max(m);
        }
        best
    }

    /// Float network holding the dequantized weights and biases.
    pub fn dequantize(&self) -> Result<Network<f64>> {
        let mut net: Network<f64> = Network::from_layers(self.layers.clone())?;
        for (i, ((l, q), d)) in self.layers.iter().zip(&self.qlayers).zip(&self.dfp.layers).enumerate() {
            let bfl = QuantLayer::bias_fl(l, d);
            let w = q.weights.map(|c| c as f64 * 2f64.powi(-d.w_fl));
            let b = q.bias.iter().map(|&c| c as f64 * 2f64.powi(-bfl)).collect();
            net.set_params(i, w, b)?;
        }
        Ok(net.with_arch(self.arch.clone()))
    }
}

pub fn quantize_bias(b: f64, fl: i32) -> i32 {
    saturate_i32((b * 2f64.powi(fl)).round().clamp(i64::MIN as f64, i64::MAX as f64) as i64)
}

/// Rounds weights to `w_fl` codes and biases to 32-bit accumulator codes.
pub fn quantize_network<T: Scalar>(net: &Network<T>, params: &DfpParams) -> Result<QuantizedNetwork> {
    let n = param_layers(net.layers());
    if params.layers.len() != n {
        return Err(Error::invalid(format!(
            "DFP parameters cover {} layers, network has {n}",
            params.layers.len()
        )));
    }
    let qlayers = net
        .layers()
        .iter()
        .zip(net.params())
        .zip(&params.layers)
        .map(|((l, p), d)| {
            let bfl = QuantLayer::bias_fl(l, d);
            QuantLayer {
                weights: p.weights.map(|w| quantize_value(w.to_f64_lossy(), d.w_fl)),
                bias: p.bias.iter().map(|b| quantize_bias(b.to_f64_lossy(), bfl)).collect(),
            }
        })
        .collect();
    QuantizedNetwork::new(
        net.arch().cloned(),
        net.layers().to_vec(),
        qlayers,
        params.clone(),
    )
}

/// Profiles on `images`, plans fractional lengths and quantizes.
pub fn calibrate_and_quantize<T: Scalar>(net: &Network<T>, images: &[Tensor<T>]) -> Result<QuantizedNetwork> {
    let profile = profile_activations(net, images)?;
    let params = plan_dfp(net, &profile)?;
    quantize_network(net, &params)
}
