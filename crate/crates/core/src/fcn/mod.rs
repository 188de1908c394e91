//! The FCN family: architecture strings, network construction, float inference, BN folding
//! and FLOP accounting.
//!
//! An architecture is a scale, a channel base `N` and a palindromic list of group numbers
//! such as `0-1-2-4-2-1-0`. Encoder group 0 is one CONV, groups 1-3 are a strided CONV plus
//! a CONV, group 4 is the bottleneck. Each decoder group is a TCONV followed by a CONV, and
//! the TCONV output is summed with the last encoder CONV of the same group.

mod bn;
mod flops;
mod forward;

pub use bn::{batch_norm, fold_bn, BnParams};
pub use flops::{count_flops, layer_flops};
pub use forward::{
    class_map_to_mask, forward_logits, infer, infer_with, predict_logits, prepare_input,
    ForwardCache, FloatGemm, RefGemm,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv_output_dim, Matrix};

pub const ALLOWED_SCALES: [f64; 3] = [1.0, 0.5, 0.25];
pub const ALLOWED_CHANNELS: [usize; 5] = [4, 6, 8, 12, 16];
const BOTTLENECK_GROUP: u8 = 4;
/// The bottleneck sits at this fraction of the original (unscaled) resolution.
const BOTTLENECK_DIVISOR: f64 = 16.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub scale: f64,
    pub n_channels: usize,
    pub groups: Vec<u8>,
}

impl ArchSpec {
    pub fn new(scale: f64, n_channels: usize, groups: Vec<u8>) -> Result<Self> {
        let spec = ArchSpec {
            scale,
            n_channels,
            groups,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `scale`, `N` and a dash-separated group list, e.g. `(0.5, 8, "0-1-2-4-2-1-0")`.
    pub fn parse(scale: f64, n_channels: usize, groups: &str) -> Result<Self> {
        Self::new(scale, n_channels, parse_groups(groups)?)
    }

    /// The 18-layer baseline: full resolution, `N = 16`, every group.
    pub fn baseline() -> Self {
        ArchSpec {
            scale: 1.0,
            n_channels: 16,
            groups: vec![0, 1, 2, 3, 4, 3, 2, 1, 0],
        }
    }

    pub fn arch_string(&self) -> String {
        self.groups
            .iter()
            .map(|g| g.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_SCALES.contains(&self.scale) {
            return Err(Error::invalid(format!(
                "scale {} not in {:?}",
                self.scale, ALLOWED_SCALES
            )));
        }
        if !ALLOWED_CHANNELS.contains(&self.n_channels) {
            return Err(Error::invalid(format!(
                "N = {} not in {:?}",
                self.n_channels, ALLOWED_CHANNELS
            )));
        }
        let g = &self.groups;
        if g.iter().filter(|&&v| v == BOTTLENECK_GROUP).count() != 1 {
            return Err(Error::invalid("group list needs exactly one bottleneck group 4"));
        }
        if g.iter().any(|&v| v > BOTTLENECK_GROUP) {
            return Err(Error::invalid("group numbers must lie in 0..=4"));
        }
        if g.first() != Some(&0) {
            return Err(Error::invalid("group list must start with group 0"));
        }
        if g.iter().ne(g.iter().rev()) {
            return Err(Error::invalid("group list must be a palindrome"));
        }
        let enc = self.encoder_groups();
        if enc.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("encoder groups must be strictly increasing"));
        }
        self.bottleneck_stride().map(|_| ())
    }

    /// Groups up to and including the bottleneck.
    pub fn encoder_groups(&self) -> &[u8] {
        let b = self
            .groups
            .iter()
            .position(|&v| v == BOTTLENECK_GROUP)
            .unwrap_or(self.groups.len().saturating_sub(1));
        &self.groups[..=b]
    }

    /// Decoder groups in execution order (the list after the bottleneck).
    pub fn decoder_groups(&self) -> &[u8] {
        &self.groups[self.encoder_groups().len()..]
    }

    /// Stride of the bottleneck's downsampling CONV. Retained groups 1-3 each halve the
    /// resolution; the bottleneck absorbs whatever is left to reach 1/16 of the original
    /// resolution.
    pub fn bottleneck_stride(&self) -> Result<usize> {
        let halvings = self
            .encoder_groups()
            .iter()
            .filter(|&&v| (1..BOTTLENECK_GROUP).contains(&v))
            .count() as i32;
        let needed = BOTTLENECK_DIVISOR * self.scale / 2f64.powi(halvings);
        let stride = needed.round() as usize;
        if (needed - stride as f64).abs() > 1e-9 || stride < 2 || !stride.is_power_of_two() {
            return Err(Error::invalid(format!(
                "groups {} at scale {} cannot place the bottleneck at 1/16 resolution",
                self.arch_string(),
                self.scale
            )));
        }
        Ok(stride)
    }

    /// Total downsampling between the network input and the bottleneck.
    pub fn downsample_factor(&self) -> usize {
        (BOTTLENECK_DIVISOR * self.scale).round() as usize
    }

    /// Number of layers including the final SOFTMAX.
    pub fn layer_count(&self) -> usize {
        build_layers(self).map(|l| l.len()).unwrap_or(0)
    }
}

pub fn parse_groups(s: &str) -> Result<Vec<u8>> {
    s.trim()
        .split('-')
        .map(|t| {
            t.trim()
                .parse::<u8>()
                .map_err(|_| Error::invalid(format!("bad group number {t:?} in {s:?}")))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    TConv,
    Softmax,
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Conv => 0,
            LayerKind::TConv => 1,
            LayerKind::Softmax => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(LayerKind::Conv),
            1 => Ok(LayerKind::TConv),
            2 => Ok(LayerKind::Softmax),
            other => Err(Error::Format(format!("unknown layer kind code {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub filter: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub group: u8,
    pub relu: bool,
    /// Layer whose output is added element-wise to this layer's (post-ReLU) output.
    pub skip_from: Option<usize>,
}

impl LayerSpec {
    pub fn conv(in_c: usize, out_c: usize, filter: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            filter,
            stride,
            padding,
            in_channels: in_c,
            out_channels: out_c,
            group: 0,
            relu: true,
            skip_from: None,
        }
    }

    pub fn tconv(in_c: usize, out_c: usize, filter: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            kind: LayerKind::TConv,
            ..Self::conv(in_c, out_c, filter, stride, padding)
        }
    }

    pub fn softmax() -> Self {
        LayerSpec {
            kind: LayerKind::Softmax,
            filter: 0,
            stride: 0,
            padding: 0,
            in_channels: 2,
            out_channels: 2,
            group: 0,
            relu: false,
            skip_from: None,
        }
    }

    pub fn with_group(mut self, g: u8) -> Self {
        self.group = g;
        self
    }

    pub fn without_relu(mut self) -> Self {
        self.relu = false;
        self
    }

    pub fn with_skip(mut self, from: usize) -> Self {
        self.skip_from = Some(from);
        self
    }

    /// `(rows, cols)` of the weight matrix used as GEMM operand A.
    ///
    /// CONV: `out x (in*k*k)`; TCONV: `(out*k*k) x in`.
    pub fn weight_shape(&self) -> (usize, usize) {
        let kk = self.filter * self.filter;
        match self.kind {
            LayerKind::Conv => (self.out_channels, self.in_channels * kk),
            LayerKind::TConv => (self.out_channels * kk, self.in_channels),
            LayerKind::Softmax => (0, 0),
        }
    }

    pub fn has_params(&self) -> bool {
        self.kind != LayerKind::Softmax
    }

    /// Output spatial dims for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match self.kind {
            LayerKind::Conv => match (
                conv_output_dim(h, self.filter, self.stride, self.padding),
                conv_output_dim(w, self.filter, self.stride, self.padding),
            ) {
                (Some(oh), Some(ow)) => Ok((oh, ow)),
                _ => Err(Error::dim(format!("{h}x{w} input too small for layer"))),
            },
            LayerKind::TConv => {
                let (oh, ow) = (h * self.stride, w * self.stride);
                // The TCONV output must be the input of the mirrored CONV.
                if conv_output_dim(oh, self.filter, self.stride, self.padding) != Some(h)
                    || conv_output_dim(ow, self.filter, self.stride, self.padding) != Some(w)
                {
                    return Err(Error::dim("transposed convolution geometry is not invertible"));
                }
                Ok((oh, ow))
            }
            LayerKind::Softmax => Ok((h, w)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    arch: Option<ArchSpec>,
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams<T>>,
}

fn tconv_for_stride(in_c: usize, out_c: usize, stride: usize) -> LayerSpec {
    // 4x4/2 with padding 1 doubles exactly; larger strides use a k = s, p = 0 kernel.
    let filter = stride.max(4);
    let padding = (filter - stride) / 2;
    LayerSpec::tconv(in_c, out_c, filter, stride, padding)
}

fn build_layers(spec: &ArchSpec) -> Result<Vec<LayerSpec>> {
    spec.validate()?;
    let n = spec.n_channels;
    let s4 = spec.bottleneck_stride()?;
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut skip_src = [None; 4];
    let mut c = 1;
    for &g in spec.encoder_groups() {
        match g {
            0 => {
                layers.push(LayerSpec::conv(c, n, 3, 1, 1).with_group(0));
                c = n;
            }
            1..=3 => {
                layers.push(LayerSpec::conv(c, 2 * n, 3, 2, 1).with_group(g));
                layers.push(LayerSpec::conv(2 * n, 2 * n, 3, 1, 1).with_group(g));
                c = 2 * n;
            }
            _ => {
                layers.push(LayerSpec::conv(c, 2 * n, 3, s4, 1).with_group(g));
                layers.push(LayerSpec::conv(2 * n, 4 * n, 3, 1, 1).with_group(g));
                c = 4 * n;
            }
        }
        if g < BOTTLENECK_GROUP {
            skip_src[g as usize] = Some(layers.len() - 1);
        }
    }
    let mut first = true;
    for &g in spec.decoder_groups() {
        let stride = if first { s4 } else { 2 };
        first = false;
        let out = if g == 0 { n } else { 2 * n };
        let partner = skip_src[g as usize]
            .ok_or_else(|| Error::invalid(format!("decoder group {g} has no encoder partner")))?;
        layers.push(tconv_for_stride(c, out, stride).with_group(g).with_skip(partner));
        c = out;
        if g == 0 {
            layers.push(LayerSpec::conv(c, 2, 1, 1, 0).with_group(0).without_relu());
            c = 2;
        } else {
            layers.push(LayerSpec::conv(c, 2 * n, 3, 1, 1).with_group(g));
            c = 2 * n;
        }
    }
    if c != 2 {
        return Err(Error::invalid("architecture does not end in a 2-class layer"));
    }
    layers.push(LayerSpec::softmax());
    Ok(layers)
}

/// Realizes an architecture with zero weights and biases.
pub fn build_arch<T: Scalar>(spec: &ArchSpec) -> Result<Network<T>> {
    let layers = build_layers(spec)?;
    let mut net = Network::from_layers(layers)?;
    net.arch = Some(spec.clone());
    Ok(net)
}

impl<T: Scalar> Network<T> {
    /// Builds a network from an explicit layer list with zero parameters. The list must end
    /// in a SOFTMAX over a 2-channel layer.
    pub fn from_layers(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.last().map(|l| l.kind) != Some(LayerKind::Softmax) {
            return Err(Error::invalid("layer list must end with SOFTMAX"));
        }
        if layers[..layers.len() - 1]
            .iter()
            .any(|l| l.kind == LayerKind::Softmax)
        {
            return Err(Error::invalid("SOFTMAX may only be the last layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.has_params() && (l.filter == 0 || l.stride == 0 || l.out_channels == 0) {
                return Err(Error::invalid(format!("layer {i} has a zero-sized filter")));
            }
            if i > 0 && l.has_params() && layers[i - 1].out_channels != l.in_channels {
                return Err(Error::invalid(format!("layer {i} input channels do not chain")));
            }
            if let Some(p) = l.skip_from {
                if p >= i {
                    return Err(Error::invalid(format!("layer {i} skip source {p} is not earlier")));
                }
            }
        }
        let params = layers
            .iter()
            .map(|l| {
                let (r, c) = l.weight_shape();
                LayerParams {
                    weights: Matrix::zeros(r, c),
                    bias: vec![T::zero(); if l.has_params() { l.out_channels } else { 0 }],
                }
            })
            .collect();
        Ok(Network {
            arch: None,
            layers,
            params,
        })
    }

    pub fn arch(&self) -> Option<&ArchSpec> {
        self.arch.as_ref()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    /// Input scaling applied before the first layer (1 for hand-built networks).
    pub fn scale(&self) -> f64 {
        self.arch.as_ref().map_or(1.0, |a| a.scale)
    }

    /// Network input dims must be a multiple of this (the product of all strides on the
    /// encoder path).
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

    /// Replaces layer `i`'s parameters after checking shapes.
    pub fn set_params(&mut self, i: usize, weights: Matrix<T>, bias: Vec<T>) -> Result<()> {
        let l = self
            .layers
            .get(i)
            .ok_or_else(|| Error::dim(format!("no layer {i}")))?;
        if (weights.rows(), weights.cols()) != l.weight_shape() || bias.len() != self.params[i].bias.len()
        {
            return Err(Error::dim(format!("parameter shape mismatch for layer {i}")));
        }
        self.params[i] = LayerParams { weights, bias };
        Ok(())
    }

    pub(crate) fn with_arch(mut self, arch: Option<ArchSpec>) -> Self {
        self.arch = arch;
        self
    }

    /// Uniform He initialization scaled by fan-in, zero biases.
    pub fn init_he(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, p) in self.layers.iter().zip(self.params.iter_mut()) {
            let fan_in = match l.kind {
                LayerKind::Conv => l.in_channels * l.filter * l.filter,
                LayerKind::TConv => {
                    (l.in_channels * l.filter * l.filter / (l.stride * l.stride)).max(1)
                }
                LayerKind::Softmax => continue,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in p.weights.data_mut() {
                *w = T::from_f64_lossy(rng.gen_range(-bound..bound));
            }
            p.bias.iter_mut().for_each(|b| *b = T::zero());
        }
    }

    /// Per-layer input/output dims for an `h x w` network input; checks the channel chain and
    /// that skip partners match.
    pub fn shapes(&self, h: usize, w: usize) -> Result<Vec<LayerShape>> {
        let mut shapes: Vec<LayerShape> = Vec::with_capacity(self.layers.len());
        let mut cur = (1usize, h, w);
        for (i, l) in self.layers.iter().enumerate() {
            if l.kind != LayerKind::Softmax && cur.0 != l.in_channels {
                return Err(Error::dim(format!(
                    "layer {i} expects {} channels, got {}",
                    l.in_channels, cur.0
                )));
            }
            if l.kind == LayerKind::Softmax && cur.0 != 2 {
                return Err(Error::dim("SOFTMAX input must have 2 channels"));
            }
            let (oh, ow) = l.output_hw(cur.1, cur.2)?;
            let out = (l.out_channels, oh, ow);
            if let Some(p) = l.skip_from {
                if shapes[p].output != out {
                    return Err(Error::dim(format!(
                        "skip from layer {p} {:?} does not match layer {i} {:?}",
                        shapes[p].output, out
                    )));
                }
            }
            shapes.push(LayerShape { input: cur, output: out });
            cur = out;
        }
        Ok(shapes)
    }

    /// Index of the bottleneck's last layer (deepest encoder layer), if this network came from
    /// an [`ArchSpec`].
    pub fn bottleneck_layer(&self) -> Option<usize> {
        self.arch.as_ref()?;
        self.layers
            .iter()
            .rposition(|l| l.group == BOTTLENECK_GROUP && l.kind == LayerKind::Conv)
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.weights.data().len() + p.bias.len())
            .sum()
    }

    /// Converts the parameters to another float type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| LayerParams {
                    weights: p.weights.map(|v| U::from_f64_lossy(v.to_f64_lossy())),
                    bias: p.bias.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                })
                .collect(),
        }
    }
}
