use super::{LayerKind, LayerParams, LayerSpec, Network};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::scalar::Scalar;
use crate::tensor::{
    col2im, crop, gemm_ref, im2col, nearest_resize, pad_to, relu, resize_nearest_to, softmax2,
    Matrix, Tensor,
};

/// GEMM engine used for CONV/TCONV layers; `layer` identifies the caller for reporting.
pub trait FloatGemm<T> {
    fn gemm(&mut self, layer: usize, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>>;
}

/// Runs every layer through [`gemm_ref`].
#[derive(Clone, Copy, Debug, Default)]
pub struct RefGemm;

impl<T: Scalar> FloatGemm<T> for RefGemm {
    fn gemm(&mut self, _layer: usize, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
        gemm_ref(a, b)
    }
}

/// Activations kept for backpropagation.
#[derive(Clone, Debug, Default)]
pub struct ForwardCache<T> {
    /// Input of each parameterized layer.
    pub inputs: Vec<Tensor<T>>,
    /// Pre-activation output (before ReLU and skip addition).
    pub pre: Vec<Tensor<T>>,
    /// Final output of each layer (after ReLU and skip addition).
    pub outputs: Vec<Tensor<T>>,
}

fn add_bias_rows<T: Scalar>(m: &mut Matrix<T>, bias: &[T]) {
    let n = m.cols();
    for (r, &b) in bias.iter().enumerate() {
        m.data_mut()[r * n..(r + 1) * n].iter_mut().for_each(|v| *v += b);
    }
}

pub(crate) fn layer_forward<T: Scalar, G: FloatGemm<T>>(
    idx: usize,
    l: &LayerSpec,
    p: &LayerParams<T>,
    x: &Tensor<T>,
    gemm: &mut G,
) -> Result<Tensor<T>> {
    if x.channels() != l.in_channels {
        return Err(Error::dim(format!(
            "layer {idx} expects {} channels, got {}",
            l.in_channels,
            x.channels()
        )));
    }
    let (oh, ow) = l.output_hw(x.height(), x.width())?;
    match l.kind {
        LayerKind::Conv => {
            let cols = im2col(x, l.filter, l.stride, l.padding)?;
            let mut z = gemm.gemm(idx, &p.weights, &cols)?;
            add_bias_rows(&mut z, &p.bias);
            Tensor::from_matrix(z, oh, ow)
        }
        LayerKind::TConv => {
            let cols = gemm.gemm(idx, &p.weights, &x.to_matrix())?;
            let mut t = col2im(&cols, l.out_channels, oh, ow, l.filter, l.stride, l.padding)?;
            let n = oh * ow;
            for (c, &b) in p.bias.iter().enumerate() {
                t.data_mut()[c * n..(c + 1) * n].iter_mut().for_each(|v| *v += b);
            }
            Ok(t)
        }
        LayerKind::Softmax => Err(Error::invalid("SOFTMAX has no linear forward")),
    }
}

/// Runs all layers before the SOFTMAX on an already scaled and padded `1 x H x W` input and
/// returns the 2-channel logits.
pub fn forward_logits<T: Scalar, G: FloatGemm<T>>(
    net: &Network<T>,
    input: &Tensor<T>,
    gemm: &mut G,
    mut cache: Option<&mut ForwardCache<T>>,
) -> Result<Tensor<T>> {
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(net.layers().len());
    let mut cur = input.clone();
    for (i, (l, p)) in net.layers().iter().zip(net.params()).enumerate() {
        if l.kind == LayerKind::Softmax {
            break;
        }
        let pre = layer_forward(i, l, p, &cur, gemm)?;
        let mut out = if l.relu { relu(&pre) } else { pre.clone() };
        if let Some(src) = l.skip_from {
            let s = &outputs[src];
            if s.dims() != out.dims() {
                return Err(Error::dim(format!("skip {src} -> {i} dims differ")));
            }
            out.data_mut()
                .iter_mut()
                .zip(s.data())
                .for_each(|(o, &v)| *o += v);
        }
        if let Some(c) = cache.as_deref_mut() {
            c.inputs.push(cur);
            c.pre.push(pre);
        }
        outputs.push(out.clone());
        cur = out;
    }
    if let Some(c) = cache {
        c.outputs = outputs;
    }
    Ok(cur)
}

/// Scales a `1 x H x W` image by `scale` (nearest) and zero-pads it at the right/bottom to a
/// multiple of `multiple`. Returns the padded tensor and the scaled dims.
pub fn prepare_input<T: Scalar>(
    image: &Tensor<T>,
    scale: f64,
    multiple: usize,
) -> Result<(Tensor<T>, (usize, usize))> {
    if image.channels() != 1 {
        return Err(Error::dim(format!(
            "segmentation input must have 1 channel, got {}",
            image.channels()
        )));
    }
    if image.is_empty() {
        return Err(Error::dim("empty input image"));
    }
    let scaled = if scale == 1.0 {
        image.clone()
    } else {
        nearest_resize(image, scale)?
    };
    let (sh, sw) = (scaled.height(), scaled.width());
    let m = multiple.max(1);
    let ph = sh.div_ceil(m) * m;
    let pw = sw.div_ceil(m) * m;
    Ok((pad_to(&scaled, ph, pw)?, (sh, sw)))
}

/// Crops a per-pixel class map back to the scaled dims and resizes it (nearest) to the
/// original image dims.
pub fn class_map_to_mask(
    classes: &Tensor<u8>,
    scaled: (usize, usize),
    original: (usize, usize),
) -> Result<BinaryMask> {
    let cropped = crop(classes, scaled.0, scaled.1)?;
    let full = if scaled == original {
        cropped
    } else {
        resize_nearest_to(&cropped, original.0, original.1)?
    };
    BinaryMask::from_tensor(&full)
}

/// Logits at network resolution, plus the scaled (unpadded) dims.
pub fn predict_logits<T: Scalar, G: FloatGemm<T>>(
    net: &Network<T>,
    image: &Tensor<T>,
    gemm: &mut G,
) -> Result<(Tensor<T>, (usize, usize))> {
    let (x, scaled) = prepare_input(image, net.scale(), net.input_multiple())?;
    let logits = forward_logits(net, &x, gemm, None)?;
    Ok((logits, scaled))
}

/// Segments a `1 x H x W` image with intensities in `[0, 1]`.
pub fn infer<T: Scalar>(net: &Network<T>, image: &Tensor<T>) -> Result<BinaryMask> {
    infer_with(net, image, &mut RefGemm)
}

pub fn infer_with<T: Scalar, G: FloatGemm<T>>(
    net: &Network<T>,
    image: &Tensor<T>,
    gemm: &mut G,
) -> Result<BinaryMask> {
    let (logits, scaled) = predict_logits(net, image, gemm)?;
    let probs = softmax2(&logits)?;
    let n = probs.plane_len();
    let (p0, p1) = probs.data().split_at(n);
    // exact ties go to background
    let classes: Vec<u8> = p0.iter().zip(p1).map(|(a, b)| u8::from(b > a)).collect();
    let classes = Tensor::from_vec(1, probs.height(), probs.width(), classes)?;
    class_map_to_mask(&classes, scaled, (image.height(), image.width()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcn::{build_arch, ArchSpec};

    #[test]
    fn zero_network_gives_background() {
        let spec = ArchSpec::parse(0.5, 4, "0-1-2-4-2-1-0").unwrap();
        let net: Network<f32> = build_arch(&spec).unwrap();
        let img = Tensor::from_vec(1, 40, 50, (0..2000).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let mask = infer(&net, &img).unwrap();
        assert_eq!((mask.width(), mask.height()), (50, 40));
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn hand_built_threshold_net() {
        // One 3x3 CONV with an identity kernel on class 1 and a step bias on class 0:
        // logit1 = x, logit0 = 0.5, so iris iff x > 0.5.
        let layers = vec![
            LayerSpec::conv(1, 2, 3, 1, 1).without_relu(),
            LayerSpec::softmax(),
        ];
        let mut net: Network<f64> = Network::from_layers(layers).unwrap();
        let mut w = Matrix::zeros(2, 9);
        w.set(1, 4, 1.0);
        net.set_params(0, w, vec![0.5, 0.0]).unwrap();
        let data: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37) % 1.0).collect();
        let img = Tensor::from_vec(1, 5, 6, data.clone()).unwrap();
        let mask = infer(&net, &img).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                assert_eq!(mask.get(x, y), data[y * 6 + x] > 0.5);
            }
        }
    }

    #[test]
    fn infer_is_deterministic_and_padding_is_cropped() {
        let spec = ArchSpec::parse(1.0, 4, "0-4-0").unwrap();
        let mut net: Network<f32> = build_arch(&spec).unwrap();
        net.init_he(3);
        let img = Tensor::from_vec(1, 21, 35, (0..21 * 35).map(|i| ((i * 13) % 17) as f32 / 17.0).collect())
            .unwrap();
        let a = infer(&net, &img).unwrap();
        let b = infer(&net, &img).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.width(), a.height()), (35, 21));
    }

    #[test]
    fn cache_records_every_layer() {
        let spec = ArchSpec::parse(0.5, 4, "0-1-4-1-0").unwrap();
        let mut net: Network<f64> = build_arch(&spec).unwrap();
        net.init_he(1);
        let x = Tensor::filled(1, 16, 16, 0.5);
        let mut cache = ForwardCache::default();
        let logits = forward_logits(&net, &x, &mut RefGemm, Some(&mut cache)).unwrap();
        assert_eq!(cache.outputs.len(), net.layers().len() - 1);
        assert_eq!(cache.outputs.last().unwrap(), &logits);
        assert_eq!(logits.dims(), (2, 16, 16));
    }
}
