use super::{build_arch, ArchSpec, LayerKind, LayerShape, LayerSpec, Network};
use crate::error::Result;

/// FLOPs of one layer under the MAC = 2 convention, including the element-wise skip addition.
/// Bias adds and ReLU are not counted. A TCONV is charged for the GEMM it actually runs
/// (`(out*k*k) x in` times `in x (H_in*W_in)`).
pub fn layer_flops(l: &LayerSpec, shape: &LayerShape) -> u64 {
    let (ic, ih, iw) = shape.input;
    let (oc, oh, ow) = shape.output;
    let kk = (l.filter * l.filter) as u64;
    let gemm = match l.kind {
        LayerKind::Conv => 2 * (ic as u64 * kk) * (oh * ow) as u64 * oc as u64,
        LayerKind::TConv => 2 * (oc as u64 * kk) * ic as u64 * (ih * iw) as u64,
        LayerKind::Softmax => 0,
    };
    let skip = if l.skip_from.is_some() {
        (oc * oh * ow) as u64
    } else {
        0
    };
    gemm + skip
}

/// FLOPs per inference for an `height x width` original image: the input is scaled by the
/// architecture's scale and padded to the network's stride multiple, as during inference.
pub fn count_flops(spec: &ArchSpec, height: usize, width: usize) -> Result<u64> {
    let net: Network<f32> = build_arch(spec)?;
    let sh = (height as f64 * spec.scale).round() as usize;
    let sw = (width as f64 * spec.scale).round() as usize;
    let m = net.input_multiple();
    let shapes = net.shapes(sh.div_ceil(m) * m, sw.div_ceil(m) * m)?;
    Ok(net
        .layers()
        .iter()
        .zip(&shapes)
        .map(|(l, s)| layer_flops(l, s))
        .sum())
}
