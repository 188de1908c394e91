use super::QuantizedNetwork;
use crate::error::{Error, Result};
use crate::fcn::{class_map_to_mask, prepare_input, LayerKind};
use crate::mask::BinaryMask;
use crate::scalar::Scalar;
use crate::tensor::{
    col2im, gemm_ref_q_bias, im2col, quantize_value, round_shift, saturate_i8, DfpMatrix, DfpTensor,
    Tensor,
};

/// Integer GEMM engine for quantized CONV/TCONV layers.
pub trait DfpGemm {
    /// `a * b` plus an optional per-row bias at `a.fl + b.fl`, rounded to `out_fl` and
    /// saturated to 8 bits.
    fn gemm(
        &mut self,
        layer: usize,
        a: &DfpMatrix,
        b: &DfpMatrix,
        bias: Option<&[i32]>,
        out_fl: i32,
    ) -> Result<DfpMatrix>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RefDfpGemm;

impl DfpGemm for RefDfpGemm {
    fn gemm(
        &mut self,
        _layer: usize,
        a: &DfpMatrix,
        b: &DfpMatrix,
        bias: Option<&[i32]>,
        out_fl: i32,
    ) -> Result<DfpMatrix> {
        gemm_ref_q_bias(a, b, bias, out_fl)
    }
}

/// Wraps an engine and counts the integer multiply-accumulates routed through it.
#[derive(Clone, Debug, Default)]
pub struct CountingDfpGemm<G> {
    pub inner: G,
    pub calls: usize,
    pub macs: u64,
}

impl<G: DfpGemm> DfpGemm for CountingDfpGemm<G> {
    fn gemm(
        &mut self,
        layer: usize,
        a: &DfpMatrix,
        b: &DfpMatrix,
        bias: Option<&[i32]>,
        out_fl: i32,
    ) -> Result<DfpMatrix> {
        self.calls += 1;
        self.macs += (a.matrix.rows() * a.matrix.cols() * b.matrix.cols()) as u64;
        self.inner.gemm(layer, a, b, bias, out_fl)
    }
}

fn relu_i8(t: &mut Tensor<i8>) {
    t.data_mut().iter_mut().for_each(|v| *v = (*v).max(0));
}

/// Adds `partner` (at `fl_p`) into `out` (at `fl_out`). Both are first aligned to the smaller
/// fractional length; the sum is stored back at `fl_out` with saturation.
fn skip_add(out: &mut [i8], fl_out: i32, partner: &[i8], fl_p: i32) {
    let common = fl_out.min(fl_p);
    for (o, &p) in out.iter_mut().zip(partner) {
        let s = round_shift(*o as i64, fl_out - common) + round_shift(p as i64, fl_p - common);
        *o = saturate_i8(round_shift(s, common - fl_out));
    }
}

/// Integer forward pass on an already scaled, padded and quantized input. Returns the 2-channel
/// logits at the last layer's `a_out`.
pub fn quantized_forward<G: DfpGemm>(
    qnet: &QuantizedNetwork,
    input: &DfpTensor,
    gemm: &mut G,
) -> Result<DfpTensor> {
    let dfp = &qnet.dfp().layers;
    if input.fl != dfp[0].a_in {
        return Err(Error::invalid("input fractional length differs from layer 0 a_in"));
    }
    let mut outputs: Vec<DfpTensor> = Vec::with_capacity(dfp.len());
    let mut cur = input.clone();
    for (i, (l, q)) in qnet.layers().iter().zip(qnet.qlayers()).enumerate() {
        let d = &dfp[i];
        if cur.tensor.channels() != l.in_channels {
            return Err(Error::dim(format!("layer {i} expects {} channels", l.in_channels)));
        }
        let (oh, ow) = l.output_hw(cur.tensor.height(), cur.tensor.width())?;
        let w = DfpMatrix {
            matrix: q.weights.clone(),
            fl: d.w_fl,
        };
        let mut t = match l.kind {
            LayerKind::Conv => {
                let cols = DfpMatrix {
                    matrix: im2col(&cur.tensor, l.filter, l.stride, l.padding)?,
                    fl: cur.fl,
                };
                let z = gemm.gemm(i, &w, &cols, Some(&q.bias), d.a_out)?;
                Tensor::from_matrix(z.matrix, oh, ow)?
            }
            LayerKind::TConv => {
                let x = DfpMatrix {
                    matrix: cur.tensor.to_matrix(),
                    fl: cur.fl,
                };
                let cols = gemm.gemm(i, &w, &x, None, d.col_fl)?;
                let wide = cols.matrix.map(|v| v as i32);
                let mut acc = col2im(&wide, l.out_channels, oh, ow, l.filter, l.stride, l.padding)?;
                let n = oh * ow;
                let shift = d.col_fl - d.a_out;
                let data: Vec<i8> = acc
                    .data_mut()
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| saturate_i8(round_shift(v as i64 + q.bias[j / n] as i64, shift)))
                    .collect();
                Tensor::from_vec(l.out_channels, oh, ow, data)?
            }
            LayerKind::Softmax => unreachable!("quantized layers exclude SOFTMAX"),
        };
        if l.relu {
            relu_i8(&mut t);
        }
        if let Some(src) = l.skip_from {
            let p = &outputs[src];
            if p.tensor.dims() != t.dims() {
                return Err(Error::dim(format!("skip {src} -> {i} dims differ")));
            }
            skip_add(t.data_mut(), d.a_out, p.tensor.data(), p.fl);
        }
        cur = DfpTensor {
            tensor: t,
            fl: d.a_out,
        };
        outputs.push(cur.clone());
    }
    Ok(cur)
}

pub fn quantized_infer<T: Scalar>(qnet: &QuantizedNetwork, image: &Tensor<T>) -> Result<BinaryMask> {
    quantized_infer_with(qnet, image, &mut RefDfpGemm)
}

/// Segments a `1 x H x W` image in `[0, 1]` with integer arithmetic in every CONV/TCONV.
pub fn quantized_infer_with<T: Scalar, G: DfpGemm>(
    qnet: &QuantizedNetwork,
    image: &Tensor<T>,
    gemm: &mut G,
) -> Result<BinaryMask> {
    let (x, scaled) = prepare_input(image, qnet.scale(), qnet.input_multiple())?;
    let fl = qnet.dfp().layers[0].a_in;
    let input = DfpTensor {
        tensor: x.map(|v| quantize_value(v.to_f64_lossy(), fl)),
        fl,
    };
    let logits = quantized_forward(qnet, &input, gemm)?.tensor;
    if logits.channels() != 2 {
        return Err(Error::dim("final layer must produce 2 channels"));
    }
    let n = logits.plane_len();
    let (z0, z1) = logits.data().split_at(n);
    // exact ties go to background
    let classes: Vec<u8> = z0.iter().zip(z1).map(|(a, b)| u8::from(b > a)).collect();
    let classes = Tensor::from_vec(1, logits.height(), logits.width(), classes)?;
    class_map_to_mask(&classes, scaled, (image.height(), image.width()))
}
