//! 8-bit dynamic fixed-point (DFP) primitives.
//!
//! A code `q` with fractional length `fl` represents `q * 2^-fl`. Rounding is half away from
//! zero everywhere; overflow saturates and never wraps.

use super::{Matrix, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DfpMatrix {
    pub matrix: Matrix<i8>,
    pub fl: i32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DfpTensor {
    pub tensor: Tensor<i8>,
    pub fl: i32,
}

impl DfpTensor {
    pub fn dequantize(&self) -> Tensor<f32> {
        let fl = self.fl;
        self.tensor.map(|q| dequantize(q as i64, fl) as f32)
    }
}

impl DfpMatrix {
    pub fn dequantize(&self) -> Matrix<f32> {
        let fl = self.fl;
        self.matrix.map(|q| dequantize(q as i64, fl) as f32)
    }
}

/// Divides by `2^shift` rounding half away from zero, or multiplies by `2^-shift` when
/// `shift` is negative.
#[inline]
pub fn round_shift(v: i64, shift: i32) -> i64 {
    if shift <= 0 {
        let s = (-shift) as u32;
        return v.checked_shl(s).filter(|r| r >> s == v).unwrap_or(if v < 0 {
            i64::MIN
        } else if v > 0 {
            i64::MAX
        } else {
            0
        });
    }
    if shift >= 63 {
        return 0;
    }
    let half = 1i64 << (shift - 1);
    let mag = (v.unsigned_abs() as i64).saturating_add(half) >> shift;
    if v < 0 {
        -mag
    } else {
        mag
    }
}

#[inline]
pub fn saturate_i8(v: i64) -> i8 {
    v.clamp(i8::MIN as i64, i8::MAX as i64) as i8
}

#[inline]
pub fn saturate_i16(v: i64) -> i16 {
    v.clamp(i16::MIN as i64, i16::MAX as i64) as i16
}

#[inline]
pub fn saturate_i32(v: i64) -> i32 {
    v.clamp(i32::MIN as i64, i32::MAX as i64) as i32
}

/// `clamp(round(x * 2^fl), -128, 127)`.
pub fn quantize_value(x: f64, fl: i32) -> i8 {
    let scaled = (x * 2f64.powi(fl)).round();
    scaled.clamp(i8::MIN as f64, i8::MAX as f64) as i8
}

pub fn dequantize(code: i64, fl: i32) -> f64 {
    code as f64 * 2f64.powi(-fl)
}

/// Quantized GEMM: 16-bit products, wide accumulation, then a rounding shift from
/// `a.fl + b.fl` to `out_fl` and saturation to 8 bits.
pub fn gemm_ref_q(a: &DfpMatrix, b: &DfpMatrix, out_fl: i32) -> Result<DfpMatrix> {
    gemm_ref_q_bias(a, b, None, out_fl)
}

/// [`gemm_ref_q`] with an optional per-row bias already expressed at `a.fl + b.fl`.
pub fn gemm_ref_q_bias(
    a: &DfpMatrix,
    b: &DfpMatrix,
    bias: Option<&[i32]>,
    out_fl: i32,
) -> Result<DfpMatrix> {
    let (am, bm) = (&a.matrix, &b.matrix);
    if am.cols() != bm.rows() {
        return Err(Error::dim(format!(
            "quantized gemm shape mismatch: {}x{} times {}x{}",
            am.rows(),
            am.cols(),
            bm.rows(),
            bm.cols()
        )));
    }
    if let Some(bias) = bias {
        if bias.len() != am.rows() {
            return Err(Error::dim(format!(
                "bias has {} entries for {} output rows",
                bias.len(),
                am.rows()
            )));
        }
    }
    let (m, k, n) = (am.rows(), am.cols(), bm.cols());
    let shift = a.fl + b.fl - out_fl;
    let mut acc = vec![0i64; n];
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let init = bias.map_or(0, |b| b[i] as i64);
        acc.iter_mut().for_each(|v| *v = init);
        let arow = am.row(i);
        for l in 0..k {
            let av = arow[l] as i16;
            if av == 0 {
                continue;
            }
            for (s, &bv) in acc.iter_mut().zip(bm.row(l)) {
                let product: i16 = av * bv as i16;
                *s += product as i64;
            }
        }
        out.extend(acc.iter().map(|&s| saturate_i8(round_shift(s, shift))));
    }
    Ok(DfpMatrix {
        matrix: Matrix::from_vec(m, n, out)?,
        fl: out_fl,
    })
}
