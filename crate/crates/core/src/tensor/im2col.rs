use std::ops::AddAssign;

use num_traits::Zero;

use super::{Matrix, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis, or `None` if no window fits.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 {
        return None;
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn output_dims(
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if kernel == 0 || stride == 0 {
        return Err(Error::dim("kernel and stride must be at least 1"));
    }
    match (
        conv_output_dim(height, kernel, stride, padding),
        conv_output_dim(width, kernel, stride, padding),
    ) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(Error::dim(format!(
            "{}x{} input with padding {} admits no {}x{} window",
            height, width, padding, kernel, kernel
        ))),
    }
}

/// Unrolls receptive fields into columns: row `(c*k + ky)*k + kx`, column `oy*out_w + ox`.
/// Reads outside the input are zero.
pub fn im2col<T: Copy + Zero>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Matrix<T>> {
    let (c, h, w) = input.dims();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::dim("im2col on a zero-sized tensor"));
    }
    let (oh, ow) = output_dims(h, w, kernel, stride, padding)?;
    let rows = c * kernel * kernel;
    let cols = oh * ow;
    let mut out = vec![T::zero(); rows * cols];
    let src = input.data();
    for ch in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Matrix::from_vec(rows, cols, out)
}

/// Scatter-adds columns back into a `channels x height x width` tensor; the adjoint of [`im2col`].
pub fn col2im<T: Copy + Zero + AddAssign>(
    cols: &Matrix<T>,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::dim("col2im into a zero-sized tensor"));
    }
    let (oh, ow) = output_dims(height, width, kernel, stride, padding)?;
    if cols.rows() != channels * kernel * kernel || cols.cols() != oh * ow {
        return Err(Error::dim(format!(
            "col2im expects a {}x{} column matrix, got {}x{}",
            channels * kernel * kernel,
            oh * ow,
            cols.rows(),
            cols.cols()
        )));
    }
    let mut out = Tensor::zeros(channels, height, width);
    let n = oh * ow;
    let dst = out.data_mut();
    for ch in 0..channels {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let src = &cols.data()[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let base = (ch * height + iy as usize) * width;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < width as isize {
                            dst[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
