use num_traits::Zero;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn relu<T: Copy + PartialOrd + Zero>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Per-pixel two-class softmax over a `2 x H x W` logit tensor.
pub fn softmax2<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.channels() != 2 {
        return Err(Error::dim(format!(
            "softmax2 needs exactly 2 channels, got {}",
            logits.channels()
        )));
    }
    let n = logits.plane_len();
    let (z0, z1) = logits.data().split_at(n);
    let mut out = vec![T::zero(); 2 * n];
    for i in 0..n {
        let m = z0[i].max(z1[i]);
        let e0 = (z0[i] - m).exp();
        let e1 = (z1[i] - m).exp();
        let s = e0 + e1;
        out[i] = e0 / s;
        out[n + i] = e1 / s;
    }
    Tensor::from_vec(2, logits.height(), logits.width(), out)
}

/// Nearest-neighbour resize by `scale`: output dims are `round(scale * dims)` and each
/// destination index reads source `floor(dest / scale)`, clamped.
pub fn nearest_resize<T: Copy>(t: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("resize scale must be positive, got {scale}")));
    }
    let oh = ((t.height() as f64) * scale).round() as usize;
    let ow = ((t.width() as f64) * scale).round() as usize;
    if oh == 0 || ow == 0 {
        return Err(Error::dim("resize produces an empty tensor"));
    }
    let map = |d: usize, len: usize| ((d as f64 / scale).floor() as usize).min(len - 1);
    let ys: Vec<usize> = (0..oh).map(|y| map(y, t.height())).collect();
    let xs: Vec<usize> = (0..ow).map(|x| map(x, t.width())).collect();
    Ok(gather(t, &ys, &xs))
}

/// Nearest-neighbour resize to explicit dims; source index is `floor(dest * in / out)`.
pub fn resize_nearest_to<T: Copy>(t: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    if height == 0 || width == 0 || t.is_empty() {
        return Err(Error::dim("resize to or from an empty tensor"));
    }
    let ys: Vec<usize> = (0..height).map(|y| y * t.height() / height).collect();
    let xs: Vec<usize> = (0..width).map(|x| x * t.width() / width).collect();
    Ok(gather(t, &ys, &xs))
}

fn gather<T: Copy>(t: &Tensor<T>, ys: &[usize], xs: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(t.channels() * ys.len() * xs.len());
    for c in 0..t.channels() {
        for &y in ys {
            for &x in xs {
                data.push(t.get(c, y, x));
            }
        }
    }
    Tensor::from_vec(t.channels(), ys.len(), xs.len(), data).expect("gather sizes are consistent")
}

/// Zero-pads at the right and bottom.
pub fn pad_to<T: Copy + Zero>(t: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    if height < t.height() || width < t.width() {
        return Err(Error::dim("pad target smaller than tensor"));
    }
    if height == t.height() && width == t.width() {
        return Ok(t.clone());
    }
    let mut out = Tensor::zeros(t.channels(), height, width);
    for c in 0..t.channels() {
        for y in 0..t.height() {
            for x in 0..t.width() {
                out.set(c, y, x, t.get(c, y, x));
            }
        }
    }
    Ok(out)
}

/// Keeps the top-left `height x width` window.
pub fn crop<T: Copy>(t: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    if height > t.height() || width > t.width() {
        return Err(Error::dim("crop larger than tensor"));
    }
    let ys: Vec<usize> = (0..height).collect();
    let xs: Vec<usize> = (0..width).collect();
    Ok(gather(t, &ys, &xs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let t = Tensor::from_vec(1, 1, 3, vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        let q = Tensor::from_vec(1, 1, 3, vec![-5i8, 0, 7]).unwrap();
        assert_eq!(relu(&q).data(), &[0, 0, 7]);
    }

    #[test]
    fn softmax_equal_logits_is_half() {
        let t = Tensor::<f64>::filled(2, 3, 4, 0.7);
        let s = softmax2(&t).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn softmax_channels_sum_to_one() {
        let data: Vec<f64> = (0..2 * 25).map(|i| ((i * 37 % 11) as f64 - 5.0) * 3.1).collect();
        let s = softmax2(&Tensor::from_vec(2, 5, 5, data).unwrap()).unwrap();
        for i in 0..25 {
            assert!((s.data()[i] + s.data()[25 + i] - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_other_channel_counts() {
        assert!(softmax2(&Tensor::<f32>::zeros(3, 2, 2)).is_err());
    }

    #[test]
    fn half_resize_of_checkerboard_takes_top_left() {
        let data: Vec<u8> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as u8 * 10 + i as u8).collect();
        let t = Tensor::from_vec(1, 4, 4, data.clone()).unwrap();
        let r = nearest_resize(&t, 0.5).unwrap();
        assert_eq!(r.dims(), (1, 2, 2));
        // index-mapping oracle: dest (y,x) <- source (2y, 2x)
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(r.get(0, y, x), data[(2 * y) * 4 + 2 * x]);
            }
        }
    }

    #[test]
    fn upscale_then_downscale_restores() {
        let t = Tensor::from_vec(1, 2, 3, vec![1u8, 2, 3, 4, 5, 6]).unwrap();
        let up = nearest_resize(&t, 2.0).unwrap();
        assert_eq!(up.dims(), (1, 4, 6));
        assert_eq!(nearest_resize(&up, 0.5).unwrap(), t);
        assert_eq!(resize_nearest_to(&t, 4, 6).unwrap(), up);
    }

    #[test]
    fn pad_and_crop_round_trip() {
        let t = Tensor::from_vec(2, 2, 2, (1..=8).map(|v| v as f32).collect()).unwrap();
        let p = pad_to(&t, 3, 4).unwrap();
        assert_eq!(p.get(1, 2, 3), 0.0);
        assert_eq!(crop(&p, 2, 2).unwrap(), t);
    }
}
