//! Rubber-sheet normalization, log-Gabor phase encoding and Hamming matching.
//!
//! The annulus between the pupil and limbic circles is resampled onto a 16 x 128 polar grid.
//! Each grid row is filtered with a 1-D log-Gabor filter and every complex response is
//! quantized to two phase bits, giving a 16 x 256-bit code with a matching validity mask.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::contour::EyeGeometry;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RADIAL_RES: usize = 16;
pub const ANGULAR_RES: usize = 128;
pub const CODE_COLS: usize = 2 * ANGULAR_RES;
/// Rotations searched when matching, in angular samples (12 * 2.8125 deg = 33.75 deg).
pub const MAX_SHIFT: i32 = 12;
/// Responses weaker than this carry no reliable phase.
pub const MIN_MAGNITUDE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedGrid {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl NormalizedGrid {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * ANGULAR_RES..(i + 1) * ANGULAR_RES]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * ANGULAR_RES + j]
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * ANGULAR_RES + j]
    }
}

fn bilinear<T: Scalar>(img: &Tensor<T>, x: f64, y: f64) -> f64 {
    let (w, h) = (img.width(), img.height());
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |xx, yy| img.get(0, yy, xx).to_f64_lossy();
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Samples `image` (1 channel, values in `[0, 1]`) at `rho = (i + 0.5) / 16` between the pupil
/// and iris circles along `theta = 2 pi j / 128`. A sample is valid when its nearest pixel is
/// inside the image and the segmentation mask.
pub fn rubber_sheet<T: Scalar>(image: &Tensor<T>, geometry: &EyeGeometry, seg: &BinaryMask) -> Result<NormalizedGrid> {
    if image.channels() != 1 || image.is_empty() {
        return Err(Error::dim("rubber sheet needs a non-empty 1-channel image"));
    }
    if seg.width() != image.width() || seg.height() != image.height() {
        return Err(Error::dim("segmentation mask and image differ in size"));
    }
    let (i, p) = (geometry.iris, geometry.pupil);
    if !(p.r >= 0.0 && i.r > 0.0) || (p.cx - i.cx).hypot(p.cy - i.cy) + p.r >= i.r {
        return Err(Error::Geometry("pupil circle is not strictly inside the iris circle".into()));
    }
    let n = RADIAL_RES * ANGULAR_RES;
    let mut values = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for ri in 0..RADIAL_RES {
        let rho = (ri as f64 + 0.5) / RADIAL_RES as f64;
        for j in 0..ANGULAR_RES {
            let th = 2.0 * PI * j as f64 / ANGULAR_RES as f64;
            let (c, s) = (th.cos(), th.sin());
            let x = (1.0 - rho) * (p.cx + p.r * c) + rho * (i.cx + i.r * c);
            let y = (1.0 - rho) * (p.cy + p.r * s) + rho * (i.cy + i.r * s);
            values.push(bilinear(image, x, y));
            valid.push(seg.get_signed(x.round() as isize, y.round() as isize));
        }
    }
    Ok(NormalizedGrid { values, valid })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaborParams {
    /// Center wavelength in angular samples.
    pub wavelength: f64,
    pub sigma_over_f: f64,
}

impl Default for GaborParams {
    fn default() -> Self {
        GaborParams {
            wavelength: 18.0,
            sigma_over_f: 0.5,
        }
    }
}

impl GaborParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength >= 2.0) {
            return Err(Error::invalid("log-Gabor wavelength must be at least 2 samples"));
        }
        if !(self.sigma_over_f > 0.0 && self.sigma_over_f < 1.0) {
            return Err(Error::invalid("log-Gabor sigma/f must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Frequency-domain 1-D log-Gabor filter for rows of a fixed length. Only positive frequencies
/// pass, so the response is complex with zero DC gain.
pub struct LogGabor {
    gain: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl LogGabor {
    pub fn new(len: usize, params: &GaborParams) -> Result<Self> {
        params.validate()?;
        if len < 2 {
            return Err(Error::invalid("log-Gabor rows need at least 2 samples"));
        }
        let f0 = 1.0 / params.wavelength;
        let denom = 2.0 * params.sigma_over_f.ln().powi(2);
        let gain = (0..len)
            .map(|k| {
                if k == 0 || k > len / 2 {
                    0.0
                } else {
                    let f = k as f64 / len as f64;
                    (-(f / f0).ln().powi(2) / denom).exp()
                }
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(LogGabor {
            gain,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        })
    }

    pub fn gain(&self) -> &[f64] {
        &self.gain
    }

    pub fn apply(&self, row: &[f64]) -> Result<Vec<Complex64>> {
        if row.len() != self.gain.len() {
            return Err(Error::dim(format!(
                "row has {} samples, filter expects {}",
                row.len(),
                self.gain.len()
            )));
        }
        let mut buf: Vec<Complex64> = row.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf.iter_mut().zip(&self.gain).for_each(|(c, &g)| *c *= g);
        self.inverse.process(&mut buf);
        let scale = 1.0 / row.len() as f64;
        buf.iter_mut().for_each(|c| *c *= scale);
        Ok(buf)
    }
}

pub fn log_gabor_row(row: &[f64], params: &GaborParams) -> Result<Vec<Complex64>> {
    LogGabor::new(row.len(), params)?.apply(row)
}

/// 16 x 256 code and mask bits, row-major, packed little-endian into `u64` words. Sample
/// `(i, j)` owns bits `2j` (real part >= 0) and `2j + 1` (imaginary part >= 0) of row `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IrisCode {
    rows: usize,
    cols: usize,
    code: Vec<u64>,
    mask: Vec<u64>,
}

fn words(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl IrisCode {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || cols % 2 != 0 {
            return Err(Error::invalid("code needs positive dims and an even column count"));
        }
        let n = words(rows * cols);
        Ok(IrisCode {
            rows,
            cols,
            code: vec![0; n],
            mask: vec![0; n],
        })
    }

    pub fn from_words(rows: usize, cols: usize, code: Vec<u64>, mask: Vec<u64>) -> Result<Self> {
        let mut c = IrisCode::new(rows, cols)?;
        if code.len() != c.code.len() || mask.len() != c.mask.len() {
            return Err(Error::Format("packed code length does not match dims".into()));
        }
        let tail = rows * cols % 64;
        if tail != 0 {
            let keep = (1u64 << tail) - 1;
            if code.last().is_some_and(|w| w & !keep != 0) || mask.last().is_some_and(|w| w & !keep != 0) {
                return Err(Error::Format("padding bits must be zero".into()));
            }
        }
        c.code = code;
        c.mask = mask;
        Ok(c)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn code_words(&self) -> &[u64] {
        &self.code
    }

    pub fn mask_words(&self) -> &[u64] {
        &self.mask
    }

    fn idx(&self, r: usize, c: usize) -> (usize, u64) {
        let b = r * self.cols + c;
        (b / 64, 1u64 << (b % 64))
    }

    pub fn code_bit(&self, r: usize, c: usize) -> bool {
        let (w, m) = self.idx(r, c);
        self.code[w] & m != 0
    }

    pub fn mask_bit(&self, r: usize, c: usize) -> bool {
        let (w, m) = self.idx(r, c);
        self.mask[w] & m != 0
    }

    pub fn set(&mut self, r: usize, c: usize, code: bool, mask: bool) {
        let (w, m) = self.idx(r, c);
        if code {
            self.code[w] |= m;
        } else {
            self.code[w] &= !m;
        }
        if mask {
            self.mask[w] |= m;
        } else {
            self.mask[w] &= !m;
        }
    }

    pub fn valid_bits(&self) -> u32 {
        self.mask.iter().map(|w| w.count_ones()).sum()
    }

    /// Circular shift of every row by `s` samples (`2s` bits); positive moves toward higher
    /// angles.
    pub fn rotated(&self, s: i32) -> IrisCode {
        let mut out = IrisCode::new(self.rows, self.cols).expect("dims already valid");
        let cols = self.cols as i64;
        let shift = (2 * s as i64).rem_euclid(cols) as usize;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let src = (c + self.cols - shift) % self.cols;
                out.set(r, c, self.code_bit(r, src), self.mask_bit(r, src));
            }
        }
        out
    }

    pub fn not(&self) -> IrisCode {
        let mut out = self.clone();
        out.code.iter_mut().for_each(|w| *w = !*w);
        let tail = self.rows * self.cols % 64;
        if tail != 0 {
            *out.code.last_mut().expect("nonempty") &= (1u64 << tail) - 1;
        }
        out
    }
}

/// Encodes a normalized grid row by row.
pub fn encode(grid: &NormalizedGrid, params: &GaborParams) -> Result<IrisCode> {
    if grid.values.len() != RADIAL_RES * ANGULAR_RES || grid.valid.len() != grid.values.len() {
        return Err(Error::dim("grid is not 16 x 128"));
    }
    let filter = LogGabor::new(ANGULAR_RES, params)?;
    let mut code = IrisCode::new(RADIAL_RES, CODE_COLS)?;
    for i in 0..RADIAL_RES {
        let resp = filter.apply(grid.row(i))?;
        for (j, c) in resp.iter().enumerate() {
            let ok = grid.is_valid(i, j) && c.norm() >= MIN_MAGNITUDE;
            code.set(i, 2 * j, c.re >= 0.0, ok);
            code.set(i, 2 * j + 1, c.im >= 0.0, ok);
        }
    }
    Ok(code)
}

/// Fraction of disagreeing bits among those valid in both masks.
pub fn hamming(a: &IrisCode, b: &IrisCode) -> Result<f64> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::dim("codes differ in size"));
    }
    let (mut diff, mut valid) = (0u64, 0u64);
    for i in 0..a.code.len() {
        let m = a.mask[i] & b.mask[i];
        valid += m.count_ones() as u64;
        diff += ((a.code[i] ^ b.code[i]) & m).count_ones() as u64;
    }
    if valid == 0 {
        return Err(Error::IncomparableCodes);
    }
    Ok(diff as f64 / valid as f64)
}

/// Smallest Hamming distance over rotations of `a` by `-12..=12` samples, and the rotation
/// achieving it. Ties keep the smaller `|s|`, then the negative shift.
pub fn match_min_hd(a: &IrisCode, b: &IrisCode) -> Result<(f64, i32)> {
    let mut best: Option<(f64, i32)> = None;
    let order = std::iter::once(0).chain((1..=MAX_SHIFT).flat_map(|s| [-s, s]));
    for s in order {
        match hamming(&a.rotated(s), b) {
            Ok(hd) => {
                if best.is_none_or(|(b, _)| hd < b) {
                    best = Some((hd, s));
                }
            }
            Err(Error::IncomparableCodes) => {}
            Err(e) => return Err(e),
        }
    }
    best.ok_or(Error::IncomparableCodes)
}
