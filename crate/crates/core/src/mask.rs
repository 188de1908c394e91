use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel iris / non-iris labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::dim("mask dimensions must be positive"));
        }
        if bits.len() != width * height {
            return Err(Error::dim(format!(
                "mask {}x{} needs {} bits, got {}",
                width,
                height,
                width * height,
                bits.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
        })
    }

    /// Builds a mask from a predicate over `(x, y)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        BinaryMask {
            width,
            height,
            bits,
        }
    }

    /// Nonzero entries of a single-channel tensor become iris pixels.
    pub fn from_tensor<T: Copy + PartialEq + num_traits::Zero>(t: &Tensor<T>) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::dim("mask tensor must have one channel"));
        }
        Self::from_bits(
            t.width(),
            t.height(),
            t.data().iter().map(|v| !v.is_zero()).collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Out-of-bounds coordinates read as non-iris.
    #[inline]
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(
            1,
            self.height,
            self.width,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask dims are consistent")
    }

    /// Shifts by `(dx, dy)`; pixels moved in from outside are non-iris.
    pub fn translated(&self, dx: isize, dy: isize) -> Self {
        BinaryMask::from_fn(self.width, self.height, |x, y| {
            self.get_signed(x as isize - dx, y as isize - dy)
        })
    }
}
