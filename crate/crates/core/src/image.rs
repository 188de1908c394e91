//! 8-bit grayscale images and PGM (P5 binary, P2 ASCII) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::dim(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// `1 x H x W` tensor with intensities divided by 255.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let s = T::from_f64_lossy(1.0 / 255.0);
        let data = self.pixels.iter().map(|&p| T::from_f64_lossy(p as f64) * s).collect();
        Tensor::from_vec(1, self.height, self.width, data).expect("dims checked")
    }

    /// Nonzero pixels are iris.
    pub fn to_mask(&self) -> BinaryMask {
        BinaryMask::from_bits(self.width, self.height, self.pixels.iter().map(|&p| p != 0).collect())
            .expect("dims checked")
    }

    /// Iris pixels become 255.
    pub fn from_mask(m: &BinaryMask) -> Self {
        GrayImage {
            width: m.width(),
            height: m.height(),
            pixels: m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        let binary = match magic.as_slice() {
            b"P5" => true,
            b"P2" => false,
            _ => return Err(Error::Format("not a P5/P2 PGM file".into())),
        };
        let mut header = [0usize; 3];
        for h in &mut header {
            let t = next_token(bytes, &mut pos)?;
            *h = std::str::from_utf8(&t)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format("bad PGM header number".into()))?;
        }
        let [w, h, maxval] = header;
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
        }
        let n = w
            .checked_mul(h)
            .ok_or_else(|| Error::Format("PGM dims overflow".into()))?;
        let scale = |v: usize| -> u8 { ((v * 255 + maxval / 2) / maxval) as u8 };
        let pixels = if binary {
            // exactly one whitespace byte after maxval
            pos += 1;
            let data = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Format("PGM pixel data truncated".into()))?;
            if maxval == 255 {
                data.to_vec()
            } else {
                data.iter().map(|&v| scale((v as usize).min(maxval))).collect()
            }
        } else {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                let t = next_token(bytes, &mut pos)?;
                let x: usize = std::str::from_utf8(&t)
                    .ok()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format("bad PGM pixel".into()))?;
                v.push(scale(x.min(maxval)));
            }
            v
        };
        GrayImage::new(w, h, pixels).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_pgm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

fn next_token(b: &[u8], pos: &mut usize) -> Result<Vec<u8>> {
    loop {
        while *pos < b.len() && b[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < b.len() && b[*pos] == b'#' {
            while *pos < b.len() && b[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < b.len() && !b[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("PGM header truncated".into()));
    }
    Ok(b[start..*pos].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_roundtrip_is_byte_identical() {
        let img = GrayImage::new(3, 2, vec![0, 10, 20, 200, 250, 255]).unwrap();
        let bytes = img.to_pgm();
        let back = GrayImage::from_pgm(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_pgm(), bytes);
    }

    #[test]
    fn ascii_with_comments_and_maxval() {
        let text = b"P2\n# comment\n2 2\n15\n0 15\n# mid\n5 10\n";
        let img = GrayImage::from_pgm(text).unwrap();
        assert_eq!(img.pixels(), &[0, 255, 85, 170]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(GrayImage::from_pgm(b"P6\n1 1\n255\n\0\0\0").is_err());
        assert!(GrayImage::from_pgm(b"P5\n4 4\n255\n\0").is_err());
        assert!(GrayImage::from_pgm(b"P5\n").is_err());
    }

    #[test]
    fn tensor_and_mask_conversion() {
        let img = GrayImage::new(2, 1, vec![0, 255]).unwrap();
        let t: Tensor<f64> = img.to_tensor();
        assert_eq!(t.data(), &[0.0, 1.0]);
        let m = img.to_mask();
        assert_eq!(m.bits(), &[false, true]);
        assert_eq!(GrayImage::from_mask(&m), img);
    }
}
