//! Dataset ingestion and stage wiring shared by the CLI and the end-to-end tests.

use std::fs;
use std::path::{Path, PathBuf};

use crate::codec::{encode, rubber_sheet, GaborParams, IrisCode};
use crate::config::PipelineConfig;
use crate::contour::{fit_contours_with, ContourConfig, EyeGeometry};
use crate::error::{Error, Result};
use crate::eval::GalleryEntry;
use crate::fcn::{infer, Network};
use crate::formats::{detect_weights, read_fcnq, read_fcnw, WeightsKind};
use crate::image::GrayImage;
use crate::mask::BinaryMask;
use crate::quant::quantized_infer;
use crate::quant::QuantizedNetwork;
use crate::tensor::Tensor;
use crate::train::TrainSample;

/// Identity label of a sample: the file stem up to the first underscore.
pub fn identity_of(name: &str) -> &str {
    name.split('_').next().unwrap_or(name)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub name: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

impl DatasetEntry {
    pub fn identity(&self) -> &str {
        identity_of(&self.name)
    }

    pub fn load_image(&self) -> Result<GrayImage> {
        GrayImage::load(&self.image)
    }

    pub fn load_mask(&self) -> Result<BinaryMask> {
        let p = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("{}: no ground-truth mask", self.name)))?;
        Ok(GrayImage::load(p)?.to_mask())
    }
}

/// `root/images/*.pgm` with optional same-named files in `root/masks/`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

/// Sorted `*.pgm` stems in `dir`.
pub fn list_pgm(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    list_ext(dir, "pgm")
}

pub(crate) fn list_ext(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), p.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let images = root.join("images");
        if !images.is_dir() {
            return Err(Error::Validation(format!("{}: missing images/ directory", root.display())));
        }
        let masks = root.join("masks");
        let has_masks = masks.is_dir();
        let mut entries = Vec::new();
        for (name, image) in list_pgm(&images)? {
            let mask = if has_masks {
                let m = masks.join(format!("{name}.pgm"));
                if !m.is_file() {
                    return Err(Error::Validation(format!("{name}: image has no mask")));
                }
                Some(m)
            } else {
                None
            };
            entries.push(DatasetEntry { name, image, mask });
        }
        if entries.is_empty() {
            return Err(Error::Validation(format!("{}: no images", images.display())));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            entries,
        })
    }

    /// Loads every image with its mask, checking dims agree.
    pub fn load_pairs(&self) -> Result<Vec<(String, GrayImage, BinaryMask)>> {
        self.entries
            .iter()
            .map(|e| {
                let img = e.load_image()?;
                let m = e.load_mask()?;
                if (m.width(), m.height()) != (img.width(), img.height()) {
                    return Err(Error::Validation(format!("{}: mask and image differ in size", e.name)));
                }
                Ok((e.name.clone(), img, m))
            })
            .collect()
    }
}

pub fn train_samples(
    net: &Network<f32>,
    pairs: &[(String, GrayImage, BinaryMask)],
) -> Result<Vec<TrainSample<f32>>> {
    pairs
        .iter()
        .map(|(_, img, m)| TrainSample::prepare(net, &img.to_tensor(), m))
        .collect()
}

/// Either kind of weights file.
#[derive(Clone, Debug)]
pub enum Segmenter {
    Float(Network<f32>),
    Quantized(QuantizedNetwork),
}

impl Segmenter {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(match detect_weights(bytes)? {
            WeightsKind::Float => Segmenter::Float(read_fcnw(bytes)?),
            WeightsKind::Quantized => Segmenter::Quantized(read_fcnq(bytes)?),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn segment(&self, image: &GrayImage) -> Result<BinaryMask> {
        let t: Tensor<f32> = image.to_tensor();
        match self {
            Segmenter::Float(n) => infer(n, &t),
            Segmenter::Quantized(q) => quantized_infer(q, &t),
        }
    }
}

/// Normalizes and encodes one eye given its segmentation and fitted geometry.
pub fn encode_with_geometry(
    image: &GrayImage,
    mask: &BinaryMask,
    geometry: &EyeGeometry,
    gabor: &GaborParams,
) -> Result<IrisCode> {
    let grid = rubber_sheet(&image.to_tensor::<f64>(), geometry, mask)?;
    encode(&grid, gabor)
}

/// Contour fitting, normalization and encoding.
pub fn encode_eye(
    image: &GrayImage,
    mask: &BinaryMask,
    contour: &ContourConfig,
    gabor: &GaborParams,
) -> Result<(EyeGeometry, IrisCode)> {
    let g = fit_contours_with(mask, contour)?;
    let code = encode_with_geometry(image, mask, &g, gabor)?;
    Ok((g, code))
}

/// Segments, fits and encodes every image, keeping dataset order.
pub fn build_gallery(
    seg: &Segmenter,
    images: &[(String, GrayImage)],
    cfg: &PipelineConfig,
) -> Result<Vec<GalleryEntry>> {
    use rayon::prelude::*;
    images
        .par_iter()
        .map(|(name, img)| {
            let m = seg.segment(img)?;
            let (_, code) = encode_eye(img, &m, &cfg.contour, &cfg.gabor)?;
            Ok(GalleryEntry {
                id: name.clone(),
                identity: identity_of(name).to_string(),
                code,
            })
        })
        .collect()
}
