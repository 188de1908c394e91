//! Key-value configuration files (TOML syntax).
//!
//! Training files hold top-level keys `lr`, `momentum`, `epochs`, `batch`, `seed` and
//! `alpha_mode` (`"dataset"` or a number in `[0, 1]`). Pipeline files hold the `[contour]`,
//! `[gabor]` and `[quant]` tables. Missing keys keep their defaults; unknown keys are errors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::GaborParams;
use crate::contour::ContourConfig;
use crate::error::{Error, Result};
use crate::quant::CALIBRATION_SIZE;
use crate::train::{AlphaMode, TrainConfig};

#[derive(Deserialize)]
#[serde(untagged)]
enum AlphaSetting {
    Name(String),
    Value(f64),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    lr: Option<f64>,
    momentum: Option<f64>,
    epochs: Option<usize>,
    batch: Option<usize>,
    seed: Option<u64>,
    alpha_mode: Option<AlphaSetting>,
}

fn parse_err(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Validation(format!("{what}: {e}"))
}

pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let f: TrainFile = toml::from_str(text).map_err(|e| parse_err("training config", e))?;
    let d = TrainConfig::default();
    let alpha_mode = match f.alpha_mode {
        None => d.alpha_mode,
        Some(AlphaSetting::Name(s)) if s == "dataset" => AlphaMode::Dataset,
        Some(AlphaSetting::Name(s)) => {
            return Err(Error::Validation(format!("alpha_mode {s:?}: expected \"dataset\" or a number")))
        }
        Some(AlphaSetting::Value(a)) => AlphaMode::Fixed(a),
    };
    let cfg = TrainConfig {
        learning_rate: f.lr.unwrap_or(d.learning_rate),
        momentum: f.momentum.unwrap_or(d.momentum),
        epochs: f.epochs.unwrap_or(d.epochs),
        batch_size: f.batch.unwrap_or(d.batch_size),
        seed: f.seed.unwrap_or(d.seed),
        alpha_mode,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    parse_train_config(&fs::read_to_string(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub calibration_size: usize,
    pub calibration_seed: u64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            calibration_size: CALIBRATION_SIZE,
            calibration_seed: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub contour: ContourConfig,
    pub gabor: GaborParams,
    pub quant: QuantConfig,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: PipelineConfig = toml::from_str(text).map_err(|e| parse_err("pipeline config", e))?;
        c.gabor.validate()?;
        if c.quant.calibration_size == 0 {
            return Err(Error::Validation("calibration_size must be positive".into()));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
