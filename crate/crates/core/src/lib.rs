//! FCN-based iris recognition.
//!
//! The pipeline runs FCN segmentation, contour fitting, rubber-sheet normalization, log-Gabor
//! encoding and Hamming matching. Alongside it live an 8-bit dynamic fixed-point quantization
//! flow and a bit-exact model of a tiled GEMM accelerator.
//!
//! Float code is generic over [`Scalar`] (`f32` for inference and training, `f64` for
//! gradient checks); DFP code works on `i8` codes with per-layer fractional lengths.

pub mod accel;
pub mod codec;
pub mod config;
pub mod contour;
pub mod error;
pub mod eval;
pub mod fcn;
pub mod formats;
pub mod image;
pub mod mask;
pub mod pipeline;
pub mod quant;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::BinaryMask;
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type Network32 = fcn::Network<f32>;
pub type Network64 = fcn::Network<f64>;
