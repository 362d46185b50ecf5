//! Two-stage low-light enhancement: a curve-estimating Luminance-Net
//! trained without references, followed by an optional Denoising-Net
//! trained on self-generated noise.

pub mod checkpoint;
pub mod curve;
pub mod error;
pub mod gradsuite;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod noise;
pub mod retinex;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use imaging::ImageTensor;
