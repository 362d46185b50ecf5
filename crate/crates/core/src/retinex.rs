//! Estimation factor (a normalized reflectance estimate) and the simple
//! illumination/reflectance split built on it.

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::tensor::{Real, Tape, Var};

pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Per-pixel chromaticity `I^c / (I^r + I^g + I^b + eps)`, interleaved `H x W x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimationFactor {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub epsilon: f64,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")))
    }
}

pub fn estimation_factor(img: &ImageTensor, epsilon: f64) -> Result<EstimationFactor> {
    check_epsilon(epsilon)?;
    let values = img
        .data()
        .chunks_exact(3)
        .flat_map(|p| {
            let denom = p[0] as f64 + p[1] as f64 + p[2] as f64 + epsilon;
            [p[0], p[1], p[2]].map(|v| (v as f64 / denom) as f32)
        })
        .collect();
    Ok(EstimationFactor {
        height: img.height(),
        width: img.width(),
        values,
        epsilon,
    })
}

/// Reflectance (the estimation factor as an RGB image) and illumination
/// (per-pixel channel mean, `H x W`).
pub fn decompose(img: &ImageTensor) -> Result<(ImageTensor, Vec<f32>)> {
    let factor = estimation_factor(img, DEFAULT_EPSILON)?;
    let reflectance = ImageTensor::new(img.height(), img.width(), factor.values)?;
    let illumination = img
        .data()
        .chunks_exact(3)
        .map(|p| ((p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0) as f32)
        .collect();
    Ok((reflectance, illumination))
}

/// Share of each channel in the total intensity of the image,
/// `sum_n I^c / (sum_n sum_c I + eps)`.
pub fn channel_averages(img: &ImageTensor, epsilon: f64) -> Result<[f64; 3]> {
    check_epsilon(epsilon)?;
    let mut sums = [0.0f64; 3];
    for p in img.data().chunks_exact(3) {
        for c in 0..3 {
            sums[c] += p[c] as f64;
        }
    }
    let total: f64 = sums.iter().sum::<f64>() + epsilon;
    Ok(sums.map(|s| s / total))
}

/// Estimation factor of a planar `[3, H, W]` tape tensor.
pub fn estimation_factor_var<T: Real>(tape: &mut Tape<T>, img: Var, epsilon: f64) -> Result<Var> {
    check_epsilon(epsilon)?;
    let total = tape.channel_sum(img)?;
    let denom = tape.add_scalar(total, epsilon);
    let denom = tape.repeat_channels(denom, 3)?;
    tape.div(img, denom)
}

/// Channel averages of a planar `[3, H, W]` tape tensor, shape `[3]`.
pub fn channel_averages_var<T: Real>(tape: &mut Tape<T>, img: Var, epsilon: f64) -> Result<Var> {
    check_epsilon(epsilon)?;
    let sums = tape.spatial_sum(img)?;
    let total = tape.sum(sums);
    let total = tape.add_scalar(total, epsilon);
    tape.div(sums, total)
}
