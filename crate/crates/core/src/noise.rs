//! Dark-region Gaussian noise used to build denoising training pairs.
//!
//! Noise is `(1 - I^c) * N(0, sigma^c)`: stronger in dark pixels and in the
//! red and blue channels, whose standard deviation is twice the green one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Per-channel multipliers applied to the drawn sigma (r, g, b).
    pub multipliers: [f64; 3],
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_min: 0.005,
            sigma_max: 0.01,
            multipliers: [2.0, 1.0, 2.0],
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min >= 0.0 && self.sigma_min <= self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma range [{}, {}] is invalid",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.multipliers.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::InvalidArgument("noise channel multipliers must be positive".into()));
        }
        Ok(())
    }
}

/// Independent generator for image `index` under `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws sigma uniformly from the configured range and returns the
/// per-channel standard deviations.
pub fn sample_sigma<R: Rng + ?Sized>(cfg: &NoiseConfig, rng: &mut R) -> [f64; 3] {
    let sigma = if cfg.sigma_max > cfg.sigma_min {
        rng.random_range(cfg.sigma_min..=cfg.sigma_max)
    } else {
        cfg.sigma_min
    };
    cfg.multipliers.map(|m| m * sigma)
}

/// Noise field (interleaved `H x W x 3`) for `img`; not yet added to it.
pub fn simulate_noise<R: Rng + ?Sized>(img: &ImageTensor, sigmas: [f64; 3], rng: &mut R) -> Result<Vec<f32>> {
    if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!("noise sigmas must be non-negative, got {sigmas:?}")));
    }
    Ok(img
        .data()
        .chunks_exact(3)
        .flat_map(|px| {
            let z: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
            std::array::from_fn::<f32, 3, _>(|c| ((1.0 - px[c] as f64) * sigmas[c] * z[c]) as f32)
        })
        .collect())
}

/// `clamp(img + noise, 0, 1)`.
pub fn add_noise<R: Rng + ?Sized>(img: &ImageTensor, sigmas: [f64; 3], rng: &mut R) -> Result<ImageTensor> {
    let noise = simulate_noise(img, sigmas, rng)?;
    let data = img.data().iter().zip(noise).map(|(v, n)| v + n).collect();
    ImageTensor::from_clamped(img.height(), img.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_sigma_gives_exact_triplet() {
        let cfg = NoiseConfig {
            sigma_min: 0.0075,
            sigma_max: 0.0075,
            ..Default::default()
        };
        let mut rng = stream_rng(1, 0);
        assert_eq!(sample_sigma(&cfg, &mut rng), [0.015, 0.0075, 0.015]);
    }

    #[test]
    fn red_and_blue_are_twice_green() {
        let cfg = NoiseConfig::default();
        let mut rng = stream_rng(3, 0);
        for _ in 0..100 {
            let [r, g, b] = sample_sigma(&cfg, &mut rng);
            assert_eq!(r, 2.0 * g);
            assert_eq!(b, 2.0 * g);
            assert!((0.005..=0.01).contains(&g));
        }
    }

    #[test]
    fn sigma_mean_is_centered() {
        let cfg = NoiseConfig::default();
        let mut rng = stream_rng(11, 0);
        let mean = (0..10_000).map(|_| sample_sigma(&cfg, &mut rng)[1]).sum::<f64>() / 10_000.0;
        assert!((mean - 0.0075).abs() / 0.0075 < 0.02, "{mean}");
    }

    #[test]
    fn white_pixels_and_zero_sigma_are_silent() {
        let white = ImageTensor::filled(4, 4, [1.0; 3]).unwrap();
        let mut rng = stream_rng(0, 0);
        assert!(simulate_noise(&white, [0.1; 3], &mut rng).unwrap().iter().all(|&v| v == 0.0));
        let gray = ImageTensor::filled(4, 4, [0.3; 3]).unwrap();
        assert!(simulate_noise(&gray, [0.0; 3], &mut rng).unwrap().iter().all(|&v| v == 0.0));
        assert!(simulate_noise(&gray, [-0.1, 0.0, 0.0], &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_field() {
        let img = ImageTensor::filled(8, 8, [0.2, 0.4, 0.1]).unwrap();
        let a = simulate_noise(&img, [0.02, 0.01, 0.02], &mut stream_rng(5, 2)).unwrap();
        let b = simulate_noise(&img, [0.02, 0.01, 0.02], &mut stream_rng(5, 2)).unwrap();
        let c = simulate_noise(&img, [0.02, 0.01, 0.02], &mut stream_rng(5, 3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn amplitude_falls_with_intensity() {
        let levels = [0.0f32, 0.25, 0.5, 0.75, 0.95];
        let mut last = f64::INFINITY;
        for (k, &l) in levels.iter().enumerate() {
            let img = ImageTensor::filled(64, 64, [l; 3]).unwrap();
            let n = simulate_noise(&img, [0.02, 0.01, 0.02], &mut stream_rng(9, k as u64)).unwrap();
            let mean_abs = n.iter().map(|v| v.abs() as f64).sum::<f64>() / n.len() as f64;
            assert!(mean_abs < last, "{l}: {mean_abs} !< {last}");
            last = mean_abs;
        }
    }

    #[test]
    fn noisy_image_is_clamped() {
        let img = ImageTensor::filled(16, 16, [0.0; 3]).unwrap();
        let noisy = add_noise(&img, [0.5; 3], &mut stream_rng(0, 0)).unwrap();
        assert!(noisy.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(noisy.data().iter().any(|&v| v > 0.0));
    }
}
