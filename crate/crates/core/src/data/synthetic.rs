//! Synthetic volumes: smooth random blobs and noisy, mask-correlated images.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{sample_rng, Sample, SamplePool};
use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

const MAX_ATTEMPTS: usize = 100;

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub count: usize,
    pub shape: Vec<usize>,
    /// Accepted foreground fraction range.
    pub min_fraction: f64,
    pub max_fraction: f64,
    /// Range of the foreground/background intensity gap.
    pub contrast: (f64, f64),
    /// Standard deviation of the additive white noise.
    pub noise_std: f64,
    /// Amplitude of the smooth intensity inhomogeneity.
    pub bias_amplitude: f64,
    /// Number of bright blobs in the image that are not part of the object.
    pub distractors: (usize, usize),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 100,
            shape: vec![64, 64],
            min_fraction: 0.05,
            max_fraction: 0.60,
            contrast: (0.6, 1.4),
            noise_std: 0.6,
            bias_amplitude: 0.5,
            distractors: (0, 2),
        }
    }
}

struct Bump {
    center: [f64; 3],
    sigma: [f64; 3],
    amplitude: f64,
}

impl Bump {
    fn random<R: Rng>(rng: &mut R, ext: [usize; 3], ndim: usize, sigma_range: (f64, f64), margin: f64) -> Self {
        let mut center = [0.0; 3];
        let mut sigma = [1.0; 3];
        let base: f64 = rng.gen_range(sigma_range.0..sigma_range.1);
        for a in 0..ndim {
            let n = ext[a] as f64;
            center[a] = rng.gen_range(margin * n..(1.0 - margin) * n);
            sigma[a] = base * n * rng.gen_range(0.75..1.25);
        }
        Self {
            center,
            sigma,
            amplitude: 1.0,
        }
    }

    fn at(&self, p: [f64; 3], ndim: usize) -> f64 {
        let mut q = 0.0;
        for a in 0..ndim {
            let t = (p[a] - self.center[a]) / self.sigma[a];
            q += t * t;
        }
        self.amplitude * (-0.5 * q).exp()
    }
}

fn field(bumps: &[Bump], ext: [usize; 3], ndim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(ext.iter().product());
    for i in 0..ext[0] {
        for j in 0..ext[1] {
            for k in 0..ext[2] {
                let p = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
                out.push(bumps.iter().map(|b| b.at(p, ndim)).sum());
            }
        }
    }
    out
}

fn generate_one(cfg: &SyntheticConfig, index: usize) -> Result<Sample> {
    let mut rng = sample_rng(cfg.seed, index as u64);
    let ndim = cfg.shape.len();
    let ext = crate::volume::pad3(&cfg.shape, 1);
    let n: usize = ext.iter().product();

    let mut mask = None;
    for _ in 0..MAX_ATTEMPTS {
        let count = rng.gen_range(2..=4);
        let bumps: Vec<Bump> = (0..count)
            .map(|_| Bump::random(&mut rng, ext, ndim, (0.08, 0.2), 0.2))
            .collect();
        let f = field(&bumps, ext, ndim);
        let bits: Vec<bool> = f.iter().map(|&v| v > 0.5).collect();
        let frac = bits.iter().filter(|&&b| b).count() as f64 / n as f64;
        if (cfg.min_fraction..=cfg.max_fraction).contains(&frac) {
            mask = Some(bits);
            break;
        }
    }
    let bits = mask.ok_or(Error::GenerationRetryExceeded {
        index,
        attempts: MAX_ATTEMPTS,
    })?;

    let contrast = rng.gen_range(cfg.contrast.0..=cfg.contrast.1);
    let offset = rng.gen_range(-0.5..0.5);
    let mut bias: Vec<Bump> = (0..2)
        .map(|_| Bump::random(&mut rng, ext, ndim, (0.25, 0.5), 0.0))
        .collect();
    for b in &mut bias {
        b.amplitude = rng.gen_range(-cfg.bias_amplitude..=cfg.bias_amplitude);
    }
    let n_distract = rng.gen_range(cfg.distractors.0..=cfg.distractors.1);
    let mut distract: Vec<Bump> = (0..n_distract)
        .map(|_| Bump::random(&mut rng, ext, ndim, (0.03, 0.07), 0.1))
        .collect();
    for d in &mut distract {
        d.amplitude = contrast * rng.gen_range(0.6..1.0);
    }
    let bias_field = field(&bias, ext, ndim);
    let distract_field = field(&distract, ext, ndim);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let image: Vec<f64> = (0..n)
        .map(|v| {
            let fg = if bits[v] { contrast } else { 0.0 };
            let value = offset + fg + bias_field[v] + distract_field[v].min(contrast) + noise.sample(&mut rng);
            // Quantise to single precision so images are stored losslessly as float32.
            value as f32 as f64
        })
        .collect();

    Ok(Sample {
        id: format!("case_{index:04}"),
        image: Volume::new(&cfg.shape, VolumeKind::Image, image)?,
        mask: Volume::from_mask(&cfg.shape, &bits)?,
    })
}

/// Generates `cfg.count` samples; sample `i` depends only on `(cfg, i)`.
pub fn generate_with(cfg: &SyntheticConfig) -> Result<SamplePool> {
    if !(2..=3).contains(&cfg.shape.len()) || cfg.shape.iter().any(|&s| s < 4) {
        return Err(Error::Config(format!(
            "synthetic volumes need 2 or 3 axes of length >= 4, got {:?}",
            cfg.shape
        )));
    }
    let samples = (0..cfg.count).map(|i| generate_one(cfg, i)).collect::<Result<_>>()?;
    Ok(SamplePool { samples })
}

/// Default generator settings for the given seed, count and shape.
pub fn generate_synthetic(seed: u64, count: usize, shape: &[usize], dims: usize) -> Result<SamplePool> {
    if shape.len() != dims {
        return Err(Error::Config(format!("{dims}D dataset with shape {shape:?}")));
    }
    generate_with(&SyntheticConfig {
        seed,
        count,
        shape: shape.to_vec(),
        ..SyntheticConfig::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_non_degenerate() {
        let a = generate_synthetic(3, 6, &[32, 32], 2).unwrap();
        let b = generate_synthetic(3, 6, &[32, 32], 2).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(4, 6, &[32, 32], 2).unwrap();
        assert_ne!(a.samples[0].image, c.samples[0].image);
        for s in &a.samples {
            let frac = s.mask.data().iter().sum::<f64>() / s.mask.len() as f64;
            assert!((0.05..=0.60).contains(&frac), "{frac}");
            s.mask.validate().unwrap();
        }
    }

    #[test]
    fn sample_depends_only_on_index() {
        let small = generate_synthetic(9, 2, &[16, 16, 8], 3).unwrap();
        let large = generate_synthetic(9, 5, &[16, 16, 8], 3).unwrap();
        assert_eq!(small.samples[..], large.samples[..2]);
    }

    #[test]
    fn impossible_fraction_fails() {
        let cfg = SyntheticConfig {
            count: 1,
            shape: vec![16, 16],
            min_fraction: 0.99,
            max_fraction: 1.0,
            ..SyntheticConfig::default()
        };
        assert!(matches!(
            generate_with(&cfg),
            Err(Error::GenerationRetryExceeded { .. })
        ));
    }

    #[test]
    fn images_are_float32_exact() {
        let pool = generate_synthetic(1, 2, &[16, 16], 2).unwrap();
        for s in &pool.samples {
            assert!(s.image.data().iter().all(|&v| v as f32 as f64 == v));
        }
    }
}
