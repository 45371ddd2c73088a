//! Random smooth gain fields and the multiplicative imaging model
//! `v = u * g + n`.
//!
//! A field is drawn on a small latent grid of i.i.d. `U(-1, 1)` values,
//! band-limited interpolated onto the coarse field grid, and affinely mapped
//! so its peak-to-peak span is `2a` around a mean of exactly one, with the
//! amplitude `a ~ U(0, amplitude_max]` drawn per field.

use crate::error::{Error, Result};
use crate::image::{upsample_bilinear, GainField, Image2D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Largest accepted `amplitude_max`; real gain fields stay within 40%.
pub const MAX_AMPLITUDE: f64 = 0.40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldGenConfig {
    /// Upper bound of the per-field half span `a`.
    pub amplitude_max: f64,
    /// Side length of the latent random grid.
    pub control_grid: usize,
    /// Upper bound of the per-image noise standard deviation.
    pub noise_sigma_max: f64,
    /// Set from the run's global seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FieldGenConfig {
    fn default() -> Self {
        Self {
            amplitude_max: 0.30,
            control_grid: 4,
            noise_sigma_max: 0.02,
            seed: 0,
        }
    }
}

impl FieldGenConfig {
    /// `amplitude_max == 0` is accepted and yields identity fields.
    pub fn validate(&self, coarse_w: usize, coarse_h: usize) -> Result<()> {
        if !(0.0..=MAX_AMPLITUDE).contains(&self.amplitude_max) {
            return Err(Error::Config(format!(
                "fieldgen.amplitude_max = {} outside [0, {MAX_AMPLITUDE}]",
                self.amplitude_max
            )));
        }
        if self.control_grid == 0 || self.control_grid > coarse_w.min(coarse_h) {
            return Err(Error::Config(format!(
                "fieldgen.control_grid = {} must be in 1..={}",
                self.control_grid,
                coarse_w.min(coarse_h)
            )));
        }
        if !(self.noise_sigma_max >= 0.0 && self.noise_sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "fieldgen.noise_sigma_max = {} must be >= 0",
                self.noise_sigma_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
}

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec { sigma: 0.0 };

    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Invalid(format!("noise sigma {sigma} must be >= 0")));
        }
        Ok(Self { sigma })
    }

    /// `sigma ~ U(0, noise_sigma_max]`, or zero when the bound is zero.
    pub fn sample(cfg: &FieldGenConfig, rng: &mut impl Rng) -> Self {
        let u: f64 = rng.gen();
        Self {
            sigma: cfg.noise_sigma_max * (1.0 - u),
        }
    }
}

/// Independent stream for item `index` under `base_seed`.
pub fn item_rng(base_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(base_seed ^ index)
}

/// `(m, n)` matrix resampling `n` block-centred samples to `m` block-centred
/// positions with the cosine (DCT-II/III) interpolant, which contains no
/// frequencies above the `n`-sample Nyquist limit.
fn cosine_interp_matrix(n: usize, m: usize) -> Vec<f64> {
    let mut mat = vec![0.0; m * n];
    let nf = n as f64;
    for r in 0..m {
        let p = (r as f64 + 0.5) * nf / m as f64 - 0.5;
        for j in 0..n {
            let mut s = 1.0 / nf;
            for k in 1..n {
                let kf = k as f64;
                s += 2.0 / nf * (PI * kf * (j as f64 + 0.5) / nf).cos() * (PI * kf * (p + 0.5) / nf).cos();
            }
            mat[r * n + j] = s;
        }
    }
    mat
}

/// Draws one coarse field of size `coarse_w x coarse_h`.
pub fn generate_gain_field(
    cfg: &FieldGenConfig,
    coarse_w: usize,
    coarse_h: usize,
    factor: usize,
    rng: &mut impl Rng,
) -> Result<GainField> {
    cfg.validate(coarse_w, coarse_h)?;
    let u: f64 = rng.gen();
    let amplitude = cfg.amplitude_max * (1.0 - u);
    let c = cfg.control_grid;
    let latent: Vec<f64> = (0..c * c).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mx = cosine_interp_matrix(c, coarse_w);
    let my = cosine_interp_matrix(c, coarse_h);
    // rows = my * latent, then * mx^T
    let mut tmp = vec![0.0; coarse_h * c];
    for r in 0..coarse_h {
        for j in 0..c {
            tmp[r * c + j] = (0..c).map(|i| my[r * c + i] * latent[i * c + j]).sum();
        }
    }
    let mut smooth = vec![0.0; coarse_h * coarse_w];
    for r in 0..coarse_h {
        for q in 0..coarse_w {
            smooth[r * coarse_w + q] = (0..c).map(|j| tmp[r * c + j] * mx[q * c + j]).sum();
        }
    }

    let lo = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if amplitude == 0.0 || span <= f64::EPSILON {
        return GainField::constant(coarse_w, coarse_h, 1.0, factor);
    }
    let unit: Vec<f64> = smooth.iter().map(|v| (v - lo) / span).collect();
    let mean = unit.iter().sum::<f64>() / unit.len() as f64;
    let values = unit
        .iter()
        .map(|v| (1.0 + 2.0 * amplitude * (v - mean)) as f32)
        .collect();
    GainField::new(coarse_w, coarse_h, values, factor)
}

/// `v = u * upsample(g) + n`, with negative excursions clamped to zero and
/// noise excursions clamped to `3 sigma` above the noiseless maximum.
pub fn apply_forward_model(
    u: &Image2D,
    g: &GainField,
    noise: NoiseSpec,
    rng: &mut impl Rng,
) -> Result<Image2D> {
    let full = upsample_bilinear(g, u.width(), u.height())?;
    let clean = u.zip_with(&full, |a, b| a * b)?;
    if noise.sigma == 0.0 {
        return clean.map(|p| p.max(0.0));
    }
    let upper = clean.max() as f64 + 3.0 * noise.sigma;
    let normal = Normal::new(0.0, noise.sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let pixels = clean
        .pixels()
        .iter()
        .map(|&p| (p as f64 + normal.sample(rng)).clamp(0.0, upper) as f32)
        .collect();
    Image2D::new(u.width(), u.height(), pixels)
}
