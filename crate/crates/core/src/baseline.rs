//! Classical reference corrector: a smooth polynomial surface fitted to the
//! log intensities of the foreground by iteratively reweighted least squares.

use crate::error::{Error, Result};
use crate::getnet::{CORRECTION_EPS, DOWNSCALE};
use crate::image::{divide_by_field, GainField, Image2D};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Offset added before taking logs.
pub const LOG_EPS: f64 = 1e-6;
pub const CHOLESKY_JITTER: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Maximum total degree of the 2D Legendre surface.
    pub poly_degree: usize,
    /// Foreground threshold as a fraction of the maximum intensity.
    pub mask_threshold: f64,
    pub irls_iters: usize,
    /// Huber transition point, in log units.
    pub huber_delta: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            poly_degree: 4,
            mask_threshold: 0.05,
            irls_iters: 5,
            huber_delta: 0.1,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.poly_degree < 1 {
            return Err(Error::Config("poly_degree must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.mask_threshold) {
            return Err(Error::Config("mask_threshold must lie in [0, 1)".into()));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config("huber_delta must be > 0".into()));
        }
        Ok(())
    }

    /// Number of basis terms `(i, j)` with `i + j <= degree`.
    pub fn term_count(&self) -> usize {
        (self.poly_degree + 1) * (self.poly_degree + 2) / 2
    }
}

/// `P_0(t) .. P_degree(t)` by the three-term recurrence.
pub fn legendre(degree: usize, t: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(degree + 1);
    p.push(1.0);
    if degree >= 1 {
        p.push(t);
    }
    for n in 1..degree {
        let nf = n as f64;
        p.push(((2.0 * nf + 1.0) * t * p[n] - nf * p[n - 1]) / (nf + 1.0));
    }
    p
}

fn terms(degree: usize) -> Vec<(usize, usize)> {
    let mut t = Vec::new();
    for total in 0..=degree {
        for i in 0..=total {
            t.push((i, total - i));
        }
    }
    t
}

/// Maps pixel coordinate `p` (pixel centres at `p + 0.5`) onto `[-1, 1]`.
fn normalized(p: f64, extent: usize) -> f64 {
    p / extent as f64 * 2.0 - 1.0
}

/// Fitted log-domain surface.
#[derive(Clone, Debug, PartialEq)]
pub struct LogPolynomial {
    pub degree: usize,
    pub width: usize,
    pub height: usize,
    pub coefficients: Vec<f64>,
    /// Range of the surface over the fitted pixels; coarse samples are
    /// clamped to it.
    pub support: (f64, f64),
}

impl LogPolynomial {
    /// Surface value at continuous pixel coordinates.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let px = legendre(self.degree, normalized(x, self.width));
        let py = legendre(self.degree, normalized(y, self.height));
        terms(self.degree)
            .iter()
            .zip(&self.coefficients)
            .map(|((i, j), c)| c * px[*i] * py[*j])
            .sum()
    }

    /// `exp(p)` sampled at block centres (clamped to `support`), rescaled to mean 1.
    pub fn coarse_field(&self, factor: usize) -> Result<GainField> {
        if self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::Indivisible {
                size: self.width,
                factor,
            });
        }
        let (cw, ch) = (self.width / factor, self.height / factor);
        let f = factor as f64;
        let logs: Vec<f64> = (0..cw * ch)
            .map(|n| {
                self.eval(((n % cw) as f64 + 0.5) * f, ((n / cw) as f64 + 0.5) * f)
                    .clamp(self.support.0, self.support.1)
            })
            .collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let values = logs.iter().map(|l| (l - mean).exp() as f32).collect();
        Ok(GainField::new(cw, ch, values, factor)?.normalized_to_unit_mean())
    }
}

/// Fit result with the Huber objective recorded before the first reweighting
/// and after every iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct FitTrace {
    pub surface: LogPolynomial,
    pub objective: Vec<f64>,
    pub masked_pixels: usize,
}

fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn fit_log_polynomial_trace(v: &Image2D, cfg: &BaselineConfig) -> Result<FitTrace> {
    cfg.validate()?;
    let (w, h) = v.dims();
    let max = v.max() as f64;
    let threshold = cfg.mask_threshold * max;
    let masked: Vec<(usize, usize, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter_map(|(x, y)| {
            let p = v.get(x, y) as f64;
            (max > 0.0 && p > threshold).then(|| (x, y, (p + LOG_EPS).ln()))
        })
        .collect();
    if masked.is_empty() {
        return Err(Error::EmptyFitMask);
    }

    let d = cfg.poly_degree;
    let tl = terms(d);
    let px: Vec<Vec<f64>> = (0..w).map(|x| legendre(d, normalized(x as f64 + 0.5, w))).collect();
    let py: Vec<Vec<f64>> = (0..h).map(|y| legendre(d, normalized(y as f64 + 0.5, h))).collect();
    let n = masked.len();
    let a = DMatrix::from_fn(n, tl.len(), |r, c| {
        let (x, y, _) = masked[r];
        px[x][tl[c].0] * py[y][tl[c].1]
    });
    let y = DVector::from_iterator(n, masked.iter().map(|m| m.2));

    let mut weights = DVector::from_element(n, 1.0);
    let mut objective = Vec::with_capacity(cfg.irls_iters + 1);
    let mut coef = DVector::zeros(tl.len());
    for _ in 0..=cfg.irls_iters {
        let mut wa = a.clone();
        for (mut row, wt) in wa.row_iter_mut().zip(weights.iter()) {
            row *= *wt;
        }
        let mut normal = a.tr_mul(&wa);
        for i in 0..tl.len() {
            normal[(i, i)] += CHOLESKY_JITTER;
        }
        let rhs = wa.tr_mul(&y);
        let max_diag = (0..tl.len()).map(|i| normal[(i, i)]).fold(0.0, f64::max);
        let chol = normal.cholesky().ok_or(Error::RankDeficient)?;
        // A pivot no larger than the jitter means the system was singular.
        let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, d| m.min(d * d));
        if min_pivot < (100.0 * CHOLESKY_JITTER).max(1e-10 * max_diag) {
            return Err(Error::RankDeficient);
        }
        coef = chol.solve(&rhs);
        if coef.iter().any(|c| !c.is_finite()) {
            return Err(Error::RankDeficient);
        }
        let resid = &y - &a * &coef;
        objective.push(resid.iter().map(|r| huber(*r, cfg.huber_delta)).sum());
        for (wt, r) in weights.iter_mut().zip(resid.iter()) {
            let m = r.abs();
            *wt = if m <= cfg.huber_delta { 1.0 } else { cfg.huber_delta / m };
        }
    }

    let fitted = &a * &coef;
    let support = fitted.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(*p), hi.max(*p)));
    Ok(FitTrace {
        surface: LogPolynomial {
            degree: d,
            width: w,
            height: h,
            coefficients: coef.iter().copied().collect(),
            support,
        },
        objective,
        masked_pixels: n,
    })
}

/// Coarse gain field estimate from the fitted log surface.
pub fn fit_log_polynomial(v: &Image2D, cfg: &BaselineConfig) -> Result<GainField> {
    fit_log_polynomial_trace(v, cfg)?.surface.coarse_field(DOWNSCALE)
}

/// `v / upsample(fit_log_polynomial(v))`.
pub fn baseline_correct(v: &Image2D, cfg: &BaselineConfig) -> Result<Image2D> {
    divide_by_field(v, &fit_log_polynomial(v, cfg)?, CORRECTION_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_phantom, PhantomSpec};
    use crate::fieldgen::{apply_forward_model, generate_gain_field, item_rng, FieldGenConfig, NoiseSpec};

    #[test]
    fn legendre_matches_closed_forms() {
        for t in [-1.0, -0.3, 0.0, 0.55, 1.0] {
            let p = legendre(4, t);
            assert!((p[2] - (3.0 * t * t - 1.0) / 2.0).abs() < 1e-12);
            assert!((p[3] - (5.0 * t * t * t - 3.0 * t) / 2.0).abs() < 1e-12);
            assert!((p[4] - (35.0 * t.powi(4) - 30.0 * t * t + 3.0) / 8.0).abs() < 1e-12);
        }
        assert_eq!(BaselineConfig::default().term_count(), 15);
    }

    #[test]
    fn planted_polynomial_is_recovered() {
        let n = 64;
        let planted = |x: f64, y: f64| {
            let (s, t) = (normalized(x, n), normalized(y, n));
            0.2 * s - 0.15 * t + 0.1 * s * t - 0.12 * s * s + 0.05 * t * t
        };
        let v = Image2D::from_fn(n, n, |x, y| (0.6 * planted(x as f64 + 0.5, y as f64 + 0.5).exp()) as f32);
        let est = fit_log_polynomial(&v, &BaselineConfig::default()).unwrap();

        let c = n / DOWNSCALE;
        let f = DOWNSCALE as f64;
        let logs: Vec<f64> = (0..c * c)
            .map(|k| planted(((k % c) as f64 + 0.5) * f, ((k / c) as f64 + 0.5) * f))
            .collect();
        let truth: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
        let mean = truth.iter().sum::<f64>() / truth.len() as f64;
        let mae: f64 = truth
            .iter()
            .zip(est.values())
            .map(|(t, e)| (t / mean - *e as f64).abs())
            .sum::<f64>()
            / truth.len() as f64;
        assert!(mae < 1e-3, "{mae}");

        let corrected = baseline_correct(&v, &BaselineConfig::default()).unwrap();
        assert!(corrected.pixels().iter().all(|p| p.is_finite() && *p > 0.0));
    }

    #[test]
    fn constant_image_gives_unit_field() {
        let f = fit_log_polynomial(&Image2D::filled(32, 32, 0.4), &BaselineConfig::default()).unwrap();
        for v in f.values() {
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn coarse_samples_stay_within_fitted_range() {
        // Bright disc on a zero background: corner cells lie outside the mask.
        let v = Image2D::from_fn(64, 64, |x, y| {
            let (dx, dy) = (x as f32 - 31.5, y as f32 - 31.5);
            let r2 = dx * dx + dy * dy;
            if r2 < 600.0 { 1.0 - r2 / 1200.0 } else { 0.0 }
        });
        let trace = fit_log_polynomial_trace(&v, &BaselineConfig::default()).unwrap();
        let (lo, hi) = trace.surface.support;
        let f = trace.surface.coarse_field(DOWNSCALE).unwrap();
        let (fmin, fmax) = f.values().iter().fold((f32::MAX, 0f32), |(a, b), x| (a.min(*x), b.max(*x)));
        assert!(((fmax / fmin) as f64).ln() <= hi - lo + 1e-5);
    }

    #[test]
    fn huber_objective_never_increases() {
        let (u, _) = generate_phantom(&PhantomSpec::centered(64), 0).unwrap();
        for seed in 0..10 {
            let mut rng = item_rng(seed, 0);
            let g = generate_gain_field(&FieldGenConfig::default(), 4, 4, DOWNSCALE, &mut rng).unwrap();
            let v = apply_forward_model(&u, &g, NoiseSpec::new(0.01).unwrap(), &mut rng).unwrap();
            let trace = fit_log_polynomial_trace(&v, &BaselineConfig::default()).unwrap();
            for w in trace.objective.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12, "{:?}", trace.objective);
            }
            let est = fit_log_polynomial(&v, &BaselineConfig::default()).unwrap();
            assert!(est.values().iter().all(|x| *x > 0.0));
            assert!((est.mean() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_mask_and_bad_config_are_errors() {
        let zero = Image2D::filled(32, 32, 0.0);
        assert!(matches!(
            fit_log_polynomial(&zero, &BaselineConfig::default()),
            Err(Error::EmptyFitMask)
        ));
        let cfg = BaselineConfig {
            poly_degree: 0,
            ..BaselineConfig::default()
        };
        assert!(fit_log_polynomial(&Image2D::filled(32, 32, 1.0), &cfg).is_err());
    }

    #[test]
    fn too_few_pixels_is_rank_deficient() {
        let v = Image2D::from_fn(32, 32, |x, y| if x == 5 && y == 5 { 1.0 } else { 0.0 });
        assert!(matches!(
            fit_log_polynomial(&v, &BaselineConfig::default()),
            Err(Error::RankDeficient)
        ));
    }
}
