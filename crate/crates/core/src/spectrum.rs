//! Spectral power measurements used to characterise fields and textures.

use crate::image::Image2D;
use rustfft::{num_complex::Complex, FftPlanner};

/// Fraction of AC power at spatial frequencies above `cutoff` cycles per
/// image extent along either axis.
///
/// The image is mean-subtracted and mirror-extended to twice its size before
/// the 2D DFT, so the periodic wrap of the transform does not introduce a
/// spurious edge discontinuity. Returns 0 for a constant image.
pub fn high_frequency_fraction(img: &Image2D, cutoff: f64) -> f64 {
    let (w, h) = img.dims();
    let (ew, eh) = (2 * w, 2 * h);
    let mean = img.mean();
    let mut buf = vec![Complex::<f64>::new(0.0, 0.0); ew * eh];
    for y in 0..eh {
        let sy = if y < h { y } else { eh - 1 - y };
        for x in 0..ew {
            let sx = if x < w { x } else { ew - 1 - x };
            buf[y * ew + x].re = img.get(sx, sy) as f64 - mean;
        }
    }

    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(ew);
    for row in buf.chunks_exact_mut(ew) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(eh);
    let mut col = vec![Complex::new(0.0, 0.0); eh];
    for x in 0..ew {
        for y in 0..eh {
            col[y] = buf[y * ew + x];
        }
        col_fft.process(&mut col);
        for y in 0..eh {
            buf[y * ew + x] = col[y];
        }
    }

    // Bin k of the extended transform is k/2 cycles per original extent.
    let cycles = |k: usize, n: usize| {
        let signed = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        signed.abs() / 2.0
    };
    let (mut total, mut high) = (0.0, 0.0);
    for y in 0..eh {
        let fy = cycles(y, eh);
        for x in 0..ew {
            if x == 0 && y == 0 {
                continue;
            }
            let p = buf[y * ew + x].norm_sqr();
            total += p;
            if fy.max(cycles(x, ew)) > cutoff {
                high += p;
            }
        }
    }
    if total <= 0.0 {
        0.0
    } else {
        high / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn constant_image_has_no_ac_power() {
        assert_eq!(high_frequency_fraction(&Image2D::filled(8, 8, 0.4), 1.0), 0.0);
    }

    #[test]
    fn half_cosines_land_on_their_frequency() {
        // cos(pi * k * (x + 0.5) / n) has k/2 cycles across the image.
        let n = 32;
        let low = Image2D::from_fn(n, n, |x, _| (PI * 2.0 * (x as f64 + 0.5) / n as f64).cos() as f32);
        let high = Image2D::from_fn(n, n, |_, y| (PI * 12.0 * (y as f64 + 0.5) / n as f64).cos() as f32);
        assert!(high_frequency_fraction(&low, 2.0) < 1e-12);
        assert!(high_frequency_fraction(&high, 2.0) > 1.0 - 1e-12);
        assert!(high_frequency_fraction(&high, 6.0) < 1e-12);
    }
}
