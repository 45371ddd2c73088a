//! Image containers and resampling between the coarse field grid and full
//! resolution.
//!
//! Coarse node `(i, j)` of a field with upsampling factor `f` sits at the
//! full-resolution position `(i*f + f/2 - 0.5, j*f + f/2 - 0.5)`, i.e. at the
//! centre of its `f x f` block. Beyond the outermost nodes the field is held
//! constant.

use crate::error::{Error, Result};

/// Single-channel floating-point raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image2D {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape {
                op: "image",
                dim: "pixel count",
                expected: width * height,
                found: pixels.len(),
            });
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(Error::Invalid(format!("non-finite pixel at index {i}")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0 && value.is_finite());
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels).expect("from_fn produced an invalid image")
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn min(&self) -> f32 {
        self.pixels.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.pixels.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.width, self.height, self.pixels.iter().map(|&p| f(p)).collect())
    }

    /// Elementwise combination of two equally sized images.
    pub fn zip_with(&self, other: &Image2D, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.ensure_same_dims("zip_with", other)?;
        let pixels = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.width, self.height, pixels)
    }

    pub(crate) fn ensure_same_dims(&self, what: &'static str, other: &Image2D) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimensions {
                what,
                expected_w: self.width,
                expected_h: self.height,
                found_w: other.width,
                found_h: other.height,
            });
        }
        Ok(())
    }
}

/// Coarse, strictly positive multiplicative field plus the integer factor
/// relating it to image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GainField {
    width: usize,
    height: usize,
    values: Vec<f32>,
    factor: usize,
}

pub const DEFAULT_FIELD_SIZE: usize = 16;
pub const DEFAULT_FACTOR: usize = 16;

impl GainField {
    pub fn new(width: usize, height: usize, values: Vec<f32>, factor: usize) -> Result<Self> {
        if width == 0 || height == 0 || factor == 0 {
            return Err(Error::Invalid(format!(
                "gain field {width}x{height} with factor {factor}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::Shape {
                op: "gain field",
                dim: "value count",
                expected: width * height,
                found: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Invalid(format!("gain field value {v} is not positive")));
        }
        Ok(Self {
            width,
            height,
            values,
            factor,
        })
    }

    pub fn constant(width: usize, height: usize, value: f32, factor: usize) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], factor)
    }

    /// Field whose block grid matches an image of the given size.
    pub fn ones_for(image_w: usize, image_h: usize, factor: usize) -> Result<Self> {
        check_divisible(image_w, factor)?;
        check_divisible(image_h, factor)?;
        Self::constant(image_w / factor, image_h / factor, 1.0, factor)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn factor(&self) -> usize {
        self.factor
    }

    #[inline]
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Full-resolution extent `(width * factor, height * factor)`.
    pub fn full_dims(&self) -> (usize, usize) {
        (self.width * self.factor, self.height * self.factor)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    /// Rescales so the coarse values average exactly one (up to rounding).
    pub fn normalized_to_unit_mean(&self) -> Self {
        let m = self.mean();
        let values = self.values.iter().map(|&v| (v as f64 / m) as f32).collect();
        Self {
            values,
            ..self.clone()
        }
    }

    pub fn as_image(&self) -> Image2D {
        Image2D::new(self.width, self.height, self.values.clone()).expect("field values are finite")
    }

    pub fn from_image(img: &Image2D, factor: usize) -> Result<Self> {
        Self::new(img.width(), img.height(), img.pixels().to_vec(), factor)
    }
}

fn check_divisible(size: usize, factor: usize) -> Result<()> {
    if factor == 0 || size % factor != 0 || size == 0 {
        return Err(Error::Indivisible { size, factor });
    }
    Ok(())
}

/// Interpolation taps `(i0, i1, t)` along one axis for every output index.
fn bilinear_taps(coarse: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    let last = (coarse - 1) as f64;
    (0..coarse * factor)
        .map(|x| {
            let t = ((x as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, last);
            let i0 = t.floor() as usize;
            let i1 = (i0 + 1).min(coarse - 1);
            (i0, i1, (t - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear upsampling of a coarse field to `target_w x target_h`, which must
/// equal the coarse size times the field's factor.
pub fn upsample_bilinear(field: &GainField, target_w: usize, target_h: usize) -> Result<Image2D> {
    check_divisible(target_w, field.width)?;
    check_divisible(target_h, field.height)?;
    let (fw, fh) = field.full_dims();
    if (target_w, target_h) != (fw, fh) {
        return Err(Error::Dimensions {
            what: "upsample target",
            expected_w: fw,
            expected_h: fh,
            found_w: target_w,
            found_h: target_h,
        });
    }
    let xs = bilinear_taps(field.width, field.factor);
    let ys = bilinear_taps(field.height, field.factor);
    let mut rows = vec![0f32; field.width];
    let mut pixels = Vec::with_capacity(target_w * target_h);
    for &(y0, y1, ty) in &ys {
        for (cx, r) in rows.iter_mut().enumerate() {
            let a = field.get(cx, y0);
            let b = field.get(cx, y1);
            *r = a + (b - a) * ty;
        }
        for &(x0, x1, tx) in &xs {
            let (a, b) = (rows[x0], rows[x1]);
            pixels.push(a + (b - a) * tx);
        }
    }
    Image2D::new(target_w, target_h, pixels)
}

/// Means of non-overlapping `factor x factor` blocks.
pub fn downsample_box(img: &Image2D, factor: usize) -> Result<Image2D> {
    check_divisible(img.width, factor)?;
    check_divisible(img.height, factor)?;
    let (cw, ch) = (img.width / factor, img.height / factor);
    let mut sums = vec![0f64; cw * ch];
    for y in 0..img.height {
        for x in 0..img.width {
            sums[(y / factor) * cw + x / factor] += img.get(x, y) as f64;
        }
    }
    let n = (factor * factor) as f64;
    Image2D::new(cw, ch, sums.into_iter().map(|s| (s / n) as f32).collect())
}

/// Affine map of `[min, max]` onto `[0, 1]`.
pub fn normalize_unit(img: &Image2D) -> Result<Image2D> {
    let (lo, hi) = (img.min(), img.max());
    if hi <= lo {
        return Err(Error::DegenerateRange(lo));
    }
    let (lo, span) = (lo as f64, hi as f64 - lo as f64);
    img.map(|p| (((p as f64 - lo) / span) as f32).clamp(0.0, 1.0))
}

/// `v / field`, with the upsampled field floored at `eps`.
pub fn divide_by_field(v: &Image2D, field: &GainField, eps: f32) -> Result<Image2D> {
    let full = upsample_bilinear(field, v.width(), v.height())?;
    v.zip_with(&full, |p, g| p / g.max(eps))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Tissue {
    Background = 0,
    Csf = 1,
    Gm = 2,
    Wm = 3,
}

impl Tissue {
    pub const ALL: [Tissue; 4] = [Tissue::Background, Tissue::Csf, Tissue::Gm, Tissue::Wm];
    pub const FOREGROUND: [Tissue; 3] = [Tissue::Csf, Tissue::Gm, Tissue::Wm];

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            0 => Some(Tissue::Background),
            1 => Some(Tissue::Csf),
            2 => Some(Tissue::Gm),
            3 => Some(Tissue::Wm),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Background => "Background",
            Tissue::Csf => "CSF",
            Tissue::Gm => "GM",
            Tissue::Wm => "WM",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueLabelMap {
    width: usize,
    height: usize,
    labels: Vec<Tissue>,
}

impl TissueLabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<Tissue>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Shape {
                op: "label map",
                dim: "label count",
                expected: width * height,
                found: labels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn labels(&self) -> &[Tissue] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Tissue {
        self.labels[y * self.width + x]
    }

    pub fn mask(&self, tissue: Tissue) -> Vec<bool> {
        self.labels.iter().map(|&t| t == tissue).collect()
    }

    pub fn count(&self, tissue: Tissue) -> usize {
        self.labels.iter().filter(|&&t| t == tissue).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_field_upsamples_to_constant() {
        let f = GainField::constant(4, 4, 1.25, 16).unwrap();
        let up = upsample_bilinear(&f, 64, 64).unwrap();
        assert!(up.pixels().iter().all(|&p| p == 1.25));
    }

    #[test]
    fn two_by_two_ramp_is_monotone() {
        let f = GainField::new(2, 2, vec![1.0, 2.0, 1.0, 2.0], 2).unwrap();
        let up = upsample_bilinear(&f, 4, 4).unwrap();
        for y in 0..4 {
            let row: Vec<f32> = (0..4).map(|x| up.get(x, y)).collect();
            assert!(row.windows(2).all(|w| w[0] <= w[1]), "{row:?}");
            assert_eq!(row[0], 1.0);
            assert_eq!(row[3], 2.0);
        }
    }

    #[test]
    fn block_centres_reproduce_coarse_values() {
        // With an odd factor the anchor i*f + f/2 - 0.5 lands on a pixel.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for factor in [1usize, 3, 5, 7] {
            let (w, h) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let vals: Vec<f32> = (0..w * h).map(|_| rng.gen_range(0.5..1.5)).collect();
            let f = GainField::new(w, h, vals, factor).unwrap();
            let up = upsample_bilinear(&f, w * factor, h * factor).unwrap();
            for j in 0..h {
                for i in 0..w {
                    let c = factor / 2;
                    assert_eq!(up.get(i * factor + c, j * factor + c), f.get(i, j));
                }
            }
        }
    }

    #[test]
    fn upsample_rejects_wrong_target() {
        let f = GainField::constant(4, 4, 1.0, 16).unwrap();
        assert!(matches!(
            upsample_bilinear(&f, 65, 64),
            Err(Error::Indivisible { size: 65, .. })
        ));
        assert!(matches!(
            upsample_bilinear(&f, 32, 32),
            Err(Error::Dimensions { .. })
        ));
    }

    #[test]
    fn box_downsample_hand_example() {
        #[rustfmt::skip]
        let img = Image2D::new(4, 4, vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 5.0, 0.0, 4.0,
            3.0, 5.0, 0.0, 0.0,
        ]).unwrap();
        let d = downsample_box(&img, 2).unwrap();
        assert_eq!(d.pixels(), &[1.0, 2.0, 4.0, 1.0]);
        assert!(matches!(downsample_box(&img, 3), Err(Error::Indivisible { .. })));
    }

    #[test]
    fn constant_round_trip() {
        let f = GainField::constant(4, 4, 0.8, 16).unwrap();
        let up = upsample_bilinear(&f, 64, 64).unwrap();
        let down = downsample_box(&up, 16).unwrap();
        assert!(down.pixels().iter().all(|&p| (p - 0.8).abs() < 1e-7));
    }

    #[test]
    fn normalize_unit_examples() {
        let img = Image2D::new(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(normalize_unit(&img).unwrap(), img);
        let img = Image2D::new(3, 1, vec![10.0, 20.0, 30.0]).unwrap();
        assert_eq!(normalize_unit(&img).unwrap().pixels(), &[0.0, 0.5, 1.0]);
        let flat = Image2D::filled(2, 2, 0.3);
        assert!(matches!(normalize_unit(&flat), Err(Error::DegenerateRange(_))));
    }

    #[test]
    fn labels_partition() {
        let labels = TissueLabelMap::new(2, 2, vec![Tissue::Background, Tissue::Csf, Tissue::Gm, Tissue::Wm]).unwrap();
        let total: usize = Tissue::ALL.iter().map(|&t| labels.count(t)).sum();
        assert_eq!(total, 4);
        assert!(TissueLabelMap::new(2, 2, vec![Tissue::Wm]).is_err());
    }

    fn coarse_field() -> impl Strategy<Value = GainField> {
        (1usize..6, 1usize..6, 1usize..9).prop_flat_map(|(w, h, f)| {
            prop::collection::vec(0.1f32..3.0, w * h)
                .prop_map(move |v| GainField::new(w, h, v, f).unwrap())
        })
    }

    proptest! {
        #[test]
        fn upsample_is_a_convex_combination(field in coarse_field()) {
            let (w, h) = field.full_dims();
            let up = upsample_bilinear(&field, w, h).unwrap();
            let lo = field.values().iter().copied().fold(f32::INFINITY, f32::min);
            let hi = field.values().iter().copied().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(up.min() >= lo * (1.0 - 1e-6));
            prop_assert!(up.max() <= hi * (1.0 + 1e-6));
        }

        #[test]
        fn downsample_preserves_global_mean(
            cw in 1usize..5, ch in 1usize..5, f in 1usize..6, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Image2D::from_fn(cw * f, ch * f, |_, _| rng.gen_range(0.0..1.0));
            let d = downsample_box(&img, f).unwrap();
            prop_assert!((d.mean() - img.mean()).abs() < 1e-6);
        }

        #[test]
        fn normalize_preserves_rank_order(vals in prop::collection::vec(-5.0f32..5.0, 2..64)) {
            prop_assume!(vals.iter().any(|&v| v != vals[0]));
            let img = Image2D::new(vals.len(), 1, vals.clone()).unwrap();
            let n = normalize_unit(&img).unwrap();
            prop_assert_eq!(n.min(), 0.0);
            prop_assert_eq!(n.max(), 1.0);
            for i in 0..vals.len() {
                for j in 0..vals.len() {
                    if vals[i] < vals[j] {
                        prop_assert!(n.pixels()[i] <= n.pixels()[j]);
                    }
                }
            }
        }
    }
}
