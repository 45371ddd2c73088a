//! The field-estimation network: a small residual encoder that maps an image
//! to a coarse gain field 16 times smaller along each axis.

use crate::autodiff::{Graph, Real, Tensor4, Var};
use crate::error::{Error, Result};
use crate::image::{divide_by_field, GainField, Image2D};
use crate::io;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

/// Total downscale between input image and output field.
pub const DOWNSCALE: usize = 16;
pub const LEAKY_SLOPE: f64 = 0.1;
/// Division guard used when applying an estimated field.
pub const CORRECTION_EPS: f32 = 1e-6;

const MAGIC: &[u8; 4] = b"GNET";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    StemConv,
    ResidualBlock,
    HeadConv,
}

impl LayerKind {
    fn name(self) -> &'static str {
        match self {
            LayerKind::StemConv => "stem_conv",
            LayerKind::ResidualBlock => "residual_block",
            LayerKind::HeadConv => "head_conv",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "stem_conv" => Ok(LayerKind::StemConv),
            "residual_block" => Ok(LayerKind::ResidualBlock),
            "head_conv" => Ok(LayerKind::HeadConv),
            _ => Err(Error::Checkpoint(format!("unknown layer kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub channels: usize,
    pub stride: usize,
}

impl LayerSpec {
    /// Parameter tensor shapes in storage order: (weight, bias) per conv.
    fn param_shapes(&self) -> Vec<[usize; 4]> {
        let (i, o) = (self.in_channels, self.channels);
        match self.kind {
            LayerKind::StemConv => vec![[o, i, 3, 3], [1, o, 1, 1]],
            LayerKind::ResidualBlock => vec![
                [o, i, 3, 3],
                [1, o, 1, 1],
                [o, o, 3, 3],
                [1, o, 1, 1],
                [o, i, 1, 1],
                [1, o, 1, 1],
            ],
            LayerKind::HeadConv => vec![[o, i, 1, 1], [1, o, 1, 1]],
        }
    }

    fn param_names(&self, index: usize) -> Vec<String> {
        let parts: &[&str] = match self.kind {
            LayerKind::StemConv | LayerKind::HeadConv => &["weight", "bias"],
            LayerKind::ResidualBlock => &[
                "conv1.weight",
                "conv1.bias",
                "conv2.weight",
                "conv2.bias",
                "skip.weight",
                "skip.bias",
            ],
        };
        parts
            .iter()
            .map(|p| format!("{}{}.{}", self.kind.name(), index, p))
            .collect()
    }
}

/// Layer layout for a given base width: stem (stride 1), four residual blocks
/// (stride 2 each) with widths c, 2c, 4c, 4c, and a 1-channel head.
pub fn architecture(base_channels: usize) -> Vec<LayerSpec> {
    let c = base_channels;
    let mut layers = vec![LayerSpec {
        kind: LayerKind::StemConv,
        in_channels: 1,
        channels: c,
        stride: 1,
    }];
    let mut prev = c;
    for width in [c, 2 * c, 4 * c, 4 * c] {
        layers.push(LayerSpec {
            kind: LayerKind::ResidualBlock,
            in_channels: prev,
            channels: width,
            stride: 2,
        });
        prev = width;
    }
    layers.push(LayerSpec {
        kind: LayerKind::HeadConv,
        in_channels: prev,
        channels: 1,
        stride: 1,
    });
    layers
}

#[derive(Clone, Debug, PartialEq)]
pub struct GetNetModel {
    input_size: usize,
    base_channels: usize,
    layers: Vec<LayerSpec>,
    params: Vec<Tensor4<f32>>,
    names: Vec<String>,
}

/// Builds a freshly initialized model: He-normal convolution weights, zero
/// biases and a zero head, so the initial output field is exactly 1.
pub fn build_getnet(input_size: usize, base_channels: usize, seed: u64) -> Result<GetNetModel> {
    if input_size == 0 || input_size % DOWNSCALE != 0 {
        return Err(Error::Indivisible {
            size: input_size,
            factor: DOWNSCALE,
        });
    }
    if base_channels == 0 {
        return Err(Error::Invalid("base_channels must be positive".into()));
    }
    let layers = architecture(base_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for layer in &layers {
        // Shapes alternate weight, bias.
        for (i, shape) in layer.param_shapes().into_iter().enumerate() {
            if i % 2 == 1 || layer.kind == LayerKind::HeadConv {
                params.push(Tensor4::zeros(shape));
                continue;
            }
            let fan_in = shape[1] * shape[2] * shape[3];
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            params.push(Tensor4::from_fn(shape, |_| normal.sample(&mut rng) as f32));
        }
    }
    GetNetModel::from_parts(input_size, base_channels, layers, params)
}

impl GetNetModel {
    fn from_parts(
        input_size: usize,
        base_channels: usize,
        layers: Vec<LayerSpec>,
        params: Vec<Tensor4<f32>>,
    ) -> Result<Self> {
        let names: Vec<String> = layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.param_names(i))
            .collect();
        let shapes: Vec<[usize; 4]> = layers.iter().flat_map(|l| l.param_shapes()).collect();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| *s != p.shape()) {
            return Err(Error::Invalid("parameters do not match the layer manifest".into()));
        }
        Ok(Self {
            input_size,
            base_channels,
            layers,
            params,
            names,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    pub fn coarse_size(&self) -> usize {
        self.input_size / DOWNSCALE
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor4<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor4<f32>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor4::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor4::is_finite)
    }

    /// Parameters converted to `T` and added to `graph` as trainable leaves.
    pub fn param_leaves<T: Real>(&self, graph: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| graph.leaf(p.cast::<T>(), requires_grad))
            .collect()
    }

    fn check_dims(&self, img: &Image2D) -> Result<()> {
        if img.dims() != (self.input_size, self.input_size) {
            return Err(Error::Dimensions {
                what: "GetNet input",
                expected_w: self.input_size,
                expected_h: self.input_size,
                found_w: img.width(),
                found_h: img.height(),
            });
        }
        Ok(())
    }

    /// Stacks images into a `(n, 1, size, size)` tensor after checking dims.
    pub fn batch_tensor<T: Real>(&self, images: &[&Image2D]) -> Result<Tensor4<T>> {
        let s = self.input_size;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for img in images {
            self.check_dims(img)?;
            data.extend(img.pixels().iter().map(|&p| T::from_f64(p as f64)));
        }
        Tensor4::new([images.len(), 1, s, s], data)
    }

    /// Head pre-activations `h(v)` for a batch, one coarse grid per image.
    pub fn head_preactivations(&self, images: &[&Image2D]) -> Result<Vec<Vec<f32>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::<f32>::new();
        let params = self.param_leaves(&mut g, false);
        let x = g.leaf(self.batch_tensor(images)?, false);
        let h = forward(&mut g, &self.layers, &params, x)?;
        let per = self.coarse_size() * self.coarse_size();
        Ok(g.value(h)?.data().chunks(per).map(<[f32]>::to_vec).collect())
    }

    /// Raw `exp(h(v))` without gauge fixing.
    pub fn raw_field(&self, v: &Image2D) -> Result<GainField> {
        let h = self.head_preactivations(&[v])?.remove(0);
        let c = self.coarse_size();
        GainField::new(c, c, exp_clamped(&h), DOWNSCALE)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = self.manifest_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 {
            return Err(bad("file too short"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(bad("CRC mismatch"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
        let text = body
            .get(12..12 + len)
            .ok_or_else(|| bad("truncated manifest"))?;
        let text = std::str::from_utf8(text).map_err(|_| bad("manifest is not UTF-8"))?;
        let (input_size, base_channels, layers) = parse_manifest(text)?;
        if layers != architecture(base_channels) {
            return Err(bad("layer manifest does not match the supported architecture"));
        }
        if input_size == 0 || input_size % DOWNSCALE != 0 {
            return Err(bad("input size not divisible by 16"));
        }

        let mut payload = &body[12 + len..];
        let mut params = Vec::new();
        for shape in layers.iter().flat_map(|l| l.param_shapes()) {
            let n: usize = shape.iter().product();
            if payload.len() < 4 * n {
                return Err(bad("truncated parameters"));
            }
            let (chunk, rest) = payload.split_at(4 * n);
            let data: Vec<f32> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite parameter"));
            }
            params.push(Tensor4::new(shape, data)?);
            payload = rest;
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes after parameters"));
        }
        Self::from_parts(input_size, base_channels, layers, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn manifest_text(&self) -> String {
        let mut s = format!("input_size {}\nbase_channels {}\n", self.input_size, self.base_channels);
        for l in &self.layers {
            s.push_str(&format!("{} {} {} {}\n", l.kind.name(), l.in_channels, l.channels, l.stride));
        }
        s
    }
}

fn parse_manifest(text: &str) -> Result<(usize, usize, Vec<LayerSpec>)> {
    let bad = |m: String| Error::Checkpoint(m);
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number {s:?}")));
    let mut lines = text.lines();
    let mut header = |key: &str| -> Result<usize> {
        let line = lines.next().ok_or_else(|| bad(format!("missing {key}")))?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => num(v),
            _ => Err(bad(format!("expected {key}, found {line:?}"))),
        }
    };
    let input_size = header("input_size")?;
    let base_channels = header("base_channels")?;
    let mut layers = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(' ').collect();
        let [kind, i, o, s] = f[..] else {
            return Err(bad(format!("bad layer line {line:?}")));
        };
        layers.push(LayerSpec {
            kind: LayerKind::parse(kind)?,
            in_channels: num(i)?,
            channels: num(o)?,
            stride: num(s)?,
        });
    }
    Ok((input_size, base_channels, layers))
}

fn exp_clamped(h: &[f32]) -> Vec<f32> {
    let lim = crate::autodiff::EXP_CLAMP as f32;
    h.iter().map(|v| v.clamp(-lim, lim).exp()).collect()
}

/// Network forward pass for a `(n, 1, s, s)` input, returning the head
/// pre-activation of shape `(n, 1, s/16, s/16)`. `params` follow the storage
/// order of [`GetNetModel::params`].
pub fn forward<T: Real>(graph: &mut Graph<T>, layers: &[LayerSpec], params: &[Var], x: Var) -> Result<Var> {
    let mut p = params.iter().copied();
    let mut next = || p.next().ok_or(Error::Invalid("too few parameters for the layer manifest".into()));
    let mut h = x;
    for layer in layers {
        match layer.kind {
            LayerKind::StemConv => {
                let (w, b) = (next()?, next()?);
                let y = graph.conv2d(h, w, Some(b), layer.stride, 1)?;
                h = graph.leaky_relu(y, LEAKY_SLOPE)?;
            }
            LayerKind::ResidualBlock => {
                let (w1, b1, w2, b2, ws, bs) = (next()?, next()?, next()?, next()?, next()?, next()?);
                let a = graph.conv2d(h, w1, Some(b1), layer.stride, 1)?;
                let a = graph.leaky_relu(a, LEAKY_SLOPE)?;
                let a = graph.conv2d(a, w2, Some(b2), 1, 1)?;
                let skip = graph.conv2d(h, ws, Some(bs), layer.stride, 0)?;
                let sum = graph.add(a, skip)?;
                h = graph.leaky_relu(sum, LEAKY_SLOPE)?;
            }
            LayerKind::HeadConv => {
                let (w, b) = (next()?, next()?);
                h = graph.conv2d(h, w, Some(b), layer.stride, 0)?;
            }
        }
    }
    Ok(h)
}

/// Coarse gain field estimate `exp(h(v))`, rescaled to mean 1.
pub fn estimate_field(model: &GetNetModel, v: &Image2D) -> Result<GainField> {
    Ok(model.raw_field(v)?.normalized_to_unit_mean())
}

/// Batched [`estimate_field`].
pub fn estimate_fields(model: &GetNetModel, images: &[&Image2D]) -> Result<Vec<GainField>> {
    let c = model.coarse_size();
    model
        .head_preactivations(images)?
        .iter()
        .map(|h| Ok(GainField::new(c, c, exp_clamped(h), DOWNSCALE)?.normalized_to_unit_mean()))
        .collect()
}

/// `v / upsample(estimate_field(v))`.
pub fn correct_image(model: &GetNetModel, v: &Image2D) -> Result<Image2D> {
    divide_by_field(v, &estimate_field(model, v)?, CORRECTION_EPS)
}

/// Random image of the model's input size, for smoke tests and benchmarks.
pub fn random_input(model: &GetNetModel, rng: &mut impl Rng) -> Image2D {
    let s = model.input_size();
    Image2D::from_fn(s, s, |_, _| rng.gen())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldgen::item_rng;

    fn trained_like(seed: u64) -> GetNetModel {
        let mut m = build_getnet(64, 4, seed).unwrap();
        let mut rng = item_rng(seed, 1);
        let n = m.params().len();
        for t in &mut m.params_mut()[n - 2..] {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
        m
    }

    #[test]
    fn output_is_sixteen_times_smaller() {
        for (size, coarse) in [(64, 4), (256, 16), (32, 2)] {
            let m = build_getnet(size, 4, 0).unwrap();
            let h = m.head_preactivations(&[&Image2D::filled(size, size, 0.5)]).unwrap();
            assert_eq!(h[0].len(), coarse * coarse);
            assert_eq!(m.coarse_size(), coarse);
        }
        let strides: usize = architecture(8).iter().map(|l| l.stride).product();
        assert_eq!(strides, DOWNSCALE);
        assert!(matches!(build_getnet(72, 4, 0), Err(Error::Indivisible { .. })));
    }

    #[test]
    fn fresh_model_outputs_ones() {
        let m = build_getnet(64, 8, 3).unwrap();
        let v = random_input(&m, &mut item_rng(0, 0));
        let f = estimate_field(&m, &v).unwrap();
        assert!(f.values().iter().all(|&x| x == 1.0));
        assert_eq!(correct_image(&m, &v).unwrap(), v);
        assert!(m.all_finite());
    }

    #[test]
    fn estimates_are_positive_with_unit_mean() {
        for seed in 0..10 {
            let m = trained_like(seed);
            let v = random_input(&m, &mut item_rng(seed, 2));
            let f = estimate_field(&m, &v).unwrap();
            assert!(f.values().iter().all(|&x| x > 0.0));
            assert!((f.mean() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn head_bias_offset_does_not_change_estimate() {
        let m = trained_like(5);
        let v = random_input(&m, &mut item_rng(5, 3));
        let mut shifted = m.clone();
        let n = shifted.params().len();
        shifted.params_mut()[n - 1].data_mut()[0] += 0.7;
        let (a, b) = (estimate_field(&m, &v).unwrap(), estimate_field(&shifted, &v).unwrap());
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn batched_matches_single() {
        let m = trained_like(9);
        let mut rng = item_rng(9, 0);
        let imgs: Vec<Image2D> = (0..3).map(|_| random_input(&m, &mut rng)).collect();
        let refs: Vec<&Image2D> = imgs.iter().collect();
        let batch = estimate_fields(&m, &refs).unwrap();
        for (img, f) in imgs.iter().zip(&batch) {
            let single = estimate_field(&m, img).unwrap();
            for (a, b) in single.values().iter().zip(f.values()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let m = trained_like(2);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"GNET");
        assert_eq!(GetNetModel::from_bytes(&bytes).unwrap(), m);

        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(GetNetModel::from_bytes(&flipped), Err(Error::Checkpoint(_))));
        assert!(GetNetModel::from_bytes(&bytes[..bytes.len() - 9]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(GetNetModel::from_bytes(&magic).is_err());
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let m = build_getnet(64, 4, 0).unwrap();
        assert!(matches!(
            estimate_field(&m, &Image2D::filled(32, 32, 1.0)),
            Err(Error::Dimensions { .. })
        ));
    }
}
