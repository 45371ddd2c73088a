//! Training and test data: procedural textures, ingestion of natural images,
//! and labelled tissue phantoms.
//!
//! Every generated item draws from its own stream `item_rng(seed, index)`, so
//! output is independent of the order (and thread) it is produced on.

use crate::error::{Error, Result};
use crate::fieldgen::item_rng;
use crate::image::{normalize_unit, Image2D, Tissue, TissueLabelMap};
use crate::io;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Invalid(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub seed: u64,
}

/// Line-oriented index of a corpus directory: `<split>\t<path>\t<seed>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.split, e.path.display(), e.seed));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [split, path, seed] = fields[..] else {
                return Err(Error::Invalid(format!(
                    "manifest line {}: expected 3 tab-separated fields",
                    n + 1
                )));
            };
            entries.push(ManifestEntry {
                split: split.parse()?,
                path: PathBuf::from(path),
                seed: seed
                    .parse()
                    .map_err(|_| Error::Invalid(format!("manifest line {}: bad seed", n + 1)))?,
            });
        }
        Ok(Self { entries })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_atomic(&dir.join(MANIFEST_FILE), self.to_text().as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Images of a corpus held in memory, grouped by split.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub train: Vec<Image2D>,
    pub val: Vec<Image2D>,
}

impl Corpus {
    /// Procedural textures generated in memory; train item `i` uses seed
    /// `seed ^ i`, validation items continue the index sequence.
    pub fn procedural(image_size: usize, train: usize, val: usize, seed: u64) -> Self {
        let images: Vec<Image2D> = (0..(train + val) as u64)
            .into_par_iter()
            .map(|i| generate_texture(seed ^ i, image_size))
            .collect();
        let mut images = images.into_iter();
        Self {
            train: images.by_ref().take(train).collect(),
            val: images.collect(),
        }
    }

    /// Loads the train and val images listed in `dir/manifest.tsv`, checking
    /// that each is `image_size` square.
    pub fn load(dir: &Path, image_size: usize) -> Result<Self> {
        let manifest = CorpusManifest::read(dir)?;
        let load = |split| -> Result<Vec<Image2D>> {
            manifest
                .split(split)
                .map(|e| {
                    let img = io::load_image(&dir.join(&e.path))?;
                    if img.dims() != (image_size, image_size) {
                        return Err(Error::Dimensions {
                            what: "corpus image",
                            expected_w: image_size,
                            expected_h: image_size,
                            found_w: img.width(),
                            found_h: img.height(),
                        });
                    }
                    Ok(img)
                })
                .collect()
        };
        let corpus = Self {
            train: load(Split::Train)?,
            val: load(Split::Val)?,
        };
        if corpus.train.is_empty() {
            return Err(Error::EmptyCorpus(dir.to_path_buf()));
        }
        Ok(corpus)
    }
}

// ---------------------------------------------------------------------------
// Procedural textures

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise_octave(size: usize, cells: usize, rng: &mut impl Rng) -> Vec<f64> {
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen()).collect();
    let at = |i: usize, j: usize| lattice[j * (cells + 1) + i];
    let coord = |p: usize| {
        let x = p as f64 * cells as f64 / size as f64;
        let i = (x.floor() as usize).min(cells - 1);
        (i, smoothstep(x - i as f64))
    };
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let (j, ty) = coord(y);
        for x in 0..size {
            let (i, tx) = coord(x);
            let top = at(i, j) + (at(i + 1, j) - at(i, j)) * tx;
            let bottom = at(i, j + 1) + (at(i + 1, j + 1) - at(i, j + 1)) * tx;
            out[y * size + x] = top + (bottom - top) * ty;
        }
    }
    out
}

fn point_in_polygon(px: f64, py: f64, xs: &[f64], ys: &[f64]) -> bool {
    let mut inside = false;
    let mut j = xs.len() - 1;
    for i in 0..xs.len() {
        if (ys[i] > py) != (ys[j] > py) {
            let cross = (xs[j] - xs[i]) * (py - ys[i]) / (ys[j] - ys[i]) + xs[i];
            if px < cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Multi-octave value noise (4 octaves, persistence 0.5) overlaid with one to
/// five anti-aliased random polygons with linear-gradient fills, normalized to
/// `[0, 1]`.
pub fn generate_texture(seed: u64, image_size: usize) -> Image2D {
    let mut rng = item_rng(seed, 0);
    let n = image_size;
    // Coarsest octave has 8-pixel cells; finer octaves reach pixel scale.
    let base_cells = (n / 8).max(4);

    let mut img = vec![0.0; n * n];
    let (mut amp, mut total) = (1.0, 0.0);
    for octave in 0..4 {
        let layer = value_noise_octave(n, base_cells << octave, &mut rng);
        for (p, l) in img.iter_mut().zip(layer) {
            *p += amp * l;
        }
        total += amp;
        amp *= 0.5;
    }
    img.iter_mut().for_each(|p| *p /= total);

    const SS: usize = 4;
    let polygons = rng.gen_range(1..=5);
    for _ in 0..polygons {
        let nf = n as f64;
        let (cx, cy) = (rng.gen_range(0.0..nf), rng.gen_range(0.0..nf));
        let radius = rng.gen_range(nf / 16.0..nf / 3.0);
        let verts = rng.gen_range(3..=7);
        let mut angles: Vec<f64> = (0..verts)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(f64::total_cmp);
        let radii: Vec<f64> = (0..verts).map(|_| radius * rng.gen_range(0.5..1.0)).collect();
        let xs: Vec<f64> = angles.iter().zip(&radii).map(|(a, r)| cx + r * a.cos()).collect();
        let ys: Vec<f64> = angles.iter().zip(&radii).map(|(a, r)| cy + r * a.sin()).collect();
        let base: f64 = rng.gen();
        let (gx, gy) = (rng.gen_range(-1.0..1.0) / nf, rng.gen_range(-1.0..1.0) / nf);
        let alpha = rng.gen_range(0.5..1.0);

        let clampi = |v: f64| (v.max(0.0) as usize).min(n);
        let (x0, x1) = (clampi(cx - radius - 1.0), clampi(cx + radius + 2.0));
        let (y0, y1) = (clampi(cy - radius - 1.0), clampi(cy + radius + 2.0));
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                        hits += point_in_polygon(px, py, &xs, &ys) as usize;
                    }
                }
                if hits == 0 {
                    continue;
                }
                let cover = alpha * hits as f64 / (SS * SS) as f64;
                let fill = (base + gx * (x as f64 + 0.5 - cx) + gy * (y as f64 + 0.5 - cy)).clamp(0.0, 1.0);
                let p = &mut img[y * n + x];
                *p = (1.0 - cover) * *p + cover * fill;
            }
        }
    }

    let raw = Image2D::new(n, n, img.into_iter().map(|v| v as f32).collect())
        .expect("texture pixels are finite");
    normalize_unit(&raw).expect("value noise is never constant")
}

/// Writes `train + val` textures plus a manifest into `out_dir`.
pub fn write_texture_corpus(
    out_dir: &Path,
    image_size: usize,
    train: usize,
    val: usize,
    seed: u64,
) -> Result<CorpusManifest> {
    std::fs::create_dir_all(out_dir.join("textures"))?;
    let entries = (0..(train + val) as u64)
        .into_par_iter()
        .map(|i| {
            let item_seed = seed ^ i;
            let rel = PathBuf::from(format!("textures/tex_{i:06}.pfm"));
            io::save_image(&generate_texture(item_seed, image_size), &out_dir.join(&rel))?;
            Ok(ManifestEntry {
                split: if (i as usize) < train { Split::Train } else { Split::Val },
                path: rel,
                seed: item_seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = CorpusManifest { entries };
    manifest.write(out_dir)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Natural-image ingestion

const INGEST_EXTENSIONS: &[&str] = &["pgm", "pfm", "png", "jpg", "jpeg", "bmp", "tif", "tiff"];

/// Grayscale conversion with ITU-R BT.601 luma weights.
pub fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Reads any supported file as a grayscale image with values in `[0, 1]`
/// (PFM keeps its raw values).
pub fn load_grayscale(path: &Path) -> Result<Image2D> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    if matches!(ext.as_deref(), Some("pgm" | "pfm")) {
        return io::load_image(path);
    }
    let decoded = ::image::open(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = decoded.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let pixels = rgb.pixels().map(|p| luma(p[0], p[1], p[2])).collect();
    Image2D::new(w as usize, h as usize, pixels)
}

/// Bilinear resize with pixel-centre alignment.
fn resize_bilinear(img: &Image2D, new_w: usize, new_h: usize) -> Image2D {
    let (w, h) = img.dims();
    let sample = |pos: f64, len: usize| {
        let t = pos.clamp(0.0, (len - 1) as f64);
        let i0 = t.floor() as usize;
        (i0, (i0 + 1).min(len - 1), (t - i0 as f64) as f32)
    };
    Image2D::from_fn(new_w, new_h, |x, y| {
        let (x0, x1, tx) = sample((x as f64 + 0.5) * w as f64 / new_w as f64 - 0.5, w);
        let (y0, y1, ty) = sample((y as f64 + 0.5) * h as f64 / new_h as f64 - 0.5, h);
        let top = img.get(x0, y0) + (img.get(x1, y0) - img.get(x0, y0)) * tx;
        let bot = img.get(x0, y1) + (img.get(x1, y1) - img.get(x0, y1)) * tx;
        top + (bot - top) * ty
    })
}

fn crop(img: &Image2D, x0: usize, y0: usize, size: usize) -> Image2D {
    Image2D::from_fn(size, size, |x, y| img.get(x0 + x, y0 + y))
}

/// Random crop (`random = true`) or centre crop to `size x size`. Sources
/// smaller than `size` along either side are first upscaled once so the
/// shorter side equals `size`, then centre cropped.
pub fn crop_to_size(img: &Image2D, size: usize, random: bool, rng: &mut impl Rng) -> Image2D {
    let (w, h) = img.dims();
    if w < size || h < size {
        let scale = size as f64 / w.min(h) as f64;
        let nw = ((w as f64 * scale).round() as usize).max(size);
        let nh = ((h as f64 * scale).round() as usize).max(size);
        let up = resize_bilinear(img, nw, nh);
        return crop(&up, (nw - size) / 2, (nh - size) / 2, size);
    }
    if random {
        crop(img, rng.gen_range(0..=w - size), rng.gen_range(0..=h - size), size)
    } else {
        crop(img, (w - size) / 2, (h - size) / 2, size)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IngestReport {
    pub manifest: CorpusManifest,
    pub unreadable: usize,
    pub degenerate: usize,
}

/// Builds a natural-image corpus of up to `count` crops from `src_dir`.
///
/// Source files are shuffled with `seed` and the first `val_fraction` of them
/// (at least one when there are two or more) become validation sources, so
/// splits never share a source. Crops cycle through each split's sources.
/// Unreadable files are skipped; crops with a constant intensity are
/// rejected. Both are logged and counted.
pub fn prepare_natural_corpus(
    src_dir: &Path,
    out_dir: &Path,
    image_size: usize,
    count: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<IngestReport> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(src_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| INGEST_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();

    let mut unreadable = 0;
    let mut sources = Vec::new();
    for path in files {
        match load_grayscale(&path) {
            Ok(img) => sources.push(img),
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                unreadable += 1;
            }
        }
    }
    if sources.is_empty() {
        return Err(Error::EmptyCorpus(src_dir.to_path_buf()));
    }
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.shuffle(&mut item_rng(seed, u64::MAX));
    let n_val = if sources.len() >= 2 {
        ((sources.len() as f64 * val_fraction).ceil() as usize).clamp(1, sources.len() - 1)
    } else {
        0
    };
    let (val_src, train_src) = order.split_at(n_val);
    let n_val_out = if n_val == 0 {
        0
    } else {
        ((count as f64 * val_fraction).ceil() as usize).min(count)
    };

    std::fs::create_dir_all(out_dir.join("images"))?;
    let mut entries = Vec::new();
    let mut degenerate = 0;
    for i in 0..count {
        let (split, pool, k) = if i < n_val_out {
            (Split::Val, val_src, i)
        } else {
            (Split::Train, train_src, i - n_val_out)
        };
        let item_seed = seed ^ i as u64;
        let mut rng = item_rng(item_seed, 0);
        let cropped = crop_to_size(&sources[pool[k % pool.len()]], image_size, split == Split::Train, &mut rng);
        let img = match normalize_unit(&cropped) {
            Ok(img) => img,
            Err(e) => {
                warn!("rejecting crop {i}: {e}");
                degenerate += 1;
                continue;
            }
        };
        let rel = PathBuf::from(format!("images/img_{i:06}.pfm"));
        io::save_image(&img, &out_dir.join(&rel))?;
        entries.push(ManifestEntry {
            split,
            path: rel,
            seed: item_seed,
        });
    }
    let manifest = CorpusManifest { entries };
    manifest.write(out_dir)?;
    info!(
        "ingested {} crops ({} unreadable files, {} degenerate crops)",
        manifest.entries.len(),
        unreadable,
        degenerate
    );
    Ok(IngestReport {
        manifest,
        unreadable,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// Phantoms

/// Ellipse in normalized image coordinates, where the raster spans `[-1, 1]`
/// on both axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Rotation in radians.
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v <= 1.0
    }

    /// Same centre and rotation, semi-axes scaled by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rx: self.rx * s,
            ry: self.ry * s,
            ..*self
        }
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.rx * self.ry
    }

    fn boundary(&self, t: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (u, v) = (self.rx * t.cos(), self.ry * t.sin());
        (self.cx + u * c - v * s, self.cy + u * s + v * c)
    }

    /// Whether `self` lies within `outer`, checked along a dense boundary sampling.
    pub fn inside(&self, outer: &Ellipse) -> bool {
        (0..720).all(|k| {
            let (x, y) = self.boundary(k as f64 * std::f64::consts::TAU / 720.0);
            outer.contains(x, y)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueMeans {
    pub csf: f64,
    pub gm: f64,
    pub wm: f64,
}

impl Default for TissueMeans {
    /// T1-like ordering WM > GM > CSF.
    fn default() -> Self {
        Self {
            csf: 0.25,
            gm: 0.60,
            wm: 0.90,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_size: usize,
    /// Outer boundary of the CSF shell.
    pub csf: Ellipse,
    pub gm: Ellipse,
    pub wm: Ellipse,
    pub means: TissueMeans,
    pub jitter_sigma: f64,
}

impl PhantomSpec {
    pub fn centered(image_size: usize) -> Self {
        let csf = Ellipse {
            cx: 0.0,
            cy: 0.0,
            rx: 0.85,
            ry: 0.72,
            theta: 0.0,
        };
        Self {
            image_size,
            csf,
            gm: csf.scaled(0.9),
            wm: csf.scaled(0.7),
            means: TissueMeans::default(),
            jitter_sigma: 0.02,
        }
    }

    /// Head-like geometry with randomized position, pose, aspect and shell
    /// thicknesses.
    pub fn random(image_size: usize, rng: &mut impl Rng) -> Self {
        let rx = rng.gen_range(0.75..0.90);
        let csf = Ellipse {
            cx: rng.gen_range(-0.05..0.05),
            cy: rng.gen_range(-0.05..0.05),
            rx,
            ry: rx * rng.gen_range(0.80..0.95),
            theta: rng.gen_range(-0.3..0.3),
        };
        Self {
            image_size,
            csf,
            gm: csf.scaled(rng.gen_range(0.86..0.94)),
            wm: csf.scaled(rng.gen_range(0.62..0.78)),
            means: TissueMeans::default(),
            jitter_sigma: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Invalid("phantom image_size must be positive".into()));
        }
        if !self.wm.inside(&self.gm) {
            return Err(Error::Nesting("WM ellipse is not inside GM".into()));
        }
        if !self.gm.inside(&self.csf) {
            return Err(Error::Nesting("GM ellipse is not inside CSF".into()));
        }
        let m = self.means;
        if m.csf == m.gm || m.gm == m.wm || m.csf == m.wm || m.csf == 0.0 || m.gm == 0.0 || m.wm == 0.0 {
            return Err(Error::Invalid("tissue means must be pairwise distinct and non-zero".into()));
        }
        if !(self.jitter_sigma >= 0.0) {
            return Err(Error::Invalid("jitter_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn mean_of(&self, tissue: Tissue) -> f64 {
        match tissue {
            Tissue::Background => 0.0,
            Tissue::Csf => self.means.csf,
            Tissue::Gm => self.means.gm,
            Tissue::Wm => self.means.wm,
        }
    }
}

/// Rasterizes the nested ellipses at pixel centres and fills each tissue with
/// its mean plus Gaussian jitter (clamped to `[0, 1]`); background is zero.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(Image2D, TissueLabelMap)> {
    spec.validate()?;
    let n = spec.image_size;
    let mut rng = item_rng(seed, 0);
    let jitter = Normal::new(0.0, spec.jitter_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut labels = Vec::with_capacity(n * n);
    let mut pixels = Vec::with_capacity(n * n);
    for y in 0..n {
        let py = (y as f64 + 0.5) / n as f64 * 2.0 - 1.0;
        for x in 0..n {
            let px = (x as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            let tissue = if spec.wm.contains(px, py) {
                Tissue::Wm
            } else if spec.gm.contains(px, py) {
                Tissue::Gm
            } else if spec.csf.contains(px, py) {
                Tissue::Csf
            } else {
                Tissue::Background
            };
            let value = if tissue == Tissue::Background {
                0.0
            } else if spec.jitter_sigma == 0.0 {
                spec.mean_of(tissue)
            } else {
                (spec.mean_of(tissue) + jitter.sample(&mut rng)).clamp(0.0, 1.0)
            };
            labels.push(tissue);
            pixels.push(value as f32);
        }
    }
    Ok((Image2D::new(n, n, pixels)?, TissueLabelMap::new(n, n, labels)?))
}

/// A phantom with its ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Image2D,
    pub labels: TissueLabelMap,
}

/// `count` phantoms with geometry drawn from `item_rng(seed, i)`.
pub fn phantom_set(image_size: usize, count: usize, seed: u64) -> Result<Vec<Phantom>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let item_seed = seed ^ i;
            let spec = PhantomSpec::random(image_size, &mut item_rng(item_seed, u64::MAX));
            let (image, labels) = generate_phantom(&spec, item_seed)?;
            Ok(Phantom { image, labels })
        })
        .collect()
}

fn label_path(image_rel: &Path) -> PathBuf {
    let stem = image_rel.file_stem().and_then(|s| s.to_str()).unwrap_or("phantom");
    image_rel.with_file_name(format!("{stem}_labels.pgm"))
}

/// Writes a phantom set as `phantoms/phantom_NNNN.pfm` + `_labels.pgm` pairs
/// and a `test`-split manifest.
pub fn write_phantom_set(out_dir: &Path, image_size: usize, count: usize, seed: u64) -> Result<CorpusManifest> {
    let phantoms = phantom_set(image_size, count, seed)?;
    std::fs::create_dir_all(out_dir.join("phantoms"))?;
    let mut entries = Vec::with_capacity(count);
    for (i, p) in phantoms.iter().enumerate() {
        let rel = PathBuf::from(format!("phantoms/phantom_{i:04}.pfm"));
        io::save_image(&p.image, &out_dir.join(&rel))?;
        io::save_labels(&p.labels, &out_dir.join(label_path(&rel)))?;
        entries.push(ManifestEntry {
            split: Split::Test,
            path: rel,
            seed: seed ^ i as u64,
        });
    }
    let manifest = CorpusManifest { entries };
    manifest.write(out_dir)?;
    Ok(manifest)
}

pub fn load_phantom_set(dir: &Path) -> Result<Vec<Phantom>> {
    let manifest = CorpusManifest::read(dir)?;
    let phantoms = manifest
        .split(Split::Test)
        .map(|e| {
            let image = io::load_image(&dir.join(&e.path))?;
            let labels = io::load_labels(&dir.join(label_path(&e.path)))?;
            if image.dims() != labels.dims() {
                return Err(Error::Dimensions {
                    what: "phantom labels",
                    expected_w: image.width(),
                    expected_h: image.height(),
                    found_w: labels.width(),
                    found_h: labels.height(),
                });
            }
            Ok(Phantom { image, labels })
        })
        .collect::<Result<Vec<_>>>()?;
    if phantoms.is_empty() {
        return Err(Error::EmptyCorpus(dir.to_path_buf()));
    }
    Ok(phantoms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::high_frequency_fraction;

    #[test]
    fn textures_are_deterministic_and_unit_range() {
        assert_eq!(generate_texture(7, 64), generate_texture(7, 64));
        assert_ne!(generate_texture(7, 64), generate_texture(8, 64));
        for seed in 0..200 {
            let t = generate_texture(seed, 64);
            assert_eq!((t.min(), t.max()), (0.0, 1.0));
        }
    }

    #[test]
    fn textures_carry_high_frequency_energy() {
        for size in [64, 256] {
            let count = if size == 64 { 50 } else { 5 };
            let mean: f64 = (0..count)
                .map(|s| high_frequency_fraction(&generate_texture(s, size), size as f64 / 8.0))
                .sum::<f64>()
                / count as f64;
            assert!(mean >= 0.05, "size {size}: {mean}");
        }
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = CorpusManifest {
            entries: vec![
                ManifestEntry {
                    split: Split::Train,
                    path: "textures/tex_000000.pfm".into(),
                    seed: 9,
                },
                ManifestEntry {
                    split: Split::Val,
                    path: "textures/tex_000001.pfm".into(),
                    seed: 8,
                },
            ],
        };
        assert_eq!(m.to_text(), "train\ttextures/tex_000000.pfm\t9\nval\ttextures/tex_000001.pfm\t8\n");
        assert_eq!(CorpusManifest::parse(&m.to_text()).unwrap(), m);
        assert!(CorpusManifest::parse("train\tx").is_err());
        assert!(CorpusManifest::parse("holdout\tx\t1").is_err());
    }

    #[test]
    fn noiseless_phantom_is_piecewise_constant() {
        let mut spec = PhantomSpec::centered(64);
        spec.jitter_sigma = 0.0;
        let (img, labels) = generate_phantom(&spec, 1).unwrap();
        let mut distinct: Vec<u32> = img.pixels().iter().map(|p| p.to_bits()).collect();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 4);
        for (p, t) in img.pixels().iter().zip(labels.labels()) {
            assert_eq!(*p as f64, spec.mean_of(*t) as f32 as f64);
        }
    }

    #[test]
    fn label_areas_match_ellipse_formulas() {
        let spec = PhantomSpec::centered(256);
        let (_, labels) = generate_phantom(&spec, 0).unwrap();
        let total = 4.0; // [-1, 1]^2
        let frac = |t| labels.count(t) as f64 / (256.0 * 256.0);
        let wm = spec.wm.area() / total;
        let gm = (spec.gm.area() - spec.wm.area()) / total;
        let csf = (spec.csf.area() - spec.gm.area()) / total;
        for (got, want) in [(frac(Tissue::Wm), wm), (frac(Tissue::Gm), gm), (frac(Tissue::Csf), csf)] {
            assert!((got - want).abs() / want < 0.02, "{got} vs {want}");
        }
    }

    #[test]
    fn nesting_violation_is_rejected() {
        let mut spec = PhantomSpec::centered(32);
        spec.wm = spec.csf.scaled(0.95);
        assert!(matches!(generate_phantom(&spec, 0), Err(Error::Nesting(_))));
        let mut spec = PhantomSpec::centered(32);
        spec.gm.cx = 0.3;
        assert!(matches!(generate_phantom(&spec, 0), Err(Error::Nesting(_))));
    }

    #[test]
    fn random_phantoms_are_valid_and_in_range() {
        let set = phantom_set(64, 20, 3).unwrap();
        for p in &set {
            assert!(p.image.min() >= 0.0 && p.image.max() <= 1.0);
            assert_eq!(p.image.dims(), p.labels.dims());
            for t in Tissue::FOREGROUND {
                assert!(p.labels.count(t) > 0);
            }
        }
        assert_eq!(set, phantom_set(64, 20, 3).unwrap());
    }

    #[test]
    fn crop_policies() {
        let img = Image2D::from_fn(10, 8, |x, y| (x + 10 * y) as f32);
        let mut rng = item_rng(0, 0);
        let c = crop_to_size(&img, 4, false, &mut rng);
        assert_eq!(c.get(0, 0), img.get(3, 2));
        let small = Image2D::from_fn(3, 6, |x, y| (x + y) as f32);
        assert_eq!(crop_to_size(&small, 4, true, &mut rng).dims(), (4, 4));
        for _ in 0..20 {
            assert_eq!(crop_to_size(&img, 8, true, &mut rng).dims(), (8, 8));
        }
    }

    #[test]
    fn luma_weights() {
        assert!((luma(1.0, 1.0, 1.0) - 1.0).abs() < 1e-6);
        assert_eq!(luma(1.0, 0.0, 0.0), 0.299);
    }
}
