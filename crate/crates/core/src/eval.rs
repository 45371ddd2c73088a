//! Correction quality and speed on labelled phantoms.

use crate::baseline::{baseline_correct, BaselineConfig};
use crate::corpus::Phantom;
use crate::error::{Error, Result};
use crate::fieldgen::{apply_forward_model, generate_gain_field, item_rng, FieldGenConfig, NoiseSpec};
use crate::getnet::{correct_image, GetNetModel, DOWNSCALE};
use crate::image::{Image2D, Tissue};
use log::warn;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::time::Instant;

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// `sum |test - reference| / sum |reference|` over the masked pixels (all
/// pixels when `mask` is `None`).
pub fn relative_mae(reference: &Image2D, test: &Image2D, mask: Option<&[bool]>) -> Result<f64> {
    if reference.dims() != test.dims() {
        return Err(Error::Dimensions {
            what: "relative MAE operands",
            expected_w: reference.width(),
            expected_h: reference.height(),
            found_w: test.width(),
            found_h: test.height(),
        });
    }
    if let Some(m) = mask {
        if m.len() != reference.pixels().len() {
            return Err(Error::Invalid("mask length does not match image".into()));
        }
    }
    let (mut num, mut den, mut count) = (CompensatedSum::default(), CompensatedSum::default(), 0usize);
    for (i, (r, t)) in reference.pixels().iter().zip(test.pixels()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        num.add((*t as f64 - *r as f64).abs());
        den.add((*r as f64).abs());
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    if den.value() == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(num.value() / den.value())
}

/// An intensity-correction method under evaluation.
pub trait Corrector: Sync {
    fn name(&self) -> &str;
    fn correct(&self, v: &Image2D) -> Result<Image2D>;
}

/// Returns its input; matches the uncorrected row exactly.
pub struct IdentityCorrector;

impl Corrector for IdentityCorrector {
    fn name(&self) -> &str {
        "Identity"
    }

    fn correct(&self, v: &Image2D) -> Result<Image2D> {
        Ok(v.clone())
    }
}

pub struct GetNetCorrector {
    pub model: GetNetModel,
}

impl Corrector for GetNetCorrector {
    fn name(&self) -> &str {
        "GetNet"
    }

    fn correct(&self, v: &Image2D) -> Result<Image2D> {
        correct_image(&self.model, v)
    }
}

pub struct BaselineCorrector {
    pub config: BaselineConfig,
}

impl Corrector for BaselineCorrector {
    fn name(&self) -> &str {
        "LogPoly"
    }

    fn correct(&self, v: &Image2D) -> Result<Image2D> {
        baseline_correct(v, &self.config)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Entire,
    Tissue(Tissue),
}

impl Region {
    pub const ALL: [Region; 4] = [
        Region::Entire,
        Region::Tissue(Tissue::Csf),
        Region::Tissue(Tissue::Gm),
        Region::Tissue(Tissue::Wm),
    ];

    pub fn key(self) -> &'static str {
        match self {
            Region::Entire => "entire",
            Region::Tissue(t) => match t {
                Tissue::Csf => "csf",
                Tissue::Gm => "gm",
                Tissue::Wm => "wm",
                Tissue::Background => "background",
            },
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Region::Entire => "Entire image",
            Region::Tissue(Tissue::Csf) => "Cerebrospinal fluid",
            Region::Tissue(Tissue::Gm) => "Gray matter",
            Region::Tissue(Tissue::Wm) => "White matter",
            Region::Tissue(Tissue::Background) => "Background",
        }
    }
}

/// Per-sample relative MAE for one method; `None` where the region was empty
/// or the method failed.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    pub sample: usize,
    pub method: String,
    pub scores: [Option<f64>; 4],
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodRow {
    pub method: String,
    /// Mean relative MAE per region, in [`Region::ALL`] order.
    pub means: [f64; 4],
    pub included: usize,
    pub excluded: usize,
    pub timing_seconds: Option<f64>,
}

impl MethodRow {
    pub fn mean(&self, region: Region) -> f64 {
        self.means[Region::ALL.iter().position(|r| *r == region).expect("known region")]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// The uncorrected `Gain` row first, then one row per method.
    pub rows: Vec<MethodRow>,
    pub sample_count: usize,
    pub samples: Vec<SampleScores>,
    /// Configuration text echoed into rendered reports.
    pub config: String,
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Relative reduction `1 - method / Gain` in the given region.
    pub fn reduction(&self, method: &str, region: Region) -> Option<f64> {
        let gain = self.row("Gain")?.mean(region);
        Some(1.0 - self.row(method)?.mean(region) / gain)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for line in self.config.lines() {
            let _ = writeln!(s, "# {line}");
        }
        s.push_str("method,region,relative_mae,included,excluded\n");
        for row in &self.rows {
            for (region, mean) in Region::ALL.iter().zip(row.means) {
                let _ = writeln!(s, "{},{},{},{},{}", row.method, region.key(), mean, row.included, row.excluded);
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(10);
        let mut s = format!("Relative MAE over {} phantoms\n\n{:<20}", self.sample_count, "");
        for row in &self.rows {
            let _ = write!(s, "  {:>width$}", row.method);
        }
        s.push('\n');
        for (i, region) in Region::ALL.iter().enumerate() {
            let _ = write!(s, "{:<20}", region.title());
            for row in &self.rows {
                let _ = write!(s, "  {:>width$.4}", row.means[i]);
            }
            s.push('\n');
        }
        if self.rows.iter().any(|r| r.timing_seconds.is_some()) {
            let _ = write!(s, "{:<20}", "Time (s)");
            for row in &self.rows {
                match row.timing_seconds {
                    Some(t) => {
                        let _ = write!(s, "  {:>width$.4}", t);
                    }
                    None => {
                        let _ = write!(s, "  {:>width$}", "-");
                    }
                }
            }
            s.push('\n');
        }
        let excluded: Vec<String> = self
            .rows
            .iter()
            .filter(|r| r.excluded > 0)
            .map(|r| format!("{}: {}", r.method, r.excluded))
            .collect();
        if !excluded.is_empty() {
            let _ = writeln!(s, "\nExcluded samples: {}", excluded.join(", "));
        }
        if !self.config.is_empty() {
            let _ = write!(s, "\nConfiguration\n-------------\n{}", self.config);
            if !self.config.ends_with('\n') {
                s.push('\n');
            }
        }
        s
    }

    pub fn samples_csv(&self) -> String {
        let mut s = String::from("sample,method,entire,csf,gm,wm,error\n");
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.samples {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.sample,
                r.method,
                cell(r.scores[0]),
                cell(r.scores[1]),
                cell(r.scores[2]),
                cell(r.scores[3]),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
            );
        }
        s
    }
}

/// Corrupts sample `index` with a field and noise drawn from `item_rng(seed, index)`.
pub fn corrupt_sample(u: &Image2D, cfg: &FieldGenConfig, seed: u64, index: usize) -> Result<Image2D> {
    let (w, h) = u.dims();
    let mut rng = item_rng(seed, index as u64);
    let g = generate_gain_field(cfg, w / DOWNSCALE, h / DOWNSCALE, DOWNSCALE, &mut rng)?;
    let noise = NoiseSpec::sample(cfg, &mut rng);
    apply_forward_model(u, &g, noise, &mut rng)
}

fn region_scores(p: &Phantom, test: &Image2D) -> Result<[Option<f64>; 4]> {
    let mut out = [None; 4];
    for (slot, region) in out.iter_mut().zip(Region::ALL) {
        let mask = match region {
            Region::Entire => None,
            Region::Tissue(t) => Some(p.labels.mask(t)),
        };
        *slot = match relative_mae(&p.image, test, mask.as_deref()) {
            Ok(v) => Some(v),
            Err(Error::EmptyMask | Error::ZeroReference) => None,
            Err(e) => return Err(e),
        };
    }
    Ok(out)
}

/// Corrupts every phantom once and scores the uncorrected image (`Gain`) and
/// each method against the original. Samples a method fails on are excluded
/// from its means and counted.
pub fn evaluate_dataset(
    phantoms: &[Phantom],
    methods: &[&dyn Corrector],
    fieldgen: &FieldGenConfig,
    seed: u64,
) -> Result<EvalReport> {
    if phantoms.is_empty() {
        return Err(Error::Invalid("no phantoms to evaluate".into()));
    }
    let per_sample: Vec<Vec<SampleScores>> = phantoms
        .par_iter()
        .enumerate()
        .map(|(i, p)| -> Result<Vec<SampleScores>> {
            let v = corrupt_sample(&p.image, fieldgen, seed, i)?;
            let mut rows = vec![SampleScores {
                sample: i,
                method: "Gain".into(),
                scores: region_scores(p, &v)?,
                error: None,
            }];
            for m in methods {
                let scored = m.correct(&v).and_then(|u_hat| region_scores(p, &u_hat));
                rows.push(match scored {
                    Ok(scores) => SampleScores {
                        sample: i,
                        method: m.name().into(),
                        scores,
                        error: None,
                    },
                    Err(e) => {
                        warn!("{} failed on sample {i}: {e}", m.name());
                        SampleScores {
                            sample: i,
                            method: m.name().into(),
                            scores: [None; 4],
                            error: Some(e.to_string()),
                        }
                    }
                });
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let names: Vec<String> = std::iter::once("Gain".to_string())
        .chain(methods.iter().map(|m| m.name().to_string()))
        .collect();
    let mut rows = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let mut sums = [CompensatedSum::default(); 4];
        let mut counts = [0usize; 4];
        let (mut included, mut excluded) = (0, 0);
        for sample in &per_sample {
            let s = &sample[k];
            if s.error.is_some() {
                excluded += 1;
                continue;
            }
            included += 1;
            for r in 0..4 {
                if let Some(v) = s.scores[r] {
                    sums[r].add(v);
                    counts[r] += 1;
                }
            }
        }
        let mut means = [f64::NAN; 4];
        for r in 0..4 {
            if counts[r] > 0 {
                means[r] = sums[r].value() / counts[r] as f64;
            }
        }
        rows.push(MethodRow {
            method: name.clone(),
            means,
            included,
            excluded,
            timing_seconds: None,
        });
    }

    Ok(EvalReport {
        rows,
        sample_count: phantoms.len(),
        samples: per_sample.into_iter().flatten().collect(),
        config: String::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub total_seconds: f64,
    pub images: usize,
}

impl Timing {
    pub fn per_image(&self) -> f64 {
        if self.images == 0 {
            0.0
        } else {
            self.total_seconds / self.images as f64
        }
    }
}

/// Wall-clock time to correct every image once, sequentially, after `warmup`
/// untimed corrections.
pub fn time_correction(corrector: &dyn Corrector, images: &[Image2D], warmup: usize) -> Result<Timing> {
    if images.is_empty() {
        return Ok(Timing {
            total_seconds: 0.0,
            images: 0,
        });
    }
    for i in 0..warmup {
        corrector.correct(&images[i % images.len()])?;
    }
    let start = Instant::now();
    for img in images {
        std::hint::black_box(corrector.correct(img)?);
    }
    Ok(Timing {
        total_seconds: start.elapsed().as_secs_f64(),
        images: images.len(),
    })
}

/// Wall-clock seconds for each image, after `warmup` untimed corrections.
pub fn time_each(corrector: &dyn Corrector, images: &[Image2D], warmup: usize) -> Result<Vec<f64>> {
    for img in images.iter().cycle().take(warmup) {
        corrector.correct(img)?;
    }
    images
        .iter()
        .map(|img| {
            let start = Instant::now();
            std::hint::black_box(corrector.correct(img)?);
            Ok(start.elapsed().as_secs_f64())
        })
        .collect()
}
