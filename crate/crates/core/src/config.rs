//! Run configuration: a TOML file merged with command-line overrides.

use crate::autodiff::AdamConfig;
use crate::baseline::BaselineConfig;
use crate::error::{Error, Result};
use crate::fieldgen::FieldGenConfig;
use crate::getnet::DOWNSCALE;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SUPPORTED_SIZES: [usize; 2] = [64, 256];

/// Purpose tags mixed into the global seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedPurpose {
    Corpus = 1,
    Phantoms = 2,
    ModelInit = 3,
    Training = 4,
    Evaluation = 5,
    Bench = 6,
}

/// Independent seed for one purpose (splitmix64 finalizer over seed and tag).
pub fn derive_seed(seed: u64, purpose: SeedPurpose) -> u64 {
    let mut z = seed ^ (purpose as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus_dir: PathBuf,
    /// Natural-image source directory; empty means procedural textures.
    pub ingest_dir: PathBuf,
    pub phantom_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub model: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus_dir: "corpus".into(),
            ingest_dir: PathBuf::new(),
            phantom_dir: "phantoms".into(),
            checkpoint_dir: "checkpoints".into(),
            model: "model.gnet".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub phantom_count: usize,
    /// Share of ingested source files held out for validation.
    pub val_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_count: 2000,
            val_count: 200,
            phantom_count: 100,
            val_fraction: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eval_every: usize,
    /// 0 selects 16 at 64 px and 32 at 256 px.
    pub base_channels: usize,
    /// Continue from the checkpoint directory instead of starting fresh.
    pub resume: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 10,
            batch_size: 16,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            eval_every: 50,
            base_channels: 0,
            resume: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Also write per-sample scores.
    pub per_sample: bool,
    pub bench_images: usize,
    pub warmup: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            per_sample: false,
            bench_images: 20,
            warmup: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
    /// Forces a single worker thread.
    pub deterministic: bool,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub fieldgen: FieldGenConfig,
    pub train: TrainSection,
    pub baseline: BaselineConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            threads: 0,
            deterministic: false,
            paths: PathsConfig::default(),
            corpus: CorpusConfig::default(),
            fieldgen: FieldGenConfig::default(),
            train: TrainSection::default(),
            baseline: BaselineConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn coarse_size(&self) -> usize {
        self.image_size / DOWNSCALE
    }

    pub fn base_channels(&self) -> usize {
        match self.train.base_channels {
            0 if self.image_size >= 256 => 32,
            0 => 16,
            c => c,
        }
    }

    /// Worker threads after applying `deterministic`.
    pub fn worker_threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads
        }
    }

    pub fn fieldgen_config(&self, purpose: SeedPurpose) -> FieldGenConfig {
        FieldGenConfig {
            seed: derive_seed(self.seed, purpose),
            ..self.fieldgen.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            adam: AdamConfig {
                lr: self.train.lr,
                beta1: self.train.beta1,
                beta2: self.train.beta2,
                eps: self.train.adam_eps,
            },
            seed: derive_seed(self.seed, SeedPurpose::Training),
            checkpoint_dir: Some(self.paths.checkpoint_dir.clone()),
            eval_every: self.train.eval_every,
            image_size: self.image_size,
            fieldgen: self.fieldgen_config(SeedPurpose::Training),
        }
    }

    /// Checks every setting; called before any work starts.
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_SIZES.contains(&self.image_size) {
            return Err(Error::Config(format!(
                "image_size = {} (supported: 64, 256)",
                self.image_size
            )));
        }
        let c = self.coarse_size();
        self.fieldgen.validate(c, c)?;
        self.train_config().validate()?;
        self.baseline.validate()?;
        if self.corpus.train_count == 0 {
            return Err(Error::Config("corpus.train_count must be >= 1".into()));
        }
        if self.corpus.phantom_count == 0 {
            return Err(Error::Config("corpus.phantom_count must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.corpus.val_fraction) {
            return Err(Error::Config("corpus.val_fraction must lie in [0, 1)".into()));
        }
        if self.eval.bench_images == 0 {
            return Err(Error::Config("eval.bench_images must be >= 1".into()));
        }
        Ok(())
    }
}

/// Dotted keys (`section.key`) present in a serialized config, in order.
pub fn config_keys(cfg: &RunConfig) -> Vec<String> {
    fn walk(prefix: &str, table: &toml::Table, out: &mut Vec<String>) {
        for (k, v) in table {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(t) => walk(&key, t, out),
                _ => out.push(key),
            }
        }
    }
    let table: toml::Table = toml::from_str(&cfg.to_toml()).expect("round trip");
    let mut out = Vec::new();
    walk("", &table, &mut out);
    out
}
