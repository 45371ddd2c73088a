//! Optimization loop for the two-branch ratio objective.
//!
//! Randomness is keyed by `(seed, epoch, image index)`: every epoch draws
//! fresh corruption and target fields for each image, and the validation
//! pairs are drawn once from a separate stream. Training can therefore resume
//! from any epoch boundary and reproduce an uninterrupted run exactly.

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tensor4};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::fieldgen::{item_rng, FieldGenConfig};
use crate::getnet::GetNetModel;
use crate::image::Image2D;
use crate::io;
use crate::neednet::{make_training_pair, neednet_forward, record_loss, TrainingPair};
use log::info;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

pub const MODEL_FILE: &str = "latest.gnet";
pub const STATE_FILE: &str = "train_state.bin";
pub const METRICS_FILE: &str = "metrics.csv";

const STATE_MAGIC: &[u8; 4] = b"GTRS";
const STATE_VERSION: u32 = 1;
const VAL_STREAM: u64 = u64::MAX;
/// Validation pairs drawn from the training images when the corpus has no
/// validation split.
const FALLBACK_VAL: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Per-epoch checkpoints, optimizer state and metrics go here when set.
    pub checkpoint_dir: Option<PathBuf>,
    /// Steps between metric rows; the last step of every epoch is always logged.
    pub eval_every: usize,
    pub image_size: usize,
    pub fieldgen: FieldGenConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_dir: None,
            eval_every: 50,
            image_size: 64,
            fieldgen: FieldGenConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.adam.lr > 0.0) || !self.adam.lr.is_finite() {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam.eps > 0.0) {
            return Err(Error::Config("adam eps must be > 0".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: usize,
    /// Mean batch loss since the previous row.
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,epoch,train_loss,val_loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.epoch, r.train_loss, r.val_loss));
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let bad = |n: usize| Error::Invalid(format!("metrics line {}: malformed", n + 1));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let [step, epoch, train, val] = f[..] else {
                return Err(bad(n));
            };
            Ok(MetricRow {
                step: step.parse().map_err(|_| bad(n))?,
                epoch: epoch.parse().map_err(|_| bad(n))?,
                train_loss: train.parse().map_err(|_| bad(n))?,
                val_loss: val.parse().map_err(|_| bad(n))?,
            })
        })
        .collect()
}

/// Optimizer position at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub step: u64,
    pub adam: AdamState<f32>,
}

impl TrainState {
    pub fn fresh(model: &GetNetModel) -> Self {
        Self {
            epochs_done: 0,
            step: 0,
            adam: AdamState::new(model.params()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.epochs_done as u64).to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        out.extend_from_slice(&(self.adam.m.len() as u32).to_le_bytes());
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            out.extend_from_slice(&(m.len() as u32).to_le_bytes());
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("training state: {m}"));
        if bytes.len() < 36 || &bytes[..4] != STATE_MAGIC {
            return Err(bad("bad magic or too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(bad("CRC mismatch"));
        }
        let mut pos = 4;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        if u32_at(take(4)?) != STATE_VERSION {
            return Err(bad("unsupported version"));
        }
        let epochs_done = u64_at(take(8)?) as usize;
        let step = u64_at(take(8)?);
        let adam_step = u64_at(take(8)?);
        let count = u32_at(take(4)?) as usize;
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let len = u32_at(take(4)?) as usize;
            let floats = |b: &[u8]| -> Vec<f32> {
                b.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect()
            };
            m.push(floats(take(4 * len)?));
            v.push(floats(take(4 * len)?));
        }
        if pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            epochs_done,
            step,
            adam: AdamState { step: adam_step, m, v },
        })
    }

    fn matches(&self, model: &GetNetModel) -> bool {
        self.adam.m.len() == model.params().len()
            && self
                .adam
                .m
                .iter()
                .zip(model.params())
                .all(|(m, p)| m.len() == p.numel())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<MetricRow>,
    /// Validation loss of the constant predictor `k_hat = 1`.
    pub constant_val_loss: f64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub state: TrainState,
}

fn pair_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = item_rng(seed, index);
    rng.set_stream(stream);
    rng
}

fn validation_pairs(corpus: &Corpus, cfg: &TrainConfig) -> Result<Vec<TrainingPair>> {
    let images: Vec<&Image2D> = if corpus.val.is_empty() {
        corpus.train.iter().take(FALLBACK_VAL).collect()
    } else {
        corpus.val.iter().collect()
    };
    images
        .par_iter()
        .enumerate()
        .map(|(i, u)| make_training_pair(u, &cfg.fieldgen, &mut pair_rng(cfg.seed, VAL_STREAM, i as u64)))
        .collect()
}

/// Mean ratio loss over `pairs`, evaluated in batches without gradients.
pub fn mean_pair_loss(model: &GetNetModel, pairs: &[TrainingPair], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in pairs.chunks(batch.max(1)) {
        let refs: Vec<&TrainingPair> = chunk.iter().collect();
        let mut nn = neednet_forward::<f32>(model, &refs, false)?;
        let loss = record_loss(&mut nn, &refs)?;
        total += nn.graph.value(loss)?.data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Loss of predicting `k_hat = 1` everywhere.
pub fn constant_predictor_loss(pairs: &[TrainingPair]) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|p| p.k.values().iter().map(|&k| (k as f64 - 1.0).abs()).sum::<f64>() / p.k.values().len() as f64)
        .sum();
    total / pairs.len() as f64
}

fn check_inputs(model: &GetNetModel, corpus: &Corpus, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    if model.input_size() != cfg.image_size {
        return Err(Error::Dimensions {
            what: "model input",
            expected_w: cfg.image_size,
            expected_h: cfg.image_size,
            found_w: model.input_size(),
            found_h: model.input_size(),
        });
    }
    Ok(())
}

/// Trains `model` in place from a fresh optimizer state.
pub fn train(model: &mut GetNetModel, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainReport> {
    let state = TrainState::fresh(model);
    train_from(model, state, Vec::new(), corpus, cfg)
}

/// Loads the latest model, optimizer state and metrics from a checkpoint directory.
pub fn load_resume_point(dir: &Path) -> Result<(GetNetModel, TrainState, Vec<MetricRow>)> {
    let model = GetNetModel::load(&dir.join(MODEL_FILE))?;
    let state = TrainState::from_bytes(&std::fs::read(dir.join(STATE_FILE))?)?;
    if !state.matches(&model) {
        return Err(Error::Checkpoint("training state does not match the model".into()));
    }
    let metrics = match std::fs::read_to_string(dir.join(METRICS_FILE)) {
        Ok(text) => parse_metrics_csv(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    Ok((model, state, metrics))
}

/// Continues training from `state` up to `cfg.epochs` total epochs.
pub fn train_from(
    model: &mut GetNetModel,
    mut state: TrainState,
    mut metrics: Vec<MetricRow>,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_inputs(model, corpus, cfg)?;
    if !state.matches(model) {
        return Err(Error::Checkpoint("training state does not match the model".into()));
    }
    let val = validation_pairs(corpus, cfg)?;
    let constant_val_loss = constant_predictor_loss(&val);
    let initial_val_loss = mean_pair_loss(model, &val, cfg.batch_size)?;
    info!(
        "{} training images, {} validation pairs, constant-predictor loss {constant_val_loss:.5}, initial loss {initial_val_loss:.5}",
        corpus.train.len(),
        val.len()
    );
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let names = model.param_names().to_vec();
    let mut last_val = initial_val_loss;
    for epoch in state.epochs_done..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut pair_rng(cfg.seed, epoch as u64 + 1, u64::MAX));
        let batches = order.chunks(cfg.batch_size).count();
        let (mut running, mut running_n) = (0.0, 0usize);

        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let pairs = idx
                .par_iter()
                .map(|&i| {
                    let mut rng = pair_rng(cfg.seed, epoch as u64 + 1, i as u64);
                    make_training_pair(&corpus.train[i], &cfg.fieldgen, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&TrainingPair> = pairs.iter().collect();
            let mut nn = neednet_forward::<f32>(model, &refs, true)?;
            let loss = record_loss(&mut nn, &refs)?;
            let loss_value = nn.graph.value(loss)?.data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { step: state.step + 1 });
            }
            nn.graph.backward(loss)?;
            let grads = nn
                .params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| Ok(nn.graph.take_grad(v)?.unwrap_or_else(|| Tensor4::zeros(p.shape()))))
                .collect::<Result<Vec<_>>>()?;
            adam_step(model.params_mut(), &grads, &names, &mut state.adam, &cfg.adam)?;
            state.step += 1;
            running += loss_value;
            running_n += 1;

            if state.step % cfg.eval_every as u64 == 0 || b + 1 == batches {
                last_val = mean_pair_loss(model, &val, cfg.batch_size)?;
                metrics.push(MetricRow {
                    step: state.step,
                    epoch,
                    train_loss: running / running_n as f64,
                    val_loss: last_val,
                });
                info!(
                    "epoch {epoch} step {}: train {:.5} val {last_val:.5}",
                    state.step,
                    running / running_n as f64
                );
                running = 0.0;
                running_n = 0;
            }
        }
        state.epochs_done = epoch + 1;
        if let Some(dir) = &cfg.checkpoint_dir {
            write_checkpoint(dir, epoch, model, &state, &metrics)?;
        }
    }

    Ok(TrainReport {
        metrics,
        constant_val_loss,
        initial_val_loss,
        final_val_loss: last_val,
        state,
    })
}

fn write_checkpoint(
    dir: &Path,
    epoch: usize,
    model: &GetNetModel,
    state: &TrainState,
    metrics: &[MetricRow],
) -> Result<()> {
    let bytes = model.to_bytes();
    io::write_atomic(&dir.join(format!("epoch_{:03}.gnet", epoch + 1)), &bytes)?;
    io::write_atomic(&dir.join(MODEL_FILE), &bytes)?;
    io::write_atomic(&dir.join(STATE_FILE), &state.to_bytes())?;
    io::write_atomic(&dir.join(METRICS_FILE), metrics_csv(metrics).as_bytes())
}
