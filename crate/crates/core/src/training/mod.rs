//! Teacher-forced training with Adam, gradient clipping, per-epoch
//! checkpoints and a CSV training log.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Sample, Vocabulary, PAD_ID, UNK_ID};
use crate::model::{decode, encode_inputs, Ctx, Model, ModelError};
use crate::region::RegionFeatureSet;
use crate::tensor::{AdamConfig, ParamGrads, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format_version {found}, expected {expected}")]
    Version { found: u64, expected: u32 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("no training examples")]
    NoExamples,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged in epoch {epoch}; last good parameters are from epoch {last_good_epoch}")]
    Diverged {
        epoch: usize,
        last_good_epoch: usize,
        last_good: Box<Model>,
    },
}

impl TrainError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

fn default_batch_size() -> usize {
    32
}
fn default_lr() -> f32 {
    5e-4
}
fn default_epochs() -> usize {
    30
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_clip_norm() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Fraction of training articles held out for model selection.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            lr: default_lr(),
            epochs: default_epochs(),
            val_fraction: default_val_fraction(),
            clip_norm: default_clip_norm(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return bad("clip_norm must be non-negative");
        }
        Ok(())
    }
}

/// One (article, comment) training pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    /// Encoded title and body.
    pub src: Vec<usize>,
    /// Comment framed as `BOS … EOS`.
    pub target: Vec<usize>,
    pub image_ref: String,
}

/// Source ids for a sample; an empty source becomes a single UNK.
pub fn encode_source(vocab: &Vocabulary, sample: &Sample, max_text_len: usize) -> Vec<usize> {
    let ids = vocab.encode(&sample.source_text(), max_text_len);
    if ids.is_empty() {
        vec![UNK_ID]
    } else {
        ids
    }
}

/// One example per comment. Comments are truncated so that generation can
/// reproduce them within `max_gen_len` tokens including EOS.
pub fn build_examples(
    samples: &[Sample],
    vocab: &Vocabulary,
    max_text_len: usize,
    max_gen_len: usize,
) -> Vec<Example> {
    samples
        .iter()
        .flat_map(|s| {
            let src = encode_source(vocab, s, max_text_len);
            s.comments.iter().map(move |c| Example {
                src: src.clone(),
                target: vocab.encode_comment(&c.text, max_gen_len + 1),
                image_ref: s.image_ref.clone(),
            })
        })
        .collect()
}

pub type RegionLookup = BTreeMap<String, RegionFeatureSet>;

fn regions_for<'r>(
    model: &Model,
    regions: &'r RegionLookup,
    image_ref: &str,
) -> Result<Option<&'r RegionFeatureSet>, TrainError> {
    if !model.config.ablation.uses_visual() {
        return Ok(None);
    }
    regions
        .get(image_ref)
        .map(Some)
        .ok_or_else(|| ModelError::MissingRegions(image_ref.to_string()).into())
}

/// Mean over the batch of each example's cross-entropy on its shifted
/// target, PAD positions excluded.
pub fn teacher_forced_loss(
    ctx: &mut Ctx<'_>,
    model: &Model,
    batch: &[&Example],
    regions: &RegionLookup,
) -> Result<Var, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total: Option<Var> = None;
    for ex in batch {
        if ex.target.len() < 2 {
            return Err(ModelError::EmptyInput("target").into());
        }
        let rfs = regions_for(model, regions, &ex.image_ref)?;
        let (enc, y) = encode_inputs(ctx, &ex.src, rfs)?;
        let n = ex.target.len();
        let logits = decode(ctx, &ex.target[..n - 1], &enc, y)?;
        let ce = ctx.tape.cross_entropy(logits, &ex.target[1..], PAD_ID)?;
        total = Some(match total {
            None => ce,
            Some(t) => ctx.tape.add(t, ce)?,
        });
    }
    let total = total.expect("batch is non-empty");
    Ok(ctx.tape.scale(total, 1.0 / batch.len() as f32)?)
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grads(
    model: &Model,
    batch: &[&Example],
    regions: &RegionLookup,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f32, ParamGrads), TrainError> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, model, rng);
    let loss = teacher_forced_loss(&mut ctx, model, batch, regions)?;
    let grads = ctx.tape.backward(loss)?;
    let pg = ctx.param_grads(&grads);
    Ok((tape.value(loss).item(), pg))
}

/// Loss without dropout and without recording gradients.
pub fn evaluate_loss(
    model: &Model,
    examples: &[Example],
    regions: &RegionLookup,
    batch_size: usize,
) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::NoExamples);
    }
    let mut total = 0.0f64;
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch: Vec<&Example> = chunk.iter().collect();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, model, None);
        let loss = teacher_forced_loss(&mut ctx, model, &batch, regions)?;
        total += tape.value(loss).item() as f64 * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

/// One entry per completed epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// CSV with header `epoch,train_loss,val_loss`; an absent validation
    /// loss is an empty cell. Wall-clock time is left out so the file is
    /// reproducible.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", e.epoch, e.train_loss, val);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Where training writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt.json")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt.json")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the final epoch.
    pub last: Model,
    /// Parameters of the epoch with the lowest validation loss (training loss
    /// when there is no validation set).
    pub best: Model,
    pub best_epoch: usize,
    pub log: TrainLog,
}

fn write(path: &Path, text: &str) -> Result<(), TrainError> {
    std::fs::write(path, text).map_err(|e| TrainError::io(path, e))
}

/// Trains `model` in place of a copy. Batches are reshuffled every epoch
/// from a generator seeded with `cfg.seed`, which also drives dropout. With
/// `outputs`, the last and best checkpoints and the log are rewritten after
/// every epoch.
pub fn train(
    model: Model,
    train_set: &[Example],
    val_set: &[Example],
    regions: &RegionLookup,
    cfg: &TrainConfig,
    vocab: Option<&Vocabulary>,
    outputs: Option<&TrainOutputs>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::NoExamples);
    }
    if let Some(out) = outputs {
        std::fs::create_dir_all(&out.dir).map_err(|e| TrainError::io(&out.dir, e))?;
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score = f64::INFINITY;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let snapshot = model.clone();
        let diverged = |e: TrainError| match e {
            TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => TrainError::Diverged {
                epoch,
                last_good_epoch: epoch - 1,
                last_good: Box::new(snapshot.clone()),
            },
            other => other,
        };
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) =
                loss_and_grads(&model, &batch, regions, Some(&mut rng)).map_err(&diverged)?;
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(diverged(TensorError::NonFinite { op: "backward" }.into()));
            }
            model.params.adam_step(&grads, &adam)?;
            total += loss as f64 * batch.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_loss(&model, val_set, regions, cfg.batch_size).map_err(&diverged)?)
        };
        let score = val_loss.unwrap_or(train_loss);
        let improved = score < best_score;
        if improved {
            best_score = score;
            best = model.clone();
            best_epoch = epoch;
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
        if let Some(out) = outputs {
            let ckpt = Checkpoint {
                model: model.clone(),
                vocab: vocab.cloned(),
            };
            save_checkpoint(out.last(), &ckpt)?;
            if improved {
                save_checkpoint(out.best(), &ckpt)?;
            }
            write(&out.log(), &log.to_csv())?;
        }
    }
    Ok(TrainOutcome {
        last: model,
        best,
        best_epoch,
        log,
    })
}

/// Splits sample indices into train and validation parts by article, the
/// validation part being `round(fraction · n)` articles chosen with `seed`.
pub fn validation_split(indices: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx = indices.to_vec();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
    let n_val = ((idx.len() as f64) * fraction).round() as usize;
    let n_val = n_val.min(idx.len().saturating_sub(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}
