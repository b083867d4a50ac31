//! Minibatch ELBO training with KL warm-up, gradient clipping and Adam.

pub mod checkpoint;
mod objective;
mod optim;

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SparseCorpus;
use crate::decoder::phi_stack;
use crate::encoder::{draw_noise, infer, Noise};
use crate::model::{DecoderKind, InputTransform, Model, ModelConfig, ModelError};
use crate::tape::{Tape, TapeError, Tensor};

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointManifest};
pub use objective::{elbo, kl_weibull_gamma, kl_weibull_gamma_value, warmup_beta, Batch, Elbo, PRIOR_SHAPE_FLOOR};
pub use optim::{adam_step, clip_gradients, global_norm, AdamState};

/// The 15-layer widths used for the full-size configuration.
pub const PAPER15: [usize; 15] = [256, 224, 192, 160, 128, 112, 96, 80, 64, 56, 48, 40, 32, 16, 8];

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";

/// splitmix64 mix of a seed and a stream id.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub layer_widths: Vec<usize>,
    pub embed_dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub variant: DecoderKind,
    pub precision: Precision,
    pub input_transform: InputTransform,
    /// Gamma rate `c` of every layer's prior.
    pub prior_rate: f64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layer_widths: PAPER15.to_vec(),
            embed_dim: 100,
            hidden: 256,
            lr: 1e-2,
            batch_size: 200,
            epochs: 100,
            warmup_epochs: 20,
            clip_norm: 20.0,
            seed: 0,
            variant: DecoderKind::Sawetm,
            precision: Precision::F64,
            input_transform: InputTransform::Raw,
            prior_rate: 1.0,
            checkpoint_every: 10,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            layer_widths: self.layer_widths.clone(),
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            variant: self.variant,
            input_transform: self.input_transform,
            prior_rate: self.prior_rate,
        }
    }

    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.layer_widths.is_empty() || self.layer_widths.contains(&0) {
            p.push("layer_widths must be a nonempty list of positive integers".into());
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
            ("workers", self.workers),
        ] {
            if v == 0 {
                p.push(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("lr", self.lr), ("clip_norm", self.clip_norm), ("prior_rate", self.prior_rate)] {
            if !(v > 0.0 && v.is_finite()) {
                p.push(format!("{name} must be a positive number, got {v}"));
            }
        }
        if self.epochs > 0 && self.warmup_epochs > self.epochs {
            p.push(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        p
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(p))
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("non-finite value at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: u64,
        detail: String,
        /// Parameters at the start of the failing epoch.
        last_good: Box<Model>,
    },
}

impl From<TapeError> for TrainError {
    fn from(e: TapeError) -> Self {
        TrainError::Model(e.into())
    }
}

/// Per-epoch training statistics. Loss terms are averaged per document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: Vec<f64>,
    pub beta_warm: f64,
    /// Mean global gradient norm before clipping.
    pub grad_norm: f64,
    /// Largest global gradient norm after clipping.
    pub max_clipped_norm: f64,
    /// Smallest Weibull shape seen in any step.
    pub min_shape: f64,
    pub steps: u64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub optimizer: AdamState,
    pub records: Vec<EpochRecord>,
    pub step: u64,
}

struct ShardOut {
    grads: Vec<Tensor>,
    loss: f64,
    recon: f64,
    kl: Vec<f64>,
    min_shape: f64,
}

enum ShardError {
    Model(ModelError),
    NonFinite(String),
}

impl From<ModelError> for ShardError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BadTheta { .. }
            | ModelError::Tape(TapeError::Domain { .. })
            | ModelError::Tape(TapeError::NonFinite(_)) => ShardError::NonFinite(e.to_string()),
            other => ShardError::Model(other),
        }
    }
}

impl From<TapeError> for ShardError {
    fn from(e: TapeError) -> Self {
        ModelError::from(e).into()
    }
}

fn shard_pass(model: &Model, batch: &Batch, noise: Vec<Tensor>, beta: f64) -> Result<ShardOut, ShardError> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let phis = phi_stack(&mut tape, &model.layout.decoder, &vars)?;
    let post = infer(&mut tape, &model.layout, &vars, &phis, &batch.input, &Noise::Sample(noise))?;
    let e = elbo(&mut tape, &batch.counts, &post, &phis, model.config.prior_rate, beta)?;
    let loss = tape.value(e.loss).item();
    let recon = tape.value(e.recon).item();
    let kl: Vec<f64> = e.kl.iter().map(|k| tape.value(*k).item()).collect();
    if !loss.is_finite() {
        return Err(ShardError::NonFinite(format!("loss {loss}, reconstruction {recon}, KL per layer {kl:?}")));
    }
    let min_shape = post
        .shape
        .iter()
        .flat_map(|k| tape.value(*k).data().iter().copied())
        .fold(f64::INFINITY, f64::min);
    let mut g = tape.backward(e.loss)?;
    let grads: Vec<Tensor> = vars.iter().map(|v| g.take(*v)).collect();
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(ShardError::NonFinite(format!("gradient of {} is not finite", model.names()[i])));
    }
    Ok(ShardOut {
        grads,
        loss,
        recon,
        kl,
        min_shape,
    })
}

fn columns(t: &Tensor, start: usize, end: usize) -> Tensor {
    Tensor::from_fn(t.rows(), end - start, |r, c| t.get(r, start + c))
}

/// Forward/backward over one minibatch, split into `workers` contiguous
/// shards. Gradients are reduced in shard order.
fn batch_pass(
    model: &Model,
    corpus: &SparseCorpus,
    ids: &[usize],
    noise: &[Tensor],
    beta: f64,
    workers: usize,
) -> Result<ShardOut, ShardError> {
    let transform = model.config.input_transform;
    let shards = workers.min(ids.len()).max(1);
    let bounds: Vec<(usize, usize)> = (0..shards)
        .map(|s| (s * ids.len() / shards, (s + 1) * ids.len() / shards))
        .collect();
    let run = |&(a, b): &(usize, usize)| {
        let batch = Batch::new(corpus, &ids[a..b], transform);
        let eps = noise.iter().map(|t| columns(t, a, b)).collect();
        shard_pass(model, &batch, eps, beta)
    };
    let outs: Vec<Result<ShardOut, ShardError>> = if shards == 1 {
        vec![run(&bounds[0])]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = bounds.iter().map(|b| s.spawn(move || run(b))).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    let mut iter = outs.into_iter();
    let mut acc = iter.next().expect("at least one shard")?;
    for out in iter {
        let out = out?;
        for (a, g) in acc.grads.iter_mut().zip(&out.grads) {
            a.add_assign(g);
        }
        acc.loss += out.loss;
        acc.recon += out.recon;
        for (a, k) in acc.kl.iter_mut().zip(&out.kl) {
            *a += k;
        }
        acc.min_shape = acc.min_shape.min(out.min_shape);
    }
    Ok(acc)
}

/// Runs the training loop from a seeded initialization. `on_epoch` sees each
/// finished epoch with the current parameters and global step.
pub fn train<F>(corpus: &SparseCorpus, config: &TrainConfig, on_epoch: F) -> Result<Trained, TrainError>
where
    F: FnMut(&EpochRecord, &Model, u64) -> Result<(), TrainError>,
{
    config.validate()?;
    let model = Model::init(config.model_config(corpus.vocab_size), derive_seed(config.seed, STREAM_INIT))?;
    train_from(model, corpus, config, on_epoch)
}

/// Like [`train`] but starting from the given parameters.
pub fn train_from<F>(mut model: Model, corpus: &SparseCorpus, config: &TrainConfig, mut on_epoch: F) -> Result<Trained, TrainError>
where
    F: FnMut(&EpochRecord, &Model, u64) -> Result<(), TrainError>,
{
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if model.config.vocab_size != corpus.vocab_size {
        return Err(ModelError::Config(format!(
            "model vocabulary {} differs from corpus vocabulary {}",
            model.config.vocab_size, corpus.vocab_size
        ))
        .into());
    }
    let widths = model.config.layer_widths.clone();
    let mut optimizer = AdamState::new(&model.params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_SHUFFLE));
    let noise_base = derive_seed(config.seed, STREAM_NOISE);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    let start = Instant::now();

    for epoch in 0..config.epochs {
        let beta = warmup_beta(epoch, config.warmup_epochs);
        let last_good = model.clone();
        order.shuffle(&mut shuffle_rng);
        let mut loss = 0.0;
        let mut recon = 0.0;
        let mut kl = vec![0.0; widths.len()];
        let mut norm_sum = 0.0;
        let mut max_clipped = 0.0f64;
        let mut min_shape = f64::INFINITY;
        let mut steps = 0u64;
        for ids in order.chunks(config.batch_size) {
            step += 1;
            steps += 1;
            let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(noise_base, step));
            let noise = draw_noise(&mut noise_rng, &widths, ids.len());
            let mut out = match batch_pass(&model, corpus, ids, &noise, beta, config.workers) {
                Ok(out) => out,
                Err(ShardError::Model(e)) => return Err(e.into()),
                Err(ShardError::NonFinite(detail)) => {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step,
                        detail,
                        last_good: Box::new(last_good),
                    })
                }
            };
            let norm = clip_gradients(&mut out.grads, config.clip_norm);
            norm_sum += norm;
            max_clipped = max_clipped.max(global_norm(&out.grads));
            adam_step(&mut model.params, &out.grads, &mut optimizer, config.lr);
            if let Some(i) = model.params.iter().position(|p| !p.all_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    detail: format!("parameter {} became non-finite", model.names()[i]),
                    last_good: Box::new(last_good),
                });
            }
            loss += out.loss;
            recon += out.recon;
            for (a, k) in kl.iter_mut().zip(&out.kl) {
                *a += k;
            }
            min_shape = min_shape.min(out.min_shape);
        }
        let n = corpus.len() as f64;
        let record = EpochRecord {
            epoch,
            loss: loss / n,
            recon: recon / n,
            kl: kl.iter().map(|k| k / n).collect(),
            beta_warm: beta,
            grad_norm: norm_sum / steps as f64,
            max_clipped_norm: max_clipped,
            min_shape,
            steps,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record, &model, step)?;
        records.push(record);
    }
    Ok(Trained {
        model,
        optimizer,
        records,
        step,
    })
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint-epoch-{epoch:04}.ckpt")
}

/// [`train`] (or [`train_from`] when `init` is given) plus artifacts in
/// `out_dir`: the CSV log, periodic checkpoints and `final.ckpt`. A
/// non-finite failure writes `last_good.ckpt` first.
pub fn run_training(
    corpus: &SparseCorpus,
    config: &TrainConfig,
    out_dir: &Path,
    init: Option<Model>,
    mut report: impl FnMut(&EpochRecord),
) -> Result<Trained, TrainError> {
    config.validate()?;
    let init = match init {
        Some(m) => m,
        None => Model::init(config.model_config(corpus.vocab_size), derive_seed(config.seed, STREAM_INIT))?,
    };
    fs::create_dir_all(out_dir).map_err(|e| io_error(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = csv::Writer::from_path(&log_path).map_err(|e| io_error(&log_path, e))?;
    let mut header = vec!["epoch".to_string(), "loss".into(), "recon".into()];
    header.extend((1..=config.layer_widths.len()).map(|l| format!("kl_layer_{l}")));
    header.extend(["beta_warm".into(), "grad_norm".into(), "wallclock_s".into()]);
    log.write_record(&header).map_err(|e| io_error(&log_path, e))?;
    log.flush().map_err(|e| io_error(&log_path, e))?;

    let result = train_from(init, corpus, config, |rec, model, step| {
        let mut row = vec![rec.epoch.to_string(), rec.loss.to_string(), rec.recon.to_string()];
        row.extend(rec.kl.iter().map(f64::to_string));
        row.extend([rec.beta_warm.to_string(), rec.grad_norm.to_string(), rec.wallclock_s.to_string()]);
        log.write_record(&row).map_err(|e| io_error(&log_path, e))?;
        log.flush().map_err(|e| io_error(&log_path, e))?;
        let done = rec.epoch + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
            checkpoint::save(&out_dir.join(checkpoint_name(done)), model, step, done)?;
        }
        info!(
            "epoch {} loss {:.4} recon {:.4} kl {:?} beta {:.3}",
            rec.epoch, rec.loss, rec.recon, rec.kl, rec.beta_warm
        );
        report(rec);
        Ok(())
    });
    match result {
        Ok(trained) => {
            checkpoint::save(&out_dir.join(FINAL_CHECKPOINT), &trained.model, trained.step, config.epochs)?;
            Ok(trained)
        }
        Err(TrainError::NonFinite {
            epoch,
            step,
            detail,
            last_good,
        }) => {
            warn!("training diverged at epoch {epoch}: {detail}");
            checkpoint::save(&out_dir.join(LAST_GOOD_CHECKPOINT), &last_good, step, epoch)?;
            Err(TrainError::NonFinite {
                epoch,
                step,
                detail,
                last_good,
            })
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests;
