//! The training loop: AdamW with warmup, EMA shadow weights, a fixed-grid
//! validation loss and best-checkpoint selection.

mod checkpoint;
mod optim;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, RngState, BLOB_FILE, FORMAT_VERSION,
    MANIFEST_FILE,
};
pub use optim::{adamw_step, adamw_update, ema_update, AdamConfig, AdamState};

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenSequence};
use crate::diffusion::{batch_loss_on_tape, forward_mask, sample_timestep, DiffusionError, NoiseSchedule, DEFAULT_LAMBDA, T_MIN};
use crate::model::{forward_batch, forward_on_tape, BatchInput, DenoiserParams, ModelConfig, ModelError};
use crate::numkit::{NumError, Tape};
use crate::rng::{self, TAG_BATCH_ORDER, TAG_TRAIN_ACC, TAG_TRAIN_MASK, TAG_VAL_MASK};
use crate::scalar::Scalar;

pub const BUILD_ID: &str = concat!("maskinv ", env!("CARGO_PKG_VERSION"));

/// Validation timesteps.
pub const VAL_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Seed for validation masks and the teacher-forced accuracy probe. Fixed so
/// both are functions of (weights, data) alone.
pub const EVAL_SEED: u64 = 0x5eed;

pub const METRICS_HEADER: &str = "step,train_loss,val_loss,token_acc";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("train config error: {0}")]
    Config(String),
    #[error("non-finite gradient for {name} (max abs {max_abs})")]
    NonFiniteGradient { name: String, max_abs: f64 },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("data mismatch: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<NumError> for TrainError {
    fn from(e: NumError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub t_min: f64,
    pub schedule: NoiseSchedule,
    pub eval_every: usize,
    /// Validation sequences used per evaluation (from the start of the split).
    pub val_limit: usize,
    /// Training sequences probed for teacher-forced accuracy.
    pub acc_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup_steps: 200,
            max_steps: 20_000,
            batch_size: 64,
            ema_decay: 0.999,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            t_min: T_MIN,
            schedule: NoiseSchedule::default(),
            eval_every: 1000,
            val_limit: 1000,
            acc_samples: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1)", self.ema_decay));
        }
        if self.warmup_steps > self.max_steps {
            return bad(format!(
                "warmup_steps {} exceeds max_steps {}",
                self.warmup_steps, self.max_steps
            ));
        }
        if self.max_steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("max_steps, batch_size and eval_every must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.t_min > 0.0 && self.t_min <= 0.1) {
            return bad(format!("t_min {} outside (0, 0.1]", self.t_min));
        }
        self.schedule.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
        }
    }
}

/// Sequences with their cached embeddings, row-aligned.
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'a> {
    pub seqs: &'a [TokenSequence],
    pub embeddings: &'a [f32],
}

impl<'a> Dataset<'a> {
    pub fn new(seqs: &'a [TokenSequence], embeddings: &'a [f32], d: usize) -> Result<Self, TrainError> {
        if seqs.is_empty() || embeddings.len() != seqs.len() * d {
            return Err(TrainError::Data(format!(
                "{} embedding values for {} sequences of dimension {d}",
                embeddings.len(),
                seqs.len()
            )));
        }
        Ok(Self { seqs, embeddings })
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &'a [f32] {
        let d = self.embeddings.len() / self.seqs.len();
        &self.embeddings[i * d..(i + 1) * d]
    }

    pub fn head(&self, k: usize) -> Dataset<'a> {
        let k = k.min(self.len());
        let d = self.embeddings.len() / self.seqs.len();
        Dataset {
            seqs: &self.seqs[..k],
            embeddings: &self.embeddings[..k * d],
        }
    }
}

/// One masked training or evaluation example.
struct Example {
    tokens: Vec<TokenId>,
    targets: Vec<TokenId>,
    flags: Vec<bool>,
    /// Timestep fed to the model.
    t_model: f64,
    /// Timestep in the `1/t` loss weight.
    t_loss: f64,
    row: usize,
}

struct Batch {
    tokens: Vec<TokenId>,
    targets: Vec<TokenId>,
    flags: Vec<bool>,
    t_model: Vec<f64>,
    t_loss: Vec<f64>,
    embeddings: Vec<f32>,
}

fn assemble(examples: &[Example], data: &Dataset<'_>) -> Batch {
    Batch {
        tokens: examples.iter().flat_map(|e| e.tokens.iter().copied()).collect(),
        targets: examples.iter().flat_map(|e| e.targets.iter().copied()).collect(),
        flags: examples.iter().flat_map(|e| e.flags.iter().copied()).collect(),
        t_model: examples.iter().map(|e| e.t_model).collect(),
        t_loss: examples.iter().map(|e| e.t_loss).collect(),
        embeddings: examples.iter().flat_map(|e| data.embedding(e.row).iter().copied()).collect(),
    }
}

fn mask_example(
    x0: &TokenSequence,
    row: usize,
    t: f64,
    schedule: &NoiseSchedule,
    config: &ModelConfig,
    rng: &mut rng::Rng,
) -> Result<Example, TrainError> {
    let m = forward_mask(x0, t, schedule, config.vocab(), rng)?;
    Ok(Example {
        t_model: m.t,
        t_loss: m.t,
        tokens: m.tokens,
        targets: x0.0.clone(),
        flags: m.mask_flags,
        row,
    })
}

const EVAL_CHUNK: usize = 64;

/// Mean `1/t`-weighted masked loss over the validation grid.
///
/// Masks always follow a log-linear schedule on [`VAL_GRID`] so runs trained
/// under different schedules are scored on the same task. The model's
/// timestep input is what `schedule` would have fed it during training.
pub fn validation_loss<T: Scalar>(
    params: &DenoiserParams<T>,
    data: &Dataset<'_>,
    schedule: &NoiseSchedule,
) -> Result<f64, TrainError> {
    let lambda = match *schedule {
        NoiseSchedule::LogLinear { lambda } => lambda,
        NoiseSchedule::FixedRatio { .. } => DEFAULT_LAMBDA,
    };
    let grid_schedule = NoiseSchedule::LogLinear { lambda };
    let config = params.config();
    let mut examples = Vec::with_capacity(data.len() * VAL_GRID.len());
    for (i, x0) in data.seqs.iter().enumerate() {
        for (j, &t) in VAL_GRID.iter().enumerate() {
            let mut r = rng::stream(EVAL_SEED, &[TAG_VAL_MASK, i as u64, j as u64]);
            let mut ex = mask_example(x0, i, t, &grid_schedule, config, &mut r)?;
            ex.t_model = schedule.effective_t(t);
            examples.push(ex);
        }
    }
    let mut total = 0.0;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let b = assemble(chunk, data);
        let mut tape = Tape::new();
        let vars = params.record(&mut tape)?;
        let input = BatchInput {
            tokens: &b.tokens,
            timesteps: &b.t_model,
            embeddings: &b.embeddings,
        };
        let logits = forward_on_tape(&mut tape, params, &vars, &input)?;
        let loss = batch_loss_on_tape(&mut tape, logits, &b.targets, &b.flags, &b.t_loss)?;
        total += tape.value(loss)?.data()[0].to_f64_lossy() * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Argmax accuracy at masked positions given the true unmasked context,
/// with masks drawn from `schedule` at uniform timesteps.
pub fn teacher_forced_accuracy<T: Scalar>(
    params: &DenoiserParams<T>,
    data: &Dataset<'_>,
    schedule: &NoiseSchedule,
    t_min: f64,
) -> Result<f64, TrainError> {
    let config = params.config();
    let (v, mask) = (config.vocab_size, config.vocab().mask_id() as usize);
    let mut examples = Vec::with_capacity(data.len());
    for (i, x0) in data.seqs.iter().enumerate() {
        let mut r = rng::stream(EVAL_SEED, &[TAG_TRAIN_ACC, i as u64]);
        let t = sample_timestep(&mut r, t_min)?;
        examples.push(mask_example(x0, i, t, schedule, config, &mut r)?);
    }
    let (mut hit, mut seen) = (0usize, 0usize);
    for chunk in examples.chunks(EVAL_CHUNK) {
        let b = assemble(chunk, data);
        let logits = forward_batch(
            params,
            &BatchInput {
                tokens: &b.tokens,
                timesteps: &b.t_model,
                embeddings: &b.embeddings,
            },
        )?;
        for (p, row) in logits.data().chunks(v).enumerate() {
            if !b.flags[p] {
                continue;
            }
            let content = &row[..mask];
            let pred = (0..mask).fold(0, |best, k| if content[k] > content[best] { k } else { best });
            seen += 1;
            hit += usize::from(pred as TokenId == b.targets[p]);
        }
    }
    Ok(if seen == 0 { 0.0 } else { hit as f64 / seen as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub token_acc: f64,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.train_loss, self.val_loss, self.token_acc)
    }
}

/// Identity of the data a run was trained on; copied into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataIdentity {
    pub corpus_hash: String,
    pub encoder_seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_step: usize,
    pub best_val_loss: f64,
    /// Teacher-forced accuracy of the final EMA weights on the training probe.
    pub final_train_acc: f64,
    pub metrics: Vec<MetricRow>,
    /// EMA weights at the best validation step.
    pub best: DenoiserParams<f32>,
    pub last: Checkpoint,
    pub seconds: f64,
}

/// Draws the step's batch and masks. Pure in `(seed, step)`.
fn training_batch(
    cfg: &TrainConfig,
    model: &ModelConfig,
    data: &Dataset<'_>,
    step: usize,
) -> Result<Batch, TrainError> {
    let mut order = rng::stream(cfg.seed, &[TAG_BATCH_ORDER, step as u64]);
    let mut examples = Vec::with_capacity(cfg.batch_size);
    for b in 0..cfg.batch_size {
        let row = order.random_range(0..data.len());
        let mut r = rng::stream(cfg.seed, &[TAG_TRAIN_MASK, step as u64, b as u64]);
        let t = sample_timestep(&mut r, cfg.t_min)?;
        examples.push(mask_example(&data.seqs[row], row, t, &cfg.schedule, model, &mut r)?);
    }
    Ok(assemble(&examples, data))
}

/// One optimizer step on raw weights; returns the batch loss.
pub fn train_step(
    params: &mut DenoiserParams<f32>,
    state: &mut AdamState<f32>,
    cfg: &TrainConfig,
    data: &Dataset<'_>,
    step: usize,
) -> Result<f64, TrainError> {
    let b = training_batch(cfg, params.config(), data, step)?;
    let mut tape = Tape::new();
    let vars = params.record(&mut tape)?;
    let input = BatchInput {
        tokens: &b.tokens,
        timesteps: &b.t_model,
        embeddings: &b.embeddings,
    };
    let logits = forward_on_tape(&mut tape, params, &vars, &input)?;
    let loss = batch_loss_on_tape(&mut tape, logits, &b.targets, &b.flags, &b.t_loss)?;
    let value = tape.value(loss)?.data()[0] as f64;
    let grads = tape.grad(loss, &vars)?;
    drop(tape);
    adamw_step(params, &grads, state, step, &cfg.adam())?;
    Ok(value)
}

fn check_data(model: &ModelConfig, data: &Dataset<'_>, what: &str) -> Result<(), TrainError> {
    if data.embeddings.len() != data.len() * model.embed_dim {
        return Err(TrainError::Data(format!(
            "{what}: embeddings have dimension {}, model expects {}",
            data.embeddings.len() / data.len().max(1),
            model.embed_dim
        )));
    }
    let vocab = model.vocab();
    if let Some(s) = data
        .seqs
        .iter()
        .find(|s| s.len() != model.seq_len || !s.tokens().iter().all(|&t| vocab.is_content(t)))
    {
        return Err(TrainError::Data(format!(
            "{what}: sequence {:?} does not fit n={} V={}",
            s.tokens(),
            model.seq_len,
            model.vocab_size
        )));
    }
    Ok(())
}

/// Trains from a fresh initialization.
///
/// With `out_dir`, appends `metrics.csv` row by row and writes the best and
/// last checkpoints to `best/` and `last/`.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_data: &Dataset<'_>,
    val_data: &Dataset<'_>,
    identity: &DataIdentity,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model.validate()?;
    check_data(model, train_data, "train split")?;
    check_data(model, val_data, "validation split")?;
    let started = Instant::now();
    let val = val_data.head(cfg.val_limit);
    let probe = train_data.head(cfg.acc_samples);

    let mut params = DenoiserParams::<f32>::init(model, cfg.seed)?;
    let mut ema = params.clone();
    let mut state = AdamState::zeros_like(params.tensors());

    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let manifest = |step: usize, val_loss: f64| CheckpointManifest {
        format_version: FORMAT_VERSION,
        build: BUILD_ID.to_string(),
        model: model.clone(),
        train: cfg.clone(),
        step,
        val_loss,
        rng: RngState {
            seed: cfg.seed,
            next_step: step + 1,
        },
        corpus_hash: identity.corpus_hash.clone(),
        encoder_seed: identity.encoder_seed,
        blob_sha256: String::new(),
    };

    let mut metrics = Vec::new();
    let mut best = (0usize, f64::INFINITY, ema.clone());
    let mut window = (0.0, 0usize);
    let mut last_acc = 0.0;
    for step in 1..=cfg.max_steps {
        let loss = train_step(&mut params, &mut state, cfg, train_data, step)?;
        ema_update(ema.tensors_mut(), params.tensors(), cfg.ema_decay);
        window.0 += loss;
        window.1 += 1;
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let val_loss = validation_loss(&ema, &val, &cfg.schedule)?;
            last_acc = teacher_forced_accuracy(&ema, &probe, &cfg.schedule, cfg.t_min)?;
            let row = MetricRow {
                step,
                train_loss: window.0 / window.1 as f64,
                val_loss,
                token_acc: last_acc,
            };
            log::info!(
                "step {step}: train {:.4} val {:.4} acc {:.4} ({:.0}s)",
                row.train_loss,
                val_loss,
                last_acc,
                started.elapsed().as_secs_f64()
            );
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{}", row.to_csv())?;
                f.flush()?;
            }
            metrics.push(row);
            window = (0.0, 0);
            if val_loss < best.1 {
                best = (step, val_loss, ema.clone());
                if let Some(dir) = out_dir {
                    save_checkpoint(
                        &dir.join("best"),
                        &Checkpoint {
                            manifest: manifest(step, val_loss),
                            raw: params.clone(),
                            ema: ema.clone(),
                            adam: state.clone(),
                        },
                    )?;
                }
            }
        }
    }
    let final_val = metrics.last().map_or(f64::NAN, |r| r.val_loss);
    let last = Checkpoint {
        manifest: manifest(cfg.max_steps, final_val),
        raw: params,
        ema,
        adam: state,
    };
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("last"), &last)?;
    }
    Ok(TrainOutcome {
        best_step: best.0,
        best_val_loss: best.1,
        final_train_acc: last_acc,
        metrics,
        best: best.2,
        last,
        seconds: started.elapsed().as_secs_f64(),
    })
}
