//! Absorbing-state forward process, noise schedules and the weighted
//! masked-token loss.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenSequence, VocabSpec};
use crate::numkit::{cross_entropy, NumError, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Lower clamp on sampled timesteps; keeps the `1/t` weight bounded.
pub const T_MIN: f64 = 1e-3;

pub const DEFAULT_LAMBDA: f64 = 5.0;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// Survival probability `exp(-lambda t)`.
    LogLinear { lambda: f64 },
    /// Every position masked with probability `ratio`, independent of `t`.
    FixedRatio { ratio: f64 },
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::LogLinear { lambda: DEFAULT_LAMBDA }
    }
}

fn check_t(t: f64) -> Result<(), DiffusionError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(DiffusionError::Domain(format!("timestep {t} outside [0, 1]")))
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        match *self {
            NoiseSchedule::LogLinear { lambda } if lambda > 0.0 && lambda.is_finite() => Ok(()),
            NoiseSchedule::FixedRatio { ratio } if ratio > 0.0 && ratio <= 1.0 => Ok(()),
            other => Err(DiffusionError::Domain(format!("invalid schedule {other:?}"))),
        }
    }

    /// Survival probability of a clean token at timestep `t`.
    pub fn alpha(&self, t: f64) -> Result<f64, DiffusionError> {
        check_t(t)?;
        Ok(match *self {
            NoiseSchedule::LogLinear { lambda } => (-lambda * t).exp(),
            NoiseSchedule::FixedRatio { ratio } => 1.0 - ratio,
        })
    }

    pub fn mask_prob(&self, t: f64) -> Result<f64, DiffusionError> {
        Ok(1.0 - self.alpha(t)?)
    }

    /// Timestep recorded on a masked sample (and fed to the model).
    ///
    /// Fixed-ratio samples carry `t = ratio`, so the `1/t` loss weight becomes
    /// the constant `1/ratio`.
    pub fn effective_t(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::LogLinear { .. } => t,
            NoiseSchedule::FixedRatio { ratio } => ratio,
        }
    }
}

/// `x_t`: tokens with MASK substituted at flagged positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub tokens: Vec<TokenId>,
    pub mask_flags: Vec<bool>,
    pub t: f64,
}

impl MaskedSequence {
    pub fn fully_masked(n: usize, vocab: VocabSpec) -> Self {
        Self {
            tokens: vec![vocab.mask_id(); n],
            mask_flags: vec![true; n],
            t: 1.0,
        }
    }

    pub fn num_masked(&self) -> usize {
        self.mask_flags.iter().filter(|&&m| m).count()
    }
}

/// Masks each position independently with probability `1 - alpha(t)`.
pub fn forward_mask(
    x0: &TokenSequence,
    t: f64,
    schedule: &NoiseSchedule,
    vocab: VocabSpec,
    rng: &mut Rng,
) -> Result<MaskedSequence, DiffusionError> {
    let p = schedule.mask_prob(t)?;
    let mut tokens = x0.tokens().to_vec();
    let mut mask_flags = vec![false; tokens.len()];
    for (tok, flag) in tokens.iter_mut().zip(mask_flags.iter_mut()) {
        let u: f64 = rng.random();
        if u < p {
            *tok = vocab.mask_id();
            *flag = true;
        }
    }
    Ok(MaskedSequence {
        tokens,
        mask_flags,
        t: schedule.effective_t(t),
    })
}

/// Uniform draw on `[t_min, 1]`.
pub fn sample_timestep(rng: &mut Rng, t_min: f64) -> Result<f64, DiffusionError> {
    if !(t_min > 0.0 && t_min <= 0.1) {
        return Err(DiffusionError::Domain(format!("t_min {t_min} outside (0, 0.1]")));
    }
    let u: f64 = rng.random();
    Ok(t_min + (1.0 - t_min) * u)
}

/// `(1/t) * sum over masked i of -log p(x0_i)` for one sequence.
pub fn diffusion_loss<T: Scalar>(
    logits: &Tensor<T>,
    x0: &TokenSequence,
    masked: &MaskedSequence,
) -> Result<f64, DiffusionError> {
    if masked.t <= 0.0 {
        return Err(DiffusionError::Domain(format!("loss timestep {} <= 0", masked.t)));
    }
    let per_pos = cross_entropy(logits, x0.tokens(), &masked.mask_flags)?;
    let total: f64 = per_pos.data().iter().map(|x| x.to_f64_lossy()).sum();
    Ok(total / masked.t)
}

/// Batch loss on a tape: each sequence's masked-token sum weighted by `1/t`,
/// then averaged over the batch.
///
/// `logits` is `[batch * n x V]`; `targets` and `mask_flags` are flattened the
/// same way; `timesteps` holds one `t` per sequence.
pub fn batch_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[TokenId],
    mask_flags: &[bool],
    timesteps: &[f64],
) -> Result<Var, DiffusionError> {
    let b = timesteps.len();
    if b == 0 || targets.len() % b != 0 {
        return Err(DiffusionError::Domain(format!(
            "{} targets do not split into {b} sequences",
            targets.len()
        )));
    }
    if let Some(&t) = timesteps.iter().find(|&&t| t <= 0.0) {
        return Err(DiffusionError::Domain(format!("loss timestep {t} <= 0")));
    }
    let n = targets.len() / b;
    let per_pos = tape.cross_entropy(logits, targets, mask_flags)?;
    let weights: Vec<T> = timesteps
        .iter()
        .flat_map(|&t| std::iter::repeat_n(T::from_f64_lossy(1.0 / (t * b as f64)), n))
        .collect();
    Ok(tape.weighted_sum(per_pos, &weights)?)
}
