//! Recovering a token sequence from an embedding.
//!
//! Every strategy starts from MASK tokens (or from a sequential hypothesis)
//! and only queries a [`Denoiser`] for logits. MASK is never emitted: its
//! logit is dropped before any argmax or sampling step.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenSequence};
use crate::diffusion::{NoiseSchedule, T_MIN};
use crate::model::{Denoiser, ModelError};
use crate::rng::{self, Rng, TAG_DECODE};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("decode config error: {0}")]
    Config(String),
    #[error("embedding has dimension {got}, model expects {want}")]
    Dimension { want: usize, got: usize },
    #[error("internal decode error: {0}")]
    Internal(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sequential,
    Euler,
    EulerRemask,
    Confidence,
    TwoStage,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Sequential,
        Strategy::Euler,
        Strategy::EulerRemask,
        Strategy::Confidence,
        Strategy::TwoStage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sequential => "sequential",
            Strategy::Euler => "euler",
            Strategy::EulerRemask => "euler_remask",
            Strategy::Confidence => "confidence",
            Strategy::TwoStage => "two_stage",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s.replace('-', "_"))
            .ok_or_else(|| DecodeError::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KSchedule {
    /// Equal shares, remainder to the earliest steps.
    Linear,
    /// Masked count after step `s` is `floor(n cos(pi s / 2S))`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub steps: usize,
    pub tau: f64,
    /// 0 means argmax.
    pub temperature: f64,
    pub k_schedule: KSchedule,
    pub seed: u64,
    /// Noise level at which two-stage refinement restarts.
    pub t_start: f64,
    /// Schedule whose survival curve drives the Euler commit probabilities.
    pub schedule: NoiseSchedule,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Euler,
            steps: 8,
            tau: 0.05,
            temperature: 0.0,
            k_schedule: KSchedule::Linear,
            seed: 0,
            t_start: 0.5,
            schedule: NoiseSchedule::default(),
        }
    }
}

impl DecodeConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: String| Err(DecodeError::Config(m));
        if !(0.0..1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1)", self.tau));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be >= 0", self.temperature));
        }
        if !(self.t_start > 0.0 && self.t_start <= 1.0) {
            return bad(format!("t_start {} outside (0, 1]", self.t_start));
        }
        let needs_steps = matches!(
            self.strategy,
            Strategy::Euler | Strategy::EulerRemask | Strategy::Confidence
        );
        if needs_steps && self.steps == 0 {
            return bad(format!("{} needs steps >= 1", self.strategy.name()));
        }
        self.schedule
            .validate()
            .or_else(|e| bad(e.to_string()))
    }
}

/// One denoiser evaluation and what it changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1 for the sequential pass of two-stage decoding, 2 for refinement,
    /// 0 otherwise.
    pub stage: u8,
    pub t: f64,
    /// Positions unmasked this step, in commit order.
    pub unmasked: Vec<usize>,
    /// Tokens written at `unmasked`.
    pub tokens: Vec<TokenId>,
    /// Probability of the predicted token at each position; 0 where the
    /// position was not predicted this step.
    pub confidence: Vec<f64>,
    /// Committed positions returned to MASK after this step.
    pub remasked: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub steps: Vec<StepRecord>,
    pub forward_passes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: TokenSequence,
    pub trace: DecodeTrace,
}

/// Number of positions committed at each confidence-decoding step.
pub fn k_schedule(n: usize, steps: usize, kind: KSchedule) -> Result<Vec<usize>, DecodeError> {
    if steps == 0 {
        return Err(DecodeError::Config("k schedule needs steps >= 1".into()));
    }
    let ks: Vec<usize> = match kind {
        KSchedule::Linear => (0..steps)
            .map(|s| n / steps + usize::from(s < n % steps))
            .collect(),
        KSchedule::Cosine => {
            let remaining = |s: usize| {
                if s == steps {
                    0
                } else {
                    let f = (std::f64::consts::FRAC_PI_2 * s as f64 / steps as f64).cos();
                    ((n as f64 * f).floor() as usize).min(n)
                }
            };
            (1..=steps).map(|s| remaining(s - 1) - remaining(s)).collect()
        }
    };
    let total: usize = ks.iter().sum();
    if total != n {
        return Err(DecodeError::Internal(format!("k schedule sums to {total}, expected {n}")));
    }
    Ok(ks)
}

/// A prediction at one position.
#[derive(Debug, Clone, Copy)]
struct Pick {
    token: TokenId,
    confidence: f64,
}

/// Chooses a content token from one logit row. `temperature == 0` takes the
/// argmax (lowest id on ties) and draws nothing from `rng`.
fn pick(row: &[f64], mask_id: TokenId, temperature: f64, rng: &mut Rng) -> Pick {
    let content = &row[..mask_id as usize];
    let max = content.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let weights: Vec<f64> = content.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let token = if temperature == 0.0 {
        content
            .iter()
            .enumerate()
            .fold(0, |best, (i, &x)| if x > content[best] { i } else { best })
    } else {
        let scaled: Vec<f64> = content.iter().map(|&x| ((x - max) / temperature).exp()).collect();
        let z: f64 = scaled.iter().sum();
        let u: f64 = rng.random::<f64>() * z;
        let mut acc = 0.0;
        let mut chosen = scaled.len() - 1;
        for (i, &w) in scaled.iter().enumerate() {
            acc += w;
            if u < acc {
                chosen = i;
                break;
            }
        }
        chosen
    };
    Pick {
        token: token as TokenId,
        confidence: weights[token] / total,
    }
}

struct Ctx<'a, D: ?Sized> {
    model: &'a D,
    e: &'a [f32],
    cfg: &'a DecodeConfig,
    n: usize,
    v: usize,
    mask: TokenId,
    rng: Rng,
    trace: DecodeTrace,
}

impl<D: Denoiser + ?Sized> Ctx<'_, D> {
    fn forward(&mut self, tokens: &[TokenId], t: f64) -> Result<Vec<f64>, DecodeError> {
        self.trace.forward_passes += 1;
        Ok(self.model.logits(tokens, t.max(T_MIN), self.e)?)
    }

    fn row<'b>(&self, logits: &'b [f64], i: usize) -> &'b [f64] {
        &logits[i * self.v..(i + 1) * self.v]
    }

    fn sequential(&mut self, stage: u8) -> Result<(Vec<TokenId>, Vec<f64>), DecodeError> {
        let n = self.n;
        let mut x = vec![self.mask; n];
        let mut conf = vec![0.0; n];
        for i in 0..n {
            // (n - i + 1) / n with 1-based i: the masked fraction before the step
            let t = (n - i) as f64 / n as f64;
            let logits = self.forward(&x, t)?;
            let p = pick(self.row(&logits, i), self.mask, self.cfg.temperature, &mut self.rng);
            x[i] = p.token;
            conf[i] = p.confidence;
            let mut c = vec![0.0; n];
            c[i] = p.confidence;
            self.trace.steps.push(StepRecord {
                stage,
                t,
                unmasked: vec![i],
                tokens: vec![p.token],
                confidence: c,
                remasked: Vec::new(),
            });
        }
        Ok((x, conf))
    }

    /// Reverse absorbing-state steps on the grid `t_hi (1 - k/steps)`.
    ///
    /// A masked position's prediction is kept with probability
    /// `(alpha(s) - alpha(t)) / (1 - alpha(t))`; the last step keeps all.
    /// With `remask`, the `floor(tau n)` least confident committed positions
    /// are re-masked after every step but the last.
    fn euler(
        &mut self,
        mut x: Vec<TokenId>,
        mut conf: Vec<f64>,
        t_hi: f64,
        steps: usize,
        remask: bool,
        stage: u8,
    ) -> Result<Vec<TokenId>, DecodeError> {
        let n = self.n;
        let drop = if remask { (self.cfg.tau * n as f64).floor() as usize } else { 0 };
        let schedule = self.cfg.schedule;
        let alpha = |t: f64| schedule.alpha(t.clamp(0.0, 1.0)).expect("clamped");
        for k in 0..steps {
            let t = t_hi * (1.0 - k as f64 / steps as f64);
            let s = t_hi * (1.0 - (k + 1) as f64 / steps as f64);
            let last = k + 1 == steps;
            let logits = self.forward(&x, t)?;
            let (a_t, a_s) = (alpha(t), alpha(s));
            let carry = if 1.0 - a_t > 0.0 { ((a_s - a_t) / (1.0 - a_t)).clamp(0.0, 1.0) } else { 1.0 };
            let mut rec = StepRecord {
                stage,
                t,
                unmasked: Vec::new(),
                tokens: Vec::new(),
                confidence: vec![0.0; n],
                remasked: Vec::new(),
            };
            for i in 0..n {
                if x[i] != self.mask {
                    continue;
                }
                let p = pick(self.row(&logits, i), self.mask, self.cfg.temperature, &mut self.rng);
                rec.confidence[i] = p.confidence;
                let u: f64 = self.rng.random();
                if last || u < carry {
                    x[i] = p.token;
                    conf[i] = p.confidence;
                    rec.unmasked.push(i);
                    rec.tokens.push(p.token);
                }
            }
            if !last && drop > 0 {
                let mut committed: Vec<usize> = (0..n).filter(|&i| x[i] != self.mask).collect();
                committed.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then(a.cmp(&b)));
                for &i in committed.iter().take(drop) {
                    x[i] = self.mask;
                    conf[i] = 0.0;
                    rec.remasked.push(i);
                }
            }
            self.trace.steps.push(rec);
        }
        Ok(x)
    }

    fn confidence(&mut self) -> Result<Vec<TokenId>, DecodeError> {
        let n = self.n;
        let ks = k_schedule(n, self.cfg.steps, self.cfg.k_schedule)?;
        let mut x = vec![self.mask; n];
        let mut remaining = n;
        for &k in &ks {
            let t = remaining as f64 / n as f64;
            let logits = self.forward(&x, t)?;
            let mut rec = StepRecord {
                stage: 0,
                t,
                unmasked: Vec::new(),
                tokens: Vec::new(),
                confidence: vec![0.0; n],
                remasked: Vec::new(),
            };
            let mut preds: Vec<(usize, Pick)> = Vec::with_capacity(remaining);
            for i in 0..n {
                if x[i] == self.mask {
                    let p = pick(self.row(&logits, i), self.mask, self.cfg.temperature, &mut self.rng);
                    rec.confidence[i] = p.confidence;
                    preds.push((i, p));
                }
            }
            // highest confidence first, lower position on ties
            preds.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence).then(a.0.cmp(&b.0)));
            for &(i, p) in preds.iter().take(k) {
                x[i] = p.token;
                rec.unmasked.push(i);
                rec.tokens.push(p.token);
            }
            remaining -= k;
            self.trace.steps.push(rec);
        }
        Ok(x)
    }

    fn two_stage(&mut self) -> Result<Vec<TokenId>, DecodeError> {
        let (mut x, mut conf) = self.sequential(1)?;
        if self.cfg.steps == 0 {
            return Ok(x);
        }
        // Re-noise the hypothesis to t_start: its least confident positions
        // go back to MASK before refinement.
        let reopen = ((self.cfg.t_start * self.n as f64).round() as usize).min(self.n);
        let mut order: Vec<usize> = (0..self.n).collect();
        order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then(a.cmp(&b)));
        for &i in order.iter().take(reopen) {
            x[i] = self.mask;
            conf[i] = 0.0;
        }
        if let Some(last) = self.trace.steps.last_mut() {
            last.remasked = order[..reopen].to_vec();
        }
        self.euler(x, conf, self.cfg.t_start, self.cfg.steps, true, 2)
    }
}

/// Decodes one embedding with the strategy named in `cfg`.
pub fn decode<D: Denoiser + ?Sized>(model: &D, e: &[f32], cfg: &DecodeConfig) -> Result<DecodeOutput, DecodeError> {
    cfg.validate()?;
    if e.len() != model.embed_dim() {
        return Err(DecodeError::Dimension {
            want: model.embed_dim(),
            got: e.len(),
        });
    }
    let vocab = model.vocab();
    let mut ctx = Ctx {
        model,
        e,
        cfg,
        n: model.seq_len(),
        v: vocab.vocab_size,
        mask: vocab.mask_id(),
        // One stream for every strategy, so reductions between them hold per seed.
        rng: rng::stream(cfg.seed, &[TAG_DECODE]),
        trace: DecodeTrace::default(),
    };
    let n = ctx.n;
    let x = match cfg.strategy {
        Strategy::Sequential => ctx.sequential(0)?.0,
        Strategy::Euler => ctx.euler(vec![ctx.mask; n], vec![0.0; n], 1.0, cfg.steps, false, 0)?,
        Strategy::EulerRemask => ctx.euler(vec![ctx.mask; n], vec![0.0; n], 1.0, cfg.steps, true, 0)?,
        Strategy::Confidence => ctx.confidence()?,
        Strategy::TwoStage => ctx.two_stage()?,
    };
    if x.contains(&ctx.mask) {
        return Err(DecodeError::Internal("decoded sequence still contains MASK".into()));
    }
    Ok(DecodeOutput {
        tokens: TokenSequence(x),
        trace: ctx.trace,
    })
}

/// Forward passes a strategy spends on a length-`n` sequence.
pub fn expected_forward_passes(strategy: Strategy, n: usize, steps: usize) -> usize {
    match strategy {
        Strategy::Sequential => n,
        Strategy::Euler | Strategy::EulerRemask | Strategy::Confidence => steps,
        Strategy::TwoStage => n + steps,
    }
}
