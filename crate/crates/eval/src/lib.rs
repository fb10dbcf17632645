//! Inversion metrics, baselines and reports.
//!
//! This crate is the only place that links both the decoders and the target
//! encoder; the encoder is only called on finished predictions.

pub mod metrics;

use maskinv_core::cache::CacheManifest;
use maskinv_core::corpus::{TokenSequence, VocabSpec};
use maskinv_core::decode::{decode, DecodeConfig, DecodeError};
use maskinv_core::model::{Denoiser, ModelConfig};
use maskinv_core::rng::{self, TAG_EVAL};
use maskinv_core::trainer::CheckpointManifest;
use maskinv_encoder::{cosine, EncoderError, ToyEncoder};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use metrics::{bleu, corpus_bleu, exact_match, token_accuracy};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction has length {pred}, gold has length {gold}")]
    Length { pred: usize, gold: usize },
    #[error("checkpoint and data disagree: {0}")]
    Mismatch(String),
    #[error("evaluation set: {0}")]
    Data(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Held-out sequences with their cached target embeddings (`[count x d]`).
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub gold: &'a [TokenSequence],
    pub embeddings: &'a [f32],
    pub d: usize,
}

impl<'a> EvalSet<'a> {
    pub fn new(gold: &'a [TokenSequence], embeddings: &'a [f32], d: usize) -> Result<Self, EvalError> {
        if gold.is_empty() || d == 0 || embeddings.len() != gold.len() * d {
            return Err(EvalError::Data(format!(
                "{} sequences with {} embedding values at d={d}",
                gold.len(),
                embeddings.len()
            )));
        }
        Ok(Self { gold, embeddings, d })
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &'a [f32] {
        &self.embeddings[i * self.d..(i + 1) * self.d]
    }

    pub fn head(&self, k: usize) -> EvalSet<'a> {
        let k = k.min(self.len());
        EvalSet {
            gold: &self.gold[..k],
            embeddings: &self.embeddings[..k * self.d],
            d: self.d,
        }
    }
}

/// Aggregate metrics of one decoding method over an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode: Option<DecodeConfig>,
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub mean_cosine: f64,
    pub bleu: f64,
    pub forward_passes: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineBaseline {
    pub mean: f64,
    pub std: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub build: String,
    pub samples: usize,
    /// Base decode seed; sample `i` decodes with a seed derived from it.
    pub seed: u64,
    pub strategies: Vec<MethodReport>,
    pub random: MethodReport,
    /// Same decoding configurations run by the unconditional model.
    pub unconditional: Vec<MethodReport>,
    pub unconditional_source: String,
    pub random_pair_cosine: Option<CosineBaseline>,
}

impl EvalReport {
    /// Strategy with the highest mean re-embedding cosine.
    pub fn best_by_cosine(&self) -> Option<&MethodReport> {
        self.strategies.iter().max_by(|a, b| a.mean_cosine.total_cmp(&b.mean_cosine))
    }

    pub fn best_by_accuracy(&self) -> Option<&MethodReport> {
        self.strategies.iter().max_by(|a, b| a.token_accuracy.total_cmp(&b.token_accuracy))
    }

    pub fn best_unconditional_accuracy(&self) -> Option<f64> {
        self.unconditional.iter().map(|m| m.token_accuracy).max_by(f64::total_cmp)
    }

    /// Plain-text table, one row per method.
    pub fn render_table(&self) -> String {
        let rows: Vec<&MethodReport> = self.strategies.iter().chain([&self.random]).chain(&self.unconditional).collect();
        let w = rows.iter().map(|m| m.name.len()).max().unwrap_or(0).max(6);
        let mut out = format!(
            "{:<w$} {:>9} {:>9} {:>8} {:>7} {:>6}\n",
            "method", "token_acc", "exact", "cosine", "bleu", "nfe"
        );
        let row = |m: &MethodReport| {
            format!(
                "{:<w$} {:>8.2}% {:>8.2}% {:>8.4} {:>7.2} {:>6.1}\n",
                m.name,
                100.0 * m.token_accuracy,
                100.0 * m.exact_match,
                m.mean_cosine,
                m.bleu,
                m.forward_passes
            )
        };
        for m in rows {
            out.push_str(&row(m));
        }
        if let Some(b) = &self.random_pair_cosine {
            out.push_str(&format!("random-pair cosine: {:.4} (std {:.4}, {} pairs)\n", b.mean, b.std, b.pairs));
        }
        out.push_str(&format!("samples: {}  seed: {}\n", self.samples, self.seed));
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("method,token_acc,exact_match,cosine,bleu,forward_passes\n");
        for m in self.strategies.iter().chain([&self.random]).chain(&self.unconditional) {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                m.name, m.token_accuracy, m.exact_match, m.mean_cosine, m.bleu, m.forward_passes
            ));
        }
        out
    }
}

/// Metrics of `preds` against the evaluation set. Predictions are
/// re-embedded here, after decoding has finished.
pub fn score(
    name: &str,
    decode: Option<DecodeConfig>,
    preds: &[TokenSequence],
    set: &EvalSet<'_>,
    encoder: &ToyEncoder,
    forward_passes: f64,
) -> Result<MethodReport, EvalError> {
    if preds.len() != set.len() {
        return Err(EvalError::Data(format!("{} predictions for {} sequences", preds.len(), set.len())));
    }
    let (mut acc, mut exact, mut cos) = (0.0, 0usize, 0.0);
    for (i, (p, g)) in preds.iter().zip(set.gold).enumerate() {
        acc += token_accuracy(p, g)?;
        exact += usize::from(exact_match(p, g));
        cos += cosine(encoder.encode(p)?.values(), set.embedding(i))?;
    }
    let count = set.len() as f64;
    Ok(MethodReport {
        name: name.to_string(),
        decode,
        token_accuracy: acc / count,
        exact_match: exact as f64 / count,
        mean_cosine: cos / count,
        bleu: corpus_bleu(preds.iter().zip(set.gold)),
        forward_passes,
    })
}

/// Decodes every sequence of the set; sample `i` uses a seed derived from
/// `(cfg.seed, i)`. Returns predictions and the mean forward-pass count.
pub fn decode_set<D: Denoiser + ?Sized>(
    model: &D,
    set: &EvalSet<'_>,
    cfg: &DecodeConfig,
) -> Result<(Vec<TokenSequence>, f64), EvalError> {
    let mut preds = Vec::with_capacity(set.len());
    let mut passes = 0usize;
    for i in 0..set.len() {
        let c = DecodeConfig {
            seed: rng::derive_seed(cfg.seed, &[TAG_EVAL, i as u64]),
            ..cfg.clone()
        };
        let out = decode(model, set.embedding(i), &c)?;
        passes += out.trace.forward_passes;
        preds.push(out.tokens);
    }
    Ok((preds, passes as f64 / set.len() as f64))
}

/// Uniform content tokens, one draw per position.
pub fn random_predictions(vocab: VocabSpec, n: usize, count: usize, seed: u64) -> Vec<TokenSequence> {
    let mut r = rng::stream(seed, &[TAG_EVAL, 0xBA5E]);
    let c = vocab.content_size() as u32;
    (0..count)
        .map(|_| TokenSequence((0..n).map(|_| r.random_range(0..c)).collect()))
        .collect()
}

pub fn method_name(cfg: &DecodeConfig) -> String {
    use maskinv_core::decode::Strategy;
    match cfg.strategy {
        Strategy::Sequential => cfg.strategy.name().to_string(),
        Strategy::EulerRemask => format!("{}(steps={},tau={})", cfg.strategy.name(), cfg.steps, cfg.tau),
        _ => format!("{}(steps={})", cfg.strategy.name(), cfg.steps),
    }
}

/// Everything `eval_inversion` needs besides the models.
#[derive(Debug, Clone)]
pub struct EvalPlan {
    pub configs: Vec<DecodeConfig>,
    /// Base seed for decoding and the random baseline.
    pub seed: u64,
    pub unconditional_source: String,
    pub random_pair_cosine: Option<CosineBaseline>,
}

/// Decodes the set with every configuration for both models, then scores
/// everything against the gold sequences.
pub fn eval_inversion<C, U>(
    model: &C,
    unconditional: &U,
    encoder: &ToyEncoder,
    set: &EvalSet<'_>,
    plan: &EvalPlan,
) -> Result<EvalReport, EvalError>
where
    C: Denoiser + ?Sized,
    U: Denoiser + ?Sized,
{
    if model.embed_dim() != set.d || encoder.dim() != set.d {
        return Err(EvalError::Mismatch(format!(
            "model expects d={}, encoder produces d={}, cache holds d={}",
            model.embed_dim(),
            encoder.dim(),
            set.d
        )));
    }
    let mut decoded = Vec::new();
    for cfg in &plan.configs {
        let cfg = DecodeConfig {
            seed: plan.seed,
            ..cfg.clone()
        };
        let (preds, fp) = decode_set(model, set, &cfg)?;
        let (upreds, ufp) = decode_set(unconditional, set, &cfg)?;
        decoded.push((cfg, preds, fp, upreds, ufp));
    }

    let mut strategies = Vec::new();
    let mut uncond = Vec::new();
    for (cfg, preds, fp, upreds, ufp) in decoded {
        let name = method_name(&cfg);
        strategies.push(score(&name, Some(cfg.clone()), &preds, set, encoder, fp)?);
        uncond.push(score(&format!("unconditional {name}"), Some(cfg), &upreds, set, encoder, ufp)?);
    }
    let n = set.gold[0].len();
    let random = random_predictions(model.vocab(), n, set.len(), plan.seed);
    Ok(EvalReport {
        build: maskinv_core::trainer::BUILD_ID.to_string(),
        samples: set.len(),
        seed: plan.seed,
        strategies,
        random: score("random tokens", None, &random, set, encoder, 0.0)?,
        unconditional: uncond,
        unconditional_source: plan.unconditional_source.clone(),
        random_pair_cosine: plan.random_pair_cosine,
    })
}

/// Refuses a checkpoint whose recorded data identity or shape disagrees with
/// the embedding cache.
pub fn check_compatible(ckpt: &CheckpointManifest, cache: &CacheManifest) -> Result<(), EvalError> {
    let m: &ModelConfig = &ckpt.model;
    let mut problems = Vec::new();
    if ckpt.encoder_seed != cache.encoder_seed {
        problems.push(format!("encoder seed {} vs cache {}", ckpt.encoder_seed, cache.encoder_seed));
    }
    if ckpt.corpus_hash != cache.corpus_hash {
        problems.push(format!("corpus hash {} vs cache {}", ckpt.corpus_hash, cache.corpus_hash));
    }
    if m.embed_dim != cache.d {
        problems.push(format!("embedding dimension {} vs cache {}", m.embed_dim, cache.d));
    }
    if m.vocab_size != cache.vocab_size || m.seq_len != cache.n {
        problems.push(format!(
            "V={} n={} vs cache V={} n={}",
            m.vocab_size, m.seq_len, cache.vocab_size, cache.n
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(EvalError::Mismatch(problems.join("; ")))
    }
}
