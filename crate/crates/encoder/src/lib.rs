//! The frozen target encoder `f`: a position-gated sum of token vectors,
//! normalized to unit length.
//!
//! A plain mean would be permutation invariant; the per-position gates make
//! order recoverable.

use maskinv_core::cache::{CacheManifest, EmbeddingCache};
use maskinv_core::corpus::{sha256_hex, TokenSequence, VocabSpec};
use maskinv_core::rng::{self, TAG_ENCODER};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("encoder config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Normalizes `values`; a zero vector is an error.
    pub fn new(values: &[f64]) -> Result<Self, EncoderError> {
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(EncoderError::Domain("cannot normalize a zero or non-finite vector".into()));
        }
        Ok(Self(values.iter().map(|x| (x / norm) as f32).collect()))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Cosine similarity clamped to `[-1, 1]`. For unit vectors this is the dot
/// product.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, EncoderError> {
    if a.len() != b.len() {
        return Err(EncoderError::Domain(format!(
            "cosine of vectors with dimensions {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EncoderError::Domain("cosine with a zero vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    seed: u64,
    vocab: VocabSpec,
    n: usize,
    d: usize,
    /// `[V x d]` standard normal rows.
    table: Vec<f64>,
    /// `[n x d]` gates in `[0.5, 1.5]`.
    gates: Vec<f64>,
}

impl ToyEncoder {
    pub fn new(seed: u64, vocab: VocabSpec, n: usize, d: usize) -> Result<Self, EncoderError> {
        if n == 0 || d == 0 {
            return Err(EncoderError::Config(format!("n={n} and d={d} must be positive")));
        }
        let v = vocab.vocab_size;
        let mut r = rng::stream(seed, &[TAG_ENCODER, v as u64, n as u64, d as u64]);
        let table = (0..v * d).map(|_| StandardNormal.sample(&mut r)).collect();
        let gates = (0..n * d).map(|_| r.random_range(0.5..=1.5)).collect();
        Ok(Self {
            seed,
            vocab,
            n,
            d,
            table,
            gates,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab(&self) -> VocabSpec {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// `normalize(sum_i gate_i * table[x_i])`.
    pub fn encode(&self, x: &TokenSequence) -> Result<EmbeddingVector, EncoderError> {
        if x.len() != self.n {
            return Err(EncoderError::Domain(format!("sequence length {} != {}", x.len(), self.n)));
        }
        let d = self.d;
        let mut acc = vec![0.0f64; d];
        for (i, &tok) in x.tokens().iter().enumerate() {
            if !self.vocab.is_content(tok) {
                return Err(EncoderError::Domain(format!("token {tok} at position {i} is not a content token")));
            }
            let row = &self.table[tok as usize * d..(tok as usize + 1) * d];
            let gate = &self.gates[i * d..(i + 1) * d];
            for j in 0..d {
                acc[j] += gate[j] * row[j];
            }
        }
        EmbeddingVector::new(&acc)
    }

    /// Hash of the frozen parameters; unchanged by anything downstream.
    pub fn fingerprint(&self) -> String {
        let bytes: Vec<u8> = self
            .table
            .iter()
            .chain(&self.gates)
            .flat_map(|x| x.to_le_bytes())
            .collect();
        sha256_hex(&bytes)
    }
}

/// Encodes every sequence into a cache keyed by the encoder seed and the
/// corpus hash.
pub fn build_cache(encoder: &ToyEncoder, seqs: &[TokenSequence], corpus_hash: &str) -> Result<EmbeddingCache, EncoderError> {
    let mut values = Vec::with_capacity(seqs.len() * encoder.d);
    for s in seqs {
        values.extend_from_slice(encoder.encode(s)?.values());
    }
    let manifest = CacheManifest {
        encoder_seed: encoder.seed,
        vocab_size: encoder.vocab.vocab_size,
        n: encoder.n,
        d: encoder.d,
        count: seqs.len(),
        corpus_hash: corpus_hash.to_string(),
    };
    EmbeddingCache::new(manifest, values).map_err(|e| EncoderError::Config(e.to_string()))
}

/// Most similar pair among the encodings of `seqs`: `(i, j, cosine)`.
/// Duplicate sequences are skipped.
pub fn closest_pair(encoder: &ToyEncoder, seqs: &[TokenSequence]) -> Result<Option<(usize, usize, f64)>, EncoderError> {
    let embs: Vec<EmbeddingVector> = seqs.iter().map(|s| encoder.encode(s)).collect::<Result<_, _>>()?;
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            if seqs[i] == seqs[j] {
                continue;
            }
            let c: f64 = embs[i]
                .values()
                .iter()
                .zip(embs[j].values())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            if best.is_none_or(|(_, _, m)| c > m) {
                best = Some((i, j, c));
            }
        }
    }
    Ok(best)
}

/// Mean and standard deviation of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Moments {
    pub fn of(xs: &[f64]) -> Self {
        let count = xs.len();
        let mean = xs.iter().sum::<f64>() / count as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / count as f64;
        Self {
            mean,
            std: var.sqrt(),
            count,
        }
    }
}

/// Cosine between encodings of `pairs` independently drawn sequences from
/// `seqs` (two distinct indices per pair).
pub fn random_pair_cosine(encoder: &ToyEncoder, seqs: &[TokenSequence], pairs: usize, seed: u64) -> Result<Moments, EncoderError> {
    if seqs.len() < 2 || pairs == 0 {
        return Err(EncoderError::Config("need at least two sequences and one pair".into()));
    }
    let mut r = rng::stream(seed, &[TAG_ENCODER, 0xC05]);
    let mut out = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let i = r.random_range(0..seqs.len());
        let mut j = r.random_range(0..seqs.len() - 1);
        if j >= i {
            j += 1;
        }
        let a = encoder.encode(&seqs[i])?;
        let b = encoder.encode(&seqs[j])?;
        out.push(cosine(a.values(), b.values())?);
    }
    Ok(Moments::of(&out))
}
