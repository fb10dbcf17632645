//! Synthetic Markov corpus and its on-disk text format.
//!
//! Sequences are fixed length and drawn from a sparse seeded Markov chain of
//! order 1 or 2. The top vocabulary id is reserved as the MASK symbol and
//! never appears in a clean sequence.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::{self, TAG_CORPUS_SAMPLE, TAG_CORPUS_TABLE};

pub type TokenId = u32;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("config error: {0}")]
    Config(String),
    #[error("corpus format error at line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Vocabulary layout: content ids `[0, V-1)`, MASK = `V-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub vocab_size: usize,
}

impl VocabSpec {
    pub fn new(vocab_size: usize) -> Result<Self, CorpusError> {
        if vocab_size < 2 {
            return Err(CorpusError::Config(format!("vocab size {vocab_size} < 2")));
        }
        Ok(Self { vocab_size })
    }

    pub fn mask_id(&self) -> TokenId {
        (self.vocab_size - 1) as TokenId
    }

    pub fn content_size(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        (id as usize) < self.content_size()
    }
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self { vocab_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    /// Space-separated ids, the corpus line format.
    pub fn to_line(&self) -> String {
        let mut s = String::with_capacity(self.0.len() * 3);
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{t}").unwrap();
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        line.split_whitespace()
            .map(|w| w.parse::<TokenId>().map_err(|e| format!("bad token {w:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(TokenSequence)
    }
}

/// Sparse Markov chain over content tokens.
///
/// Contexts are the previous `order` symbols, with a begin-of-sequence symbol
/// padding the first positions. Each context row lists its successors and
/// their probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    vocab: VocabSpec,
    order: usize,
    seed: u64,
    rows: Vec<Vec<(TokenId, f64)>>,
}

impl MarkovSource {
    pub fn build(seed: u64, vocab: VocabSpec, order: usize) -> Result<Self, CorpusError> {
        if !(1..=2).contains(&order) {
            return Err(CorpusError::Config(format!("markov order {order} not in {{1, 2}}")));
        }
        if vocab.vocab_size < 8 {
            return Err(CorpusError::Config(format!(
                "vocab size {} < 8",
                vocab.vocab_size
            )));
        }
        let content = vocab.content_size();
        let max_succ = (vocab.vocab_size / 4).max(2);
        let contexts = (content + 1).pow(order as u32);
        let mut rng = rng::stream(seed, &[TAG_CORPUS_TABLE, order as u64, vocab.vocab_size as u64]);
        let mut pool: Vec<TokenId> = (0..content as TokenId).collect();
        let rows = (0..contexts)
            .map(|_| {
                let k = rng.random_range(2..=max_succ);
                for i in 0..k {
                    let j = rng.random_range(i..content);
                    pool.swap(i, j);
                }
                let mut row: Vec<(TokenId, f64)> = pool[..k]
                    .iter()
                    .map(|&t| {
                        // exponential draw; 1 - u lies in (0, 1]
                        let u: f64 = rng.random();
                        (t, -(1.0 - u).ln() + 1e-12)
                    })
                    .collect();
                row.sort_by_key(|&(t, _)| t);
                let total: f64 = row.iter().map(|&(_, w)| w).sum();
                row.iter_mut().for_each(|(_, w)| *w /= total);
                row
            })
            .collect();
        Ok(Self {
            vocab,
            order,
            seed,
            rows,
        })
    }

    pub fn vocab(&self) -> VocabSpec {
        self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Begin-of-sequence symbol used in context ids.
    pub fn bos(&self) -> usize {
        self.vocab.content_size()
    }

    /// Context id for the symbols preceding a position (most recent first).
    pub fn context_id(&self, recent: &[usize]) -> usize {
        let base = self.vocab.content_size() + 1;
        (0..self.order).fold(0, |acc, j| {
            let sym = recent.get(j).copied().unwrap_or(self.bos());
            acc * base + sym
        })
    }

    pub fn num_contexts(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, context: usize) -> &[(TokenId, f64)] {
        &self.rows[context]
    }

    fn draw(&self, context: usize, u: f64) -> TokenId {
        let row = &self.rows[context];
        let mut acc = 0.0;
        for &(t, p) in row {
            acc += p;
            if u < acc {
                return t;
            }
        }
        row.last().expect("rows have at least two successors").0
    }

    pub fn sample_sequence(&self, rng: &mut rng::Rng, n: usize) -> TokenSequence {
        let mut out: Vec<TokenId> = Vec::with_capacity(n);
        for i in 0..n {
            let recent: Vec<usize> = (1..=self.order)
                .map(|back| if i >= back { out[i - back] as usize } else { self.bos() })
                .collect();
            let ctx = self.context_id(&recent);
            out.push(self.draw(ctx, rng.random()));
        }
        TokenSequence(out)
    }
}

/// Draws `count` sequences of length `n`; sequence `i` uses its own substream.
pub fn sample_corpus(source: &MarkovSource, count: usize, n: usize, seed: u64) -> Result<Vec<TokenSequence>, CorpusError> {
    if count == 0 {
        return Err(CorpusError::Config("corpus count must be >= 1".into()));
    }
    Ok((0..count)
        .map(|i| {
            let mut r = rng::stream(seed, &[TAG_CORPUS_SAMPLE, i as u64]);
            source.sample_sequence(&mut r, n)
        })
        .collect())
}

/// Index where the validation split starts: the first 90% is training data.
pub fn split_point(count: usize) -> usize {
    count * 9 / 10
}

pub fn train_val_split(seqs: &[TokenSequence]) -> (&[TokenSequence], &[TokenSequence]) {
    seqs.split_at(split_point(seqs.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub order: usize,
}

impl CorpusHeader {
    pub fn to_line(&self) -> String {
        format!(
            "#vocab={} n={} seed={} order={}",
            self.vocab_size, self.seq_len, self.seed, self.order
        )
    }

    pub fn parse(line: &str) -> Result<Self, CorpusError> {
        let bad = |detail: String| CorpusError::Format { line: 1, detail };
        let body = line
            .strip_prefix('#')
            .ok_or_else(|| bad("missing '#' header".into()))?;
        let mut fields = [None; 4];
        for kv in body.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad field {kv:?}")))?;
            let slot = match k {
                "vocab" => 0,
                "n" => 1,
                "seed" => 2,
                "order" => 3,
                _ => return Err(bad(format!("unknown key {k:?}"))),
            };
            fields[slot] = Some(v.parse::<u64>().map_err(|e| bad(format!("{k}: {e}")))?);
        }
        let get = |i: usize, name: &str| fields[i].ok_or_else(|| bad(format!("missing {name}")));
        Ok(Self {
            vocab_size: get(0, "vocab")? as usize,
            seq_len: get(1, "n")? as usize,
            seed: get(2, "seed")?,
            order: get(3, "order")? as usize,
        })
    }
}

/// Serializes a corpus: header line then one sequence per line.
pub fn render_corpus(header: &CorpusHeader, seqs: &[TokenSequence]) -> String {
    let mut out = header.to_line();
    out.push('\n');
    for s in seqs {
        out.push_str(&s.to_line());
        out.push('\n');
    }
    out
}

pub fn parse_corpus(text: &str) -> Result<(CorpusHeader, Vec<TokenSequence>), CorpusError> {
    let mut lines = text.lines();
    let header = CorpusHeader::parse(lines.next().unwrap_or_default())?;
    let vocab = VocabSpec::new(header.vocab_size)?;
    let mut seqs = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let seq = TokenSequence::parse_line(line).map_err(|detail| CorpusError::Format { line: lineno, detail })?;
        if seq.len() != header.seq_len {
            return Err(CorpusError::Format {
                line: lineno,
                detail: format!("length {} != n={}", seq.len(), header.seq_len),
            });
        }
        if let Some(&t) = seq.tokens().iter().find(|&&t| !vocab.is_content(t)) {
            return Err(CorpusError::Format {
                line: lineno,
                detail: format!("token {t} is not a content id"),
            });
        }
        seqs.push(seq);
    }
    Ok((header, seqs))
}

pub fn write_corpus(path: &Path, header: &CorpusHeader, seqs: &[TokenSequence]) -> Result<String, CorpusError> {
    let text = render_corpus(header, seqs);
    std::fs::write(path, &text)?;
    Ok(sha256_hex(text.as_bytes()))
}

/// Reads a corpus file, returning its contents hash too.
pub fn read_corpus(path: &Path) -> Result<(CorpusHeader, Vec<TokenSequence>, String), CorpusError> {
    let bytes = std::fs::read(path)?;
    let hash = sha256_hex(&bytes);
    let text = String::from_utf8(bytes).map_err(|e| CorpusError::Format {
        line: 0,
        detail: e.to_string(),
    })?;
    let (h, s) = parse_corpus(&text)?;
    Ok((h, s, hash))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
