use std::collections::HashMap;

use maskinv_core::corpus::{TokenId, TokenSequence};

use crate::EvalError;

fn same_len(pred: &TokenSequence, gold: &TokenSequence) -> Result<(), EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::Length {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    Ok(())
}

/// Fraction of positions where `pred` matches `gold`.
pub fn token_accuracy(pred: &TokenSequence, gold: &TokenSequence) -> Result<f64, EvalError> {
    same_len(pred, gold)?;
    if gold.is_empty() {
        return Ok(1.0);
    }
    let hits = pred.tokens().iter().zip(gold.tokens()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gold.len() as f64)
}

pub fn exact_match(pred: &TokenSequence, gold: &TokenSequence) -> bool {
    pred == gold
}

pub const BLEU_ORDER: usize = 4;

/// Clipped n-gram matches and totals for one pair, per order `1..=4`.
fn ngram_stats(pred: &[TokenId], gold: &[TokenId]) -> ([u64; BLEU_ORDER], [u64; BLEU_ORDER]) {
    let mut matched = [0u64; BLEU_ORDER];
    let mut total = [0u64; BLEU_ORDER];
    for k in 1..=BLEU_ORDER {
        if pred.len() < k {
            continue;
        }
        let mut reference: HashMap<&[TokenId], u64> = HashMap::new();
        for g in gold.windows(k) {
            *reference.entry(g).or_default() += 1;
        }
        let mut candidate: HashMap<&[TokenId], u64> = HashMap::new();
        for g in pred.windows(k) {
            *candidate.entry(g).or_default() += 1;
        }
        total[k - 1] = (pred.len() + 1 - k) as u64;
        matched[k - 1] = candidate
            .iter()
            .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
            .sum();
    }
    (matched, total)
}

/// Corpus BLEU on token ids, scaled to `[0, 100]`.
///
/// Uniform weights over 1- to 4-grams, add-one smoothing on the 2- to
/// 4-gram precisions, standard brevity penalty. No unigram overlap, or an
/// empty prediction, scores 0.
pub fn corpus_bleu<'a, I>(pairs: I) -> f64
where
    I: IntoIterator<Item = (&'a TokenSequence, &'a TokenSequence)>,
{
    let mut matched = [0u64; BLEU_ORDER];
    let mut total = [0u64; BLEU_ORDER];
    let (mut pred_len, mut gold_len) = (0usize, 0usize);
    for (pred, gold) in pairs {
        let (m, t) = ngram_stats(pred.tokens(), gold.tokens());
        for k in 0..BLEU_ORDER {
            matched[k] += m[k];
            total[k] += t[k];
        }
        pred_len += pred.len();
        gold_len += gold.len();
    }
    if pred_len == 0 || matched[0] == 0 {
        return 0.0;
    }
    let mut log_p = (matched[0] as f64 / total[0] as f64).ln();
    for k in 1..BLEU_ORDER {
        log_p += ((matched[k] + 1) as f64 / (total[k] + 1) as f64).ln();
    }
    let bp = if pred_len >= gold_len {
        0.0
    } else {
        1.0 - gold_len as f64 / pred_len as f64
    };
    100.0 * (bp + log_p / BLEU_ORDER as f64).exp()
}

/// Sentence BLEU: corpus BLEU over the single pair.
pub fn bleu(pred: &TokenSequence, gold: &TokenSequence) -> f64 {
    corpus_bleu([(pred, gold)])
}
