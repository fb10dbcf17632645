//! Sampling statistics checked against closed-form moments of the generating
//! distributions.

use maskinv_core::corpus::{render_corpus, sample_corpus, CorpusHeader, MarkovSource, TokenSequence, VocabSpec};
use maskinv_core::diffusion::{forward_mask, sample_timestep, NoiseSchedule, T_MIN};
use maskinv_core::rng::stream;

fn vocab(v: usize) -> VocabSpec {
    VocabSpec::new(v).unwrap()
}

#[test]
fn entropy_rate_order1_v8_seed1() {
    let src = MarkovSource::build(1, vocab(8), 1).unwrap();
    let c = 7;
    // Cesaro-averaged occupancy starting from BOS; valid even for a
    // reducible or periodic chain.
    let mut dist = vec![0.0; c];
    for &(t, p) in src.row(src.context_id(&[])) {
        dist[t as usize] += p;
    }
    let mut occupancy = vec![0.0; c];
    let steps = 5000;
    for _ in 0..steps {
        let mut next = vec![0.0; c];
        for (i, &m) in dist.iter().enumerate() {
            occupancy[i] += m / steps as f64;
            for &(t, p) in src.row(src.context_id(&[i])) {
                next[t as usize] += m * p;
            }
        }
        dist = next;
    }
    let rate: f64 = (0..c)
        .map(|i| {
            let h: f64 = src.row(src.context_id(&[i])).iter().map(|&(_, p)| -p * p.ln()).sum();
            occupancy[i] * h
        })
        .sum();
    assert!(rate > 0.0 && rate < 8f64.ln(), "entropy rate {rate}");
}

#[test]
fn bigram_frequencies_within_three_sigma() {
    let src = MarkovSource::build(5, vocab(16), 1).unwrap();
    let seqs = sample_corpus(&src, 12_500, 9, 11).unwrap();
    let c = 15;
    let mut counts = vec![vec![0u64; c]; c];
    for s in &seqs {
        for w in s.tokens().windows(2) {
            counts[w[0] as usize][w[1] as usize] += 1;
        }
    }
    let total: u64 = counts.iter().flatten().sum();
    assert_eq!(total, 100_000);
    for (ctx, row) in counts.iter().enumerate() {
        let n_ctx: u64 = row.iter().sum();
        if n_ctx == 0 {
            continue;
        }
        let table = src.row(src.context_id(&[ctx]));
        for (tok, &k) in row.iter().enumerate() {
            let p = table.iter().find(|&&(t, _)| t as usize == tok).map_or(0.0, |&(_, p)| p);
            if p == 0.0 {
                assert_eq!(k, 0, "transition {ctx}->{tok} is not in the table");
                continue;
            }
            let n = n_ctx as f64;
            let sigma = (p * (1.0 - p) / n).sqrt();
            let f = k as f64 / n;
            assert!((f - p).abs() <= 3.0 * sigma, "{ctx}->{tok}: {f} vs {p} (sigma {sigma})");
        }
    }
}

#[test]
fn corpus_is_deterministic_and_seed_sensitive() {
    let v = vocab(64);
    let a = MarkovSource::build(3, v, 2).unwrap();
    assert_eq!(a, MarkovSource::build(3, v, 2).unwrap());
    let header = CorpusHeader {
        vocab_size: 64,
        seq_len: 8,
        seed: 9,
        order: 2,
    };
    let one = render_corpus(&header, &sample_corpus(&a, 1000, 8, 9).unwrap());
    let two = render_corpus(&header, &sample_corpus(&a, 1000, 8, 9).unwrap());
    assert_eq!(one, two);

    let seqs = sample_corpus(&a, 1000, 8, 9).unwrap();
    assert_eq!(seqs.len(), 1000);
    assert!(seqs.iter().all(|s| s.len() == 8 && s.tokens().iter().all(|&t| t < 63)));

    let dup_rate = |seqs: &[TokenSequence]| {
        let set: std::collections::HashSet<_> = seqs.iter().collect();
        1.0 - set.len() as f64 / seqs.len() as f64
    };
    let small = MarkovSource::build(3, vocab(16), 1).unwrap();
    let x = sample_corpus(&small, 2000, 6, 1).unwrap();
    let y = sample_corpus(&small, 2000, 6, 2).unwrap();
    assert_ne!(x, y);
    assert_ne!(dup_rate(&x), dup_rate(&y));
}

#[test]
fn mask_rate_matches_schedule() {
    let schedule = NoiseSchedule::LogLinear { lambda: 5.0 };
    let v = vocab(64);
    let x0 = TokenSequence(vec![0; 1000]);
    for t in [0.1, 0.3, 0.5, 0.8, 1.0] {
        let mut rng = stream(100, &[(t * 10.0) as u64]);
        let masked: usize = (0..100)
            .map(|_| forward_mask(&x0, t, &schedule, v, &mut rng).unwrap().num_masked())
            .sum();
        let p = 1.0 - (-5.0 * t).exp();
        let sigma = (p * (1.0 - p) / 1e5).sqrt();
        let rate = masked as f64 / 1e5;
        assert!((rate - p).abs() <= 3.0 * sigma, "t={t}: {rate} vs {p}");
    }
    assert!((1.0 - (-2.5f64).exp() - 0.91792).abs() < 1e-5);
}

#[test]
fn timestep_moments() {
    let mut rng = stream(7, &[]);
    let n = 100_000;
    let draws: Vec<f64> = (0..n).map(|_| sample_timestep(&mut rng, T_MIN).unwrap()).collect();
    assert!(draws.iter().all(|&t| t >= T_MIN));
    let mean = draws.iter().sum::<f64>() / n as f64;
    let width = 1.0 - T_MIN;
    let sigma = (width * width / 12.0 / n as f64).sqrt();
    assert!((mean - (1.0 + T_MIN) / 2.0).abs() <= 3.0 * sigma);

    let mut again = stream(7, &[]);
    let repeat: Vec<f64> = (0..100).map(|_| sample_timestep(&mut again, T_MIN).unwrap()).collect();
    assert_eq!(&draws[..100], &repeat[..]);
}
