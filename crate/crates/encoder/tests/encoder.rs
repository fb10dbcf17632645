use maskinv_core::cache::EmbeddingCache;
use maskinv_core::corpus::{sample_corpus, MarkovSource, TokenSequence, VocabSpec};
use maskinv_encoder::{build_cache, closest_pair, cosine, random_pair_cosine, EmbeddingVector, EncoderError, ToyEncoder};
use rand::Rng;

fn desk() -> (ToyEncoder, Vec<TokenSequence>) {
    let vocab = VocabSpec::new(64).unwrap();
    let enc = ToyEncoder::new(0, vocab, 8, 32).unwrap();
    let src = MarkovSource::build(0, vocab, 2).unwrap();
    (enc, sample_corpus(&src, 10_000, 8, 0).unwrap())
}

#[test]
fn encodings_are_unit_norm_and_deterministic() {
    let (enc, seqs) = desk();
    let again = ToyEncoder::new(0, enc.vocab(), 8, 32).unwrap();
    assert_eq!(enc.fingerprint(), again.fingerprint());
    assert_ne!(enc.fingerprint(), ToyEncoder::new(1, enc.vocab(), 8, 32).unwrap().fingerprint());
    for s in &seqs[..200] {
        let e = enc.encode(s).unwrap();
        assert_eq!(e.dim(), 32);
        let norm: f64 = e.values().iter().map(|&x| x as f64 * x as f64).sum();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(e, again.encode(s).unwrap());
    }
}

#[test]
fn mask_and_wrong_length_are_rejected() {
    let (enc, _) = desk();
    let mut x = TokenSequence(vec![1; 8]);
    x.0[3] = 63;
    assert!(matches!(enc.encode(&x), Err(EncoderError::Domain(_))));
    assert!(enc.encode(&TokenSequence(vec![1; 7])).is_err());
}

#[test]
fn injective_on_ten_thousand_sequences() {
    let (enc, seqs) = desk();
    let (i, j, c) = closest_pair(&enc, &seqs).unwrap().unwrap();
    assert!(c <= 1.0 - 1e-6, "{:?} and {:?} collide at cosine {c}", seqs[i], seqs[j]);
}

#[test]
fn adjacent_swaps_change_the_encoding() {
    let (enc, _) = desk();
    let mut rng = maskinv_core::rng::stream(17, &[]);
    let mut sensitive = 0;
    let mut tried = 0;
    while tried < 100 {
        let x: Vec<u32> = (0..8).map(|_| rng.random_range(0..63)).collect();
        let i = rng.random_range(0..7);
        if x[i] == x[i + 1] {
            continue;
        }
        tried += 1;
        let mut y = x.clone();
        y.swap(i, i + 1);
        let a = enc.encode(&TokenSequence(x)).unwrap();
        let b = enc.encode(&TokenSequence(y)).unwrap();
        if cosine(a.values(), b.values()).unwrap() < 0.9999 {
            sensitive += 1;
        }
    }
    assert!(sensitive >= 99, "{sensitive}/100");
}

#[test]
fn cosine_domain() {
    assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
    assert_eq!(cosine(&[1.0, 0.0], &[-2.0, 0.0]).unwrap(), -1.0);
    assert!(EmbeddingVector::new(&[0.0; 4]).is_err());
}

#[test]
fn random_pair_baseline_is_stable() {
    let (enc, seqs) = desk();
    let m = random_pair_cosine(&enc, &seqs, 10_000, 0).unwrap();
    let other = random_pair_cosine(&enc, &seqs, 10_000, 1).unwrap();
    println!("random-pair cosine mean {:.4} std {:.4}", m.mean, m.std);
    // sampling error of the mean is std / 100
    assert!((m.mean - other.mean).abs() < 5.0 * m.std / 100.0 * 2f64.sqrt());
    assert!((m.mean - RANDOM_PAIR_MEAN).abs() < 0.02, "{}", m.mean);
}

/// Measured once for encoder seed 0 on the seed-0 order-2 desk corpus.
const RANDOM_PAIR_MEAN: f64 = 0.1411;

#[test]
fn cache_round_trip() {
    let (enc, seqs) = desk();
    let cache = build_cache(&enc, &seqs[..50], "abc").unwrap();
    assert_eq!(cache.row(7), enc.encode(&seqs[7]).unwrap().values());
    let dir = tempfile::tempdir().unwrap();
    let (blob, man) = (dir.path().join("e.bin"), dir.path().join("e.json"));
    cache.save(&blob, &man).unwrap();
    let back = EmbeddingCache::load(&blob, &man).unwrap();
    assert_eq!(back.values(), cache.values());
    assert!(back.check_corpus("abc", 50).is_ok());
    assert!(back.check_corpus("abd", 50).is_err());
}
