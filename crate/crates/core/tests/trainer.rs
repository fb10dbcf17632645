use maskinv_core::corpus::{sample_corpus, MarkovSource, TokenSequence, VocabSpec};
use maskinv_core::diffusion::NoiseSchedule;
use maskinv_core::model::{DenoiserParams, ModelConfig, ParamKind};
use maskinv_core::numkit::Tensor;
use maskinv_core::rng::stream;
use maskinv_core::trainer::*;
use rand::Rng;

fn scalar(x: f64) -> Tensor<f64> {
    Tensor::new(vec![1], vec![x]).unwrap()
}

fn no_decay(lr: f64, warmup: usize) -> AdamConfig {
    AdamConfig {
        lr,
        weight_decay: 0.0,
        warmup_steps: warmup,
        ..AdamConfig::default()
    }
}

#[test]
fn zero_gradients_leave_params_unchanged() {
    let mut w = vec![scalar(0.7), Tensor::from_fn(&[2, 3], |i| i as f64)];
    let before = w.clone();
    let grads = vec![scalar(0.0), Tensor::zeros(&[2, 3])];
    let mut state = AdamState::zeros_like(&w);
    for step in 1..=10 {
        adamw_update(&mut w, &grads, &mut state, &["a", "b"], &[true, true], step, &no_decay(0.1, 0)).unwrap();
    }
    assert_eq!(w, before);
}

#[test]
fn first_step_moves_by_lr_against_gradient_sign() {
    for g in [-3.0, 0.25, 40.0] {
        let mut w = vec![scalar(1.0)];
        let mut state = AdamState::zeros_like(&w);
        let cfg = no_decay(1e-3, 4);
        adamw_update(&mut w, &[scalar(g)], &mut state, &["w"], &[false], 1, &cfg).unwrap();
        // bias-corrected first step: m/sqrt(v) = sign(g), warmup factor 1/4
        let want = 1.0 - f64::signum(g) * 1e-3 * 0.25;
        assert!((w[0].data()[0] - want).abs() < 1e-9, "g={g}");
    }
}

#[test]
fn warmup_factor_is_exact() {
    let cfg = AdamConfig {
        lr: 3e-4,
        warmup_steps: 200,
        ..AdamConfig::default()
    };
    for s in [1, 50, 199, 200, 201, 5000] {
        assert_eq!(cfg.effective_lr(s), 3e-4 * (s as f64 / 200.0).min(1.0));
    }
    assert_eq!(no_decay(0.5, 0).effective_lr(1), 0.5);
}

#[test]
fn adam_converges_on_quadratic_bowl() {
    // f(w) = sum_i a_i (w_i - c_i)^2, optimum at c
    let a = [1.0, 4.0, 0.5];
    let c = [0.3, -1.2, 2.0];
    let mut w = vec![Tensor::new(vec![3], vec![0.0; 3]).unwrap()];
    let mut state = AdamState::zeros_like(&w);
    let cfg = no_decay(0.1, 0);
    let f = |w: &[f64]| -> f64 { (0..3).map(|i| a[i] * (w[i] - c[i]).powi(2)).sum() };
    for step in 1..=100usize {
        let g: Vec<f64> = (0..3).map(|i| 2.0 * a[i] * (w[0].data()[i] - c[i])).collect();
        let lr = 0.5 * 0.97f64.powi(step as i32);
        let cfg = AdamConfig { lr, ..cfg };
        adamw_update(&mut w, &[Tensor::new(vec![3], g).unwrap()], &mut state, &["w"], &[false], step, &cfg).unwrap();
    }
    assert!(f(w[0].data()) < 1e-4, "f = {}", f(w[0].data()));
}

#[test]
fn decoupled_decay_shrinks_only_decaying_tensors() {
    let mut w = vec![scalar(2.0), scalar(2.0)];
    let mut state = AdamState::zeros_like(&w);
    let cfg = AdamConfig {
        lr: 0.1,
        weight_decay: 0.5,
        warmup_steps: 0,
        ..AdamConfig::default()
    };
    let zeros = vec![scalar(0.0), scalar(0.0)];
    adamw_update(&mut w, &zeros, &mut state, &["m", "b"], &[true, false], 1, &cfg).unwrap();
    assert!((w[0].data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    assert_eq!(w[1].data()[0], 2.0);
}

#[test]
fn decay_exclusion_list_is_exact() {
    let params = DenoiserParams::<f32>::init(&ModelConfig::tiny(), 0).unwrap();
    for spec in params.specs() {
        let name = spec.name.as_str();
        let excluded = name.ends_with("_bias")
            || name.ends_with(".b1")
            || name.ends_with(".b2")
            || name.ends_with(".bq")
            || name.ends_with(".bk")
            || name.ends_with(".bv")
            || name.ends_with(".bo")
            || name.starts_with("final_norm")
            || name == "pos_embedding";
        assert_eq!(spec.kind.decays(), !excluded, "{name}");
        if excluded {
            assert!(matches!(
                spec.kind,
                ParamKind::Bias | ParamKind::NormScale | ParamKind::NormShift | ParamKind::Positional
            ));
        }
    }
}

#[test]
fn non_finite_gradient_aborts_with_name() {
    let mut w = vec![scalar(1.0), Tensor::zeros(&[3])];
    let before = w.clone();
    let mut state = AdamState::zeros_like(&w);
    let bad = Tensor::new(vec![3], vec![1.0, f64::INFINITY, -7.0]).unwrap();
    let err = adamw_update(&mut w, &[scalar(0.5), bad], &mut state, &["ok", "proj.w1"], &[true, true], 1, &no_decay(0.1, 0))
        .unwrap_err();
    match err {
        TrainError::NonFiniteGradient { name, max_abs } => {
            assert_eq!(name, "proj.w1");
            assert_eq!(max_abs, f64::INFINITY);
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(w, before);
}

#[test]
fn ema_closed_forms() {
    let p = vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()];
    let mut s = vec![Tensor::new(vec![2], vec![5.0, 3.0]).unwrap()];
    ema_update(&mut s, &p, 1.0);
    assert_eq!(s[0].data(), &[5.0, 3.0]);
    let s0 = s.clone();
    let (decay, k) = (0.9, 37);
    for _ in 0..k {
        ema_update(&mut s, &p, decay);
    }
    for i in 0..2 {
        let want = p[0].data()[i] + (s0[0].data()[i] - p[0].data()[i]) * decay.powi(k);
        assert!((s[0].data()[i] - want).abs() < 1e-12);
    }
    ema_update(&mut s, &p, 0.0);
    assert_eq!(s, p);
}

struct Toy {
    train: Vec<TokenSequence>,
    val: Vec<TokenSequence>,
    train_e: Vec<f32>,
    val_e: Vec<f32>,
}

fn toy(config: &ModelConfig) -> Toy {
    let src = MarkovSource::build(1, VocabSpec::new(config.vocab_size).unwrap(), 1).unwrap();
    let seqs = sample_corpus(&src, 600, config.seq_len, 2).unwrap();
    let d = config.embed_dim;
    let mut r = stream(3, &[]);
    let table: Vec<f32> = (0..config.vocab_size * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let emb: Vec<f32> = seqs
        .iter()
        .flat_map(|s| {
            let mut e = vec![0f32; d];
            for (i, &t) in s.tokens().iter().enumerate() {
                for j in 0..d {
                    e[j] += table[t as usize * d + j] * (1.0 + ((i + j) % 3) as f32 * 0.3);
                }
            }
            e
        })
        .collect();
    Toy {
        train: seqs[..500].to_vec(),
        val: seqs[500..].to_vec(),
        train_e: emb[..500 * d].to_vec(),
        val_e: emb[500 * d..].to_vec(),
    }
}

fn identity() -> DataIdentity {
    DataIdentity {
        corpus_hash: "abc".into(),
        encoder_seed: 4,
    }
}

fn smoke_config(steps: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        warmup_steps: 20,
        max_steps: steps,
        batch_size: 16,
        eval_every: 25,
        seed: 11,
        val_limit: 50,
        acc_samples: 50,
        ..TrainConfig::default()
    }
}

#[test]
fn smoke_run_reduces_loss() {
    let config = ModelConfig::tiny();
    let data = toy(&config);
    let d = config.embed_dim;
    let train_d = Dataset::new(&data.train, &data.train_e, d).unwrap();
    let val_d = Dataset::new(&data.val, &data.val_e, d).unwrap();
    let cfg = smoke_config(200);
    let mut params = DenoiserParams::<f32>::init(&config, cfg.seed).unwrap();
    let mut state = AdamState::zeros_like(params.tensors());
    let losses: Vec<f64> = (1..=200)
        .map(|s| train_step(&mut params, &mut state, &cfg, &train_d, s).unwrap())
        .collect();
    let first: f64 = losses[..50].iter().sum::<f64>() / 50.0;
    let last: f64 = losses[150..].iter().sum::<f64>() / 50.0;
    assert!(last < first, "first {first} last {last}");

    let dir = tempfile::tempdir().unwrap();
    let out = train(&config, &cfg, &train_d, &val_d, &identity(), Some(dir.path())).unwrap();
    assert_eq!(out.metrics.len(), 8);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,train_loss,val_loss,token_acc\n"));
    assert_eq!(csv.lines().count(), 9);
    let best = load_checkpoint(&dir.path().join("best"), Some(&config)).unwrap();
    assert_eq!(best.manifest.step, out.best_step);
    assert_eq!(best.ema, out.best);
    assert_eq!(best.manifest.corpus_hash, "abc");
    // validation loss is a pure function of (weights, data)
    let again = validation_loss(&best.ema, &val_d.head(50), &cfg.schedule).unwrap();
    assert_eq!(again, out.best_val_loss);
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let config = ModelConfig::tiny();
    let data = toy(&config);
    let d = config.embed_dim;
    let train_d = Dataset::new(&data.train, &data.train_e, d).unwrap();
    let val_d = Dataset::new(&data.val, &data.val_e, d).unwrap();
    let cfg = smoke_config(50);
    let a = train(&config, &cfg, &train_d, &val_d, &identity(), None).unwrap();
    let b = train(&config, &cfg, &train_d, &val_d, &identity(), None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.last, b.last);
    let other = TrainConfig { seed: 12, ..cfg };
    let c = train(&config, &other, &train_d, &val_d, &identity(), None).unwrap();
    assert_ne!(a.metrics, c.metrics);
}

#[test]
fn fixed_ratio_runs_train() {
    let config = ModelConfig::tiny();
    let data = toy(&config);
    let d = config.embed_dim;
    let train_d = Dataset::new(&data.train, &data.train_e, d).unwrap();
    let val_d = Dataset::new(&data.val, &data.val_e, d).unwrap();
    let cfg = TrainConfig {
        schedule: NoiseSchedule::FixedRatio { ratio: 0.4 },
        ..smoke_config(30)
    };
    let out = train(&config, &cfg, &train_d, &val_d, &identity(), None).unwrap();
    assert!(out.best_val_loss.is_finite());
    assert!((0.0..=1.0).contains(&out.final_train_acc));
}

fn checkpoint(config: &ModelConfig) -> Checkpoint {
    let raw = DenoiserParams::<f32>::init(config, 5).unwrap();
    let mut ema = raw.clone();
    ema.tensors_mut()[0].data_mut()[0] = 0.125;
    let mut adam = AdamState::zeros_like(raw.tensors());
    adam.m[3].data_mut()[1] = -1.5;
    adam.v[3].data_mut()[1] = 2.25;
    Checkpoint {
        manifest: CheckpointManifest {
            format_version: FORMAT_VERSION,
            build: BUILD_ID.into(),
            model: config.clone(),
            train: TrainConfig::default(),
            step: 7,
            val_loss: 1.5,
            rng: RngState { seed: 1, next_step: 8 },
            corpus_hash: "abc".into(),
            encoder_seed: 4,
            blob_sha256: String::new(),
        },
        raw,
        ema,
        adam,
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let config = ModelConfig::tiny();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(&config);
    save_checkpoint(&dir.path().join("a"), &ckpt).unwrap();
    let loaded = load_checkpoint(&dir.path().join("a"), Some(&config)).unwrap();
    assert_eq!(loaded.raw, ckpt.raw);
    assert_eq!(loaded.ema, ckpt.ema);
    assert_eq!(loaded.adam, ckpt.adam);
    save_checkpoint(&dir.path().join("b"), &loaded).unwrap();
    for f in [MANIFEST_FILE, BLOB_FILE] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn truncated_blob_is_rejected() {
    let config = ModelConfig::tiny();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &checkpoint(&config)).unwrap();
    let blob = dir.path().join(BLOB_FILE);
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 10]).unwrap();
    let err = load_checkpoint(dir.path(), None).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");
}

#[test]
fn vocab_mismatch_names_token_embedding() {
    let config = ModelConfig::tiny();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &checkpoint(&config)).unwrap();
    let other = ModelConfig {
        vocab_size: 20,
        ..config
    };
    let err = load_checkpoint(dir.path(), Some(&other)).unwrap_err();
    assert!(err.to_string().contains("token_embedding"), "{err}");
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = TrainConfig {
        ema_decay: 1.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = TrainConfig {
        warmup_steps: 10,
        max_steps: 5,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}
