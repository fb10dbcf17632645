//! Analytic tape gradients against central finite differences (64-bit).

use maskinv_core::diffusion::batch_loss_on_tape;
use maskinv_core::model::{forward_on_tape, BatchInput, DenoiserParams, ModelConfig};
use maskinv_core::numkit::{NumError, Tape, Tensor, Var, LN_EPS};
use maskinv_core::rng::stream;
use rand::Rng;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
// Denominator floor for relative error; gradients below this are compared
// absolutely at the same tolerance scale.
const FLOOR: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, &[999]);
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

/// Checks d loss / d input for every coordinate of every input.
fn check_op(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumError>) {
    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).unwrap().data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.grad(out, &vars).unwrap();
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(grads[k].data()[i], fd));
        }
    }
    assert!(worst < REL_TOL, "max relative error {worst:e}");
}

/// Reduces a tensor to a scalar with fixed, non-uniform weights so that
/// every output coordinate matters.
fn reduce(tape: &mut Tape<f64>, x: Var) -> Result<Var, NumError> {
    let n = tape.value(x)?.numel();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.731).sin() + 0.1).collect();
    tape.weighted_sum(x, &w)
}

#[test]
fn matmul_gradient() {
    let a = random(&[5, 7], 1);
    let b = random(&[7, 3], 2);
    // d sum(AB) / dA = ones . B^T
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a.clone()).unwrap(), tape.leaf(b.clone()).unwrap());
    let c = tape.matmul(va, vb).unwrap();
    let s = tape.sum(c).unwrap();
    let g = tape.grad(s, &[va]).unwrap().remove(0);
    for i in 0..5 {
        for k in 0..7 {
            let want: f64 = (0..3).map(|j| b.data()[k * 3 + j]).sum();
            assert!((g.data()[i * 7 + k] - want).abs() < 1e-12);
        }
    }
    check_op(&[a, b], |t, v| {
        let c = t.matmul(v[0], v[1])?;
        reduce(t, c)
    });
}

#[test]
fn matmul_nt_gradient() {
    check_op(&[random(&[4, 6], 3), random(&[5, 6], 4)], |t, v| {
        let c = t.matmul_nt(v[0], v[1])?;
        reduce(t, c)
    });
}

#[test]
fn softmax_gradient() {
    check_op(&[random(&[8], 5)], |t, v| {
        let p = t.softmax(v[0])?;
        reduce(t, p)
    });
}

#[test]
fn layer_norm_gradient() {
    check_op(&[random(&[3, 16], 6)], |t, v| {
        let (y, _, _) = t.layer_norm(v[0], LN_EPS)?;
        reduce(t, y)
    });
}

#[test]
fn gelu_gradient_at_reference_points() {
    let x = Tensor::new(vec![4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap();
    check_op(&[x], |t, v| {
        let y = t.gelu(v[0])?;
        reduce(t, y)
    });
}

#[test]
fn adaln_apply_gradient() {
    // gamma/beta rows are per-group modulation; one group covers all 4 rows.
    check_op(&[random(&[4, 16], 7), random(&[1, 16], 8), random(&[1, 16], 9)], |t, v| {
        let (y, _, _) = t.layer_norm(v[0], LN_EPS)?;
        let m = t.modulate(y, v[1], v[2])?;
        reduce(t, m)
    });
}

#[test]
fn grouped_modulate_gradient() {
    check_op(&[random(&[6, 4], 10), random(&[3, 4], 11), random(&[3, 4], 12)], |t, v| {
        let m = t.modulate(v[0], v[1], v[2])?;
        reduce(t, m)
    });
}

#[test]
fn attention_gradient() {
    // two sequences of length 3, width 4, two heads
    check_op(&[random(&[6, 4], 13), random(&[6, 4], 14), random(&[6, 4], 15)], |t, v| {
        let o = t.attention(v[0], v[1], v[2], 3, 2)?;
        reduce(t, o)
    });
}

#[test]
fn gather_slice_bias_gradient() {
    check_op(&[random(&[5, 6], 16), random(&[3], 17)], |t, v| {
        let g = t.gather(v[0], &[4, 0, 4, 2])?;
        let s = t.slice_cols(g, 2, 3)?;
        let b = t.add_bias(s, v[1])?;
        let c = t.add_const(b, 0.5)?;
        let m = t.mul(c, c)?;
        let m = t.scale(m, -1.5)?;
        reduce(t, m)
    });
}

#[test]
fn cross_entropy_gradient() {
    check_op(&[random(&[4, 9], 18)], |t, v| {
        let ce = t.cross_entropy(v[0], &[1, 8, 0, 3], &[true, false, true, true])?;
        reduce(t, ce)
    });
}

#[test]
fn linear_and_tied_accumulation() {
    let w = random(&[3, 4], 19);
    let x = random(&[4, 1], 20);
    let mut tape = Tape::new();
    let (vw, vx) = (tape.leaf(w).unwrap(), tape.leaf(x.clone()).unwrap());
    let y = tape.matmul(vw, vx).unwrap();
    let s = tape.sum(y).unwrap();
    let once = tape.grad(s, &[vw]).unwrap().remove(0);
    for r in 0..3 {
        for c in 0..4 {
            assert!((once.data()[r * 4 + c] - x.data()[c]).abs() < 1e-15);
        }
    }
    // same leaf read twice
    let y2 = tape.matmul(vw, vx).unwrap();
    let both = tape.add(y, y2).unwrap();
    let s2 = tape.sum(both).unwrap();
    let twice = tape.grad(s2, &[vw]).unwrap().remove(0);
    for (a, b) in twice.data().iter().zip(once.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn foreign_var_is_missing_dependency() {
    let mut a = Tape::<f64>::new();
    let mut b = Tape::<f64>::new();
    let x = a.leaf(Tensor::scalar(1.0)).unwrap();
    let y = b.leaf(Tensor::scalar(2.0)).unwrap();
    let s = b.sum(y).unwrap();
    assert_eq!(b.grad(s, &[x]).unwrap_err(), NumError::MissingDependency);
    assert!(matches!(b.grad(y, &[y]), Ok(_)));
    let v = b.leaf(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(b.backward(v), Err(NumError::NotScalar { .. })));
}

#[test]
fn non_finite_results_are_errors() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::scalar(f64::MAX)).unwrap();
    assert_eq!(t.scale(x, 10.0).unwrap_err(), NumError::NonFinite { op: "scale" });
    assert!(t.leaf(Tensor::scalar(f64::NAN)).is_err());
}

struct Fixture {
    tokens: Vec<u32>,
    targets: Vec<u32>,
    flags: Vec<bool>,
    timesteps: Vec<f64>,
    embeddings: Vec<f32>,
}

fn tiny_fixture(cfg: &ModelConfig) -> Fixture {
    let mut rng = stream(77, &[]);
    let (b, n, v) = (2, cfg.seq_len, cfg.vocab_size as u32);
    let targets: Vec<u32> = (0..b * n).map(|_| rng.random_range(0..v - 1)).collect();
    let flags: Vec<bool> = (0..b * n).map(|i| i % 3 != 1).collect();
    let tokens = targets
        .iter()
        .zip(&flags)
        .map(|(&t, &f)| if f { v - 1 } else { t })
        .collect();
    Fixture {
        tokens,
        targets,
        flags,
        timesteps: vec![0.35, 0.8],
        embeddings: (0..b * cfg.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn loss_and_grads(params: &DenoiserParams<f64>, fx: &Fixture, want_grads: bool) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape).unwrap();
    let batch = BatchInput {
        tokens: &fx.tokens,
        timesteps: &fx.timesteps,
        embeddings: &fx.embeddings,
    };
    let logits = forward_on_tape(&mut tape, params, &vars, &batch).unwrap();
    let loss = batch_loss_on_tape(&mut tape, logits, &fx.targets, &fx.flags, &fx.timesteps).unwrap();
    let value = tape.value(loss).unwrap().data()[0];
    let grads = if want_grads {
        tape.grad(loss, &vars).unwrap()
    } else {
        Vec::new()
    };
    (value, grads)
}

#[test]
fn full_denoiser_gradient_tiny_config() {
    let cfg = ModelConfig::tiny();
    let mut params = DenoiserParams::<f64>::init(&cfg, 21).unwrap();
    // Move every block (AdaLN maps included) away from its init so that no
    // gradient path is trivially zero.
    let mut rng = stream(22, &[]);
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
    }
    let fx = tiny_fixture(&cfg);
    let (_, grads) = loss_and_grads(&params, &fx, true);
    let names: Vec<String> = params.specs().iter().map(|s| s.name.clone()).collect();
    let mut worst = (0.0f64, String::new());
    for (k, name) in names.iter().enumerate() {
        let numel = params.tensor(k).numel();
        let picks: Vec<usize> = if numel <= 32 {
            (0..numel).collect()
        } else {
            (0..32).map(|_| rng.random_range(0..numel)).collect()
        };
        for i in picks {
            let mut plus = params.clone();
            plus.tensor_mut(k).data_mut()[i] += STEP;
            let mut minus = params.clone();
            minus.tensor_mut(k).data_mut()[i] -= STEP;
            let fd = (loss_and_grads(&plus, &fx, false).0 - loss_and_grads(&minus, &fx, false).0) / (2.0 * STEP);
            let e = rel_err(grads[k].data()[i], fd);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}] analytic {} fd {fd}", grads[k].data()[i]));
            }
        }
    }
    assert!(worst.0 < REL_TOL, "max relative error {:e} at {}", worst.0, worst.1);
}
