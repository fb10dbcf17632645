//! The conditional denoiser.
//!
//! Tokens plus learned positions feed a bidirectional transformer. Each
//! block's norms are modulated by AdaLN: a timestep map and an embedding map
//! each emit `(gamma, beta)`, and the two are summed on top of an identity
//! base. The target embedding enters only through that modulation, after a
//! two-layer GELU projection into the hidden width. Logits reuse the token
//! embedding matrix.

mod config;
mod forward;
mod params;

pub use config::{AdaLnSites, ModelConfig};
pub use forward::{forward_batch, forward_on_tape, forward_with_layers, layer_outputs, BatchInput};
pub use params::{param_specs, AdaLnSlots, DenoiserParams, LayerSlots, Layout, ParamKind, ParamSpec};

use crate::corpus::{TokenId, VocabSpec};
use crate::diffusion::MaskedSequence;
use crate::numkit::{layer_norm_core, NumError, Tape, Tensor, LN_EPS};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("parameter {name}: expected shape {want:?}, got {got:?}")]
    ParamShape {
        name: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("numeric error{}: {source}", match .layer { Some(l) => format!(" in layer {l}"), None => String::new() })]
    Numeric { layer: Option<usize>, source: NumError },
}

impl From<NumError> for ModelError {
    fn from(source: NumError) -> Self {
        ModelError::Numeric { layer: None, source }
    }
}

/// Sinusoidal timestep features: `dim/2` sines then `dim/2` cosines, with
/// angular frequencies log-spaced over `[1, 1000]`.
pub fn timestep_features(t: f64, dim: usize) -> Result<Vec<f64>, ModelError> {
    if dim == 0 || dim % 2 != 0 {
        return Err(ModelError::Config(format!("timestep feature dim {dim} must be even")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(ModelError::Config(format!("timestep {t} outside [0, 1]")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| {
            if half == 1 {
                1.0
            } else {
                (1000f64.ln() * j as f64 / (half - 1) as f64).exp()
            }
        })
        .collect();
    Ok(freqs
        .iter()
        .map(|w| (w * t).sin())
        .chain(freqs.iter().map(|w| (w * t).cos()))
        .collect())
}

/// Projects one target embedding into the hidden width.
pub fn project_embedding<T: Scalar>(params: &DenoiserParams<T>, e: &[f32]) -> Result<Vec<T>, ModelError> {
    let d = params.config().embed_dim;
    if e.len() != d {
        return Err(ModelError::Config(format!(
            "embedding dimension {} != configured {d}",
            e.len()
        )));
    }
    let mut tape = Tape::new();
    let vars = params.record(&mut tape)?;
    let ev = tape.leaf(Tensor::new(
        vec![1, d],
        e.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
    )?)?;
    let c = forward::projection(&mut tape, params, &vars, ev)?;
    Ok(tape.value(c)?.data().to_vec())
}

/// Norm site inside a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Attn,
    Ffn,
}

/// `(gamma, beta)` for one layer and site given `t` and a conditioning vector.
pub fn adaln_modulation<T: Scalar>(
    params: &DenoiserParams<T>,
    layer: usize,
    site: Site,
    t: f64,
    c: &[T],
) -> Result<(Vec<T>, Vec<T>), ModelError> {
    let cfg = params.config();
    let slots = params
        .layout()
        .layers
        .get(layer)
        .ok_or_else(|| ModelError::Config(format!("layer {layer} >= {}", cfg.layers)))?;
    let site_slots = match site {
        Site::Attn => &slots.adaln[0],
        Site::Ffn => slots
            .adaln
            .get(1)
            .ok_or_else(|| ModelError::Config("FFN site is not modulated in this config".into()))?,
    };
    if c.len() != cfg.hidden {
        return Err(ModelError::Config(format!("conditioning width {} != {}", c.len(), cfg.hidden)));
    }
    let mut tape = Tape::new();
    let vars = params.record(&mut tape)?;
    let feats = timestep_features(t, cfg.t_feature_dim)?;
    let tf = tape.leaf(Tensor::new(
        vec![1, cfg.t_feature_dim],
        feats.into_iter().map(T::from_f64_lossy).collect(),
    )?)?;
    let cv = tape.leaf(Tensor::new(vec![1, cfg.hidden], c.to_vec())?)?;
    let (g, b) = forward::modulation(&mut tape, &vars, site_slots, cfg.hidden, tf, Some(cv))?;
    Ok((tape.value(g)?.data().to_vec(), tape.value(b)?.data().to_vec()))
}

/// `gamma * (h - mu) / sigma + beta`, row-wise over the hidden dimension.
pub fn adaln_apply<T: Scalar>(h: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<Tensor<T>, ModelError> {
    let d = h.last_dim();
    if gamma.len() != d || beta.len() != d {
        return Err(ModelError::Config(format!(
            "modulation widths {}/{} != hidden {d}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = layer_norm_core(h, LN_EPS)?.normalized;
    for row in out.data_mut().chunks_mut(d) {
        for j in 0..d {
            row[j] = gamma[j] * row[j] + beta[j];
        }
    }
    Ok(out)
}

/// Logits `[n x V]` for a single masked sequence.
pub fn denoiser_forward<T: Scalar>(
    params: &DenoiserParams<T>,
    xt: &MaskedSequence,
    t: f64,
    e: &[f32],
) -> Result<Tensor<T>, ModelError> {
    forward_batch(
        params,
        &BatchInput {
            tokens: &xt.tokens,
            timesteps: &[t],
            embeddings: e,
        },
    )
}

/// What a decoder needs from a model: logits for one sequence.
///
/// Implemented by [`DenoiserParams`] and by test fixtures.
pub trait Denoiser {
    fn vocab(&self) -> VocabSpec;
    fn seq_len(&self) -> usize;
    fn embed_dim(&self) -> usize;
    /// Row-major `[n x V]` logits.
    fn logits(&self, tokens: &[TokenId], t: f64, e: &[f32]) -> Result<Vec<f64>, ModelError>;
}

impl<T: Scalar> Denoiser for DenoiserParams<T> {
    fn vocab(&self) -> VocabSpec {
        self.config().vocab()
    }

    fn seq_len(&self) -> usize {
        self.config().seq_len
    }

    fn embed_dim(&self) -> usize {
        self.config().embed_dim
    }

    fn logits(&self, tokens: &[TokenId], t: f64, e: &[f32]) -> Result<Vec<f64>, ModelError> {
        let out = forward_batch(
            self,
            &BatchInput {
                tokens,
                timesteps: &[t],
                embeddings: e,
            },
        )?;
        Ok(out.to_f64_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_features_at_zero() {
        let f = timestep_features(0.0, 32).unwrap();
        assert!(f[..16].iter().all(|&x| x == 0.0));
        assert!(f[16..].iter().all(|&x| x == 1.0));
        assert!(timestep_features(0.5, 7).is_err());
        assert_ne!(timestep_features(0.1, 32).unwrap(), timestep_features(0.9, 32).unwrap());
    }

    #[test]
    fn timestep_features_are_lipschitz() {
        // |d/dt| <= sqrt(sum w_j^2); for h = 1e-4 the step stays well below 1.
        let bound: f64 = (0..16)
            .map(|j| (1000f64.ln() * j as f64 / 15.0).exp().powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(bound * 1e-4 < 1.0);
        for i in 0..=100 {
            let t = i as f64 * 0.0099;
            let a = timestep_features(t, 32).unwrap();
            let b = timestep_features(t + 1e-4, 32).unwrap();
            let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(dist < 1.0 && dist <= bound * 1e-4 + 1e-12);
        }
    }

    #[test]
    fn adaln_apply_identity_and_zero_scale() {
        let h = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 4.0, -1.0], &[0.5, 0.5, 0.0, 3.0]]).unwrap();
        let plain = layer_norm_core(&h, LN_EPS).unwrap().normalized;
        assert_eq!(adaln_apply(&h, &[1.0; 4], &[0.0; 4]).unwrap(), plain);
        let beta = [0.1, -0.2, 0.3, 0.4];
        let out = adaln_apply(&h, &[0.0; 4], &beta).unwrap();
        assert_eq!(out.row(0), &beta);
        assert_eq!(out.row(1), &beta);
    }

    #[test]
    fn init_modulation_is_identity() {
        let p = DenoiserParams::<f64>::init(&ModelConfig::tiny(), 3).unwrap();
        let c = vec![0.7; 16];
        for layer in 0..2 {
            for site in [Site::Attn, Site::Ffn] {
                let (g, b) = adaln_modulation(&p, layer, site, 0.37, &c).unwrap();
                assert!(g.iter().all(|&x| x == 1.0));
                assert!(b.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn gamma_is_additive_in_the_conditioning_branch() {
        let mut p = DenoiserParams::<f64>::init(&ModelConfig::tiny(), 3).unwrap();
        let c = vec![0.3; 16];
        let (g0, b0) = adaln_modulation(&p, 0, Site::Attn, 0.5, &c).unwrap();
        let slot = p.layout().layers[0].adaln[0].c_bias;
        let delta = 0.125;
        p.tensor_mut(slot).data_mut()[2] += delta;
        let (g1, b1) = adaln_modulation(&p, 0, Site::Attn, 0.5, &c).unwrap();
        assert_eq!(g1[2] - g0[2], delta);
        assert_eq!(b1, b0);
        for j in (0..16).filter(|&j| j != 2) {
            assert_eq!(g1[j], g0[j]);
        }
    }

    #[test]
    fn projection_degenerate_weights() {
        let mut p = DenoiserParams::<f64>::init(&ModelConfig::tiny(), 1).unwrap();
        let l = p.layout().clone();
        for i in [l.proj_w1, l.proj_b1, l.proj_w2, l.proj_b2] {
            p.tensor_mut(i).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let e = [0.5f32; 8];
        assert!(project_embedding(&p, &e).unwrap().iter().all(|&x| x == 0.0));
        // W1 = 0, b1 = 0 => GELU(0) = 0 so c = b2
        let v: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        p.tensor_mut(l.proj_b2).data_mut().copy_from_slice(&v);
        let w2 = p.tensor_mut(l.proj_w2);
        w2.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = i as f64);
        assert_eq!(project_embedding(&p, &e).unwrap(), v);
        assert!(project_embedding(&p, &[0.0; 7]).is_err());
    }

    #[test]
    fn logits_shape_and_conditioning_reaches_output() {
        let cfg = ModelConfig::tiny();
        let mut p = DenoiserParams::<f64>::init(&cfg, 11).unwrap();
        // give the conditioning maps nonzero weights
        for l in p.layout().layers.clone() {
            for s in l.adaln {
                let w = p.tensor_mut(s.c_weight);
                w.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = ((i as f64) * 0.7).sin() * 0.5);
            }
        }
        let xt = MaskedSequence::fully_masked(4, cfg.vocab());
        let e1: Vec<f32> = (0..8).map(|i| (i as f32 * 0.3).cos()).collect();
        let e2: Vec<f32> = (0..8).map(|i| (i as f32 * 0.9).sin()).collect();
        let a = denoiser_forward(&p, &xt, 0.5, &e1).unwrap();
        let b = denoiser_forward(&p, &xt, 0.5, &e2).unwrap();
        assert_eq!(a.shape(), &[4, 12]);
        let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let cfg = ModelConfig::tiny();
        let p = DenoiserParams::<f32>::init(&cfg, 1).unwrap();
        let xt = MaskedSequence::fully_masked(4, cfg.vocab());
        assert!(matches!(
            denoiser_forward(&p, &xt, 0.5, &[0.0; 9]),
            Err(ModelError::Config(_))
        ));
        assert!(denoiser_forward(&p, &xt, 1.5, &[0.0; 8]).is_err());
    }
}
