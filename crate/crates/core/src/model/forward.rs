//! Batched denoiser forward pass on a gradient tape.

use super::params::{AdaLnSlots, DenoiserParams};
use super::{timestep_features, ModelConfig, ModelError};
use crate::corpus::TokenId;
use crate::numkit::{NumError, Tape, Tensor, Var, LN_EPS};
use crate::scalar::Scalar;

/// One batch of denoiser inputs, row-major by sequence.
#[derive(Debug, Clone, Copy)]
pub struct BatchInput<'a> {
    /// `batch * seq_len` token ids (content or MASK).
    pub tokens: &'a [TokenId],
    /// One timestep per sequence.
    pub timesteps: &'a [f64],
    /// `batch * embed_dim` target embeddings.
    pub embeddings: &'a [f32],
}

impl BatchInput<'_> {
    pub fn batch_size(&self) -> usize {
        self.timesteps.len()
    }
}

fn at(layer: usize) -> impl Fn(NumError) -> ModelError {
    move |source| ModelError::Numeric {
        layer: Some(layer),
        source,
    }
}

fn outside(source: NumError) -> ModelError {
    ModelError::Numeric { layer: None, source }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Per-sequence `(gamma, beta)` at one site, each `[batch x hidden]`.
///
/// `gamma = 1 + gamma_t + gamma_c`, `beta = beta_t + beta_c`. The conditioning
/// branch is omitted when `cond` is `None`.
pub(crate) fn modulation<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    slots: &AdaLnSlots,
    hidden: usize,
    t_feat: Var,
    cond: Option<Var>,
) -> Result<(Var, Var), NumError> {
    let mut m = linear(tape, t_feat, vars[slots.t_weight], vars[slots.t_bias])?;
    if let Some(c) = cond {
        let mc = linear(tape, c, vars[slots.c_weight], vars[slots.c_bias])?;
        m = tape.add(m, mc)?;
    }
    let gamma = tape.slice_cols(m, 0, hidden)?;
    let gamma = tape.add_const(gamma, T::one())?;
    let beta = tape.slice_cols(m, hidden, hidden)?;
    Ok((gamma, beta))
}

/// `c = W2 . GELU(W1 e + b1) + b2` for every sequence in the batch.
pub(crate) fn projection<T: Scalar>(
    tape: &mut Tape<T>,
    params: &DenoiserParams<T>,
    vars: &[Var],
    embeddings: Var,
) -> Result<Var, NumError> {
    let l = params.layout();
    let hidden = linear(tape, embeddings, vars[l.proj_w1], vars[l.proj_b1])?;
    let hidden = tape.gelu(hidden)?;
    linear(tape, hidden, vars[l.proj_w2], vars[l.proj_b2])
}

fn check_batch(config: &ModelConfig, batch: &BatchInput<'_>) -> Result<(), ModelError> {
    let b = batch.batch_size();
    if b == 0 {
        return Err(ModelError::Config("empty batch".into()));
    }
    if batch.tokens.len() != b * config.seq_len {
        return Err(ModelError::Config(format!(
            "{} tokens for {b} sequences of length {}",
            batch.tokens.len(),
            config.seq_len
        )));
    }
    if batch.embeddings.len() != b * config.embed_dim {
        return Err(ModelError::Config(format!(
            "embedding dimension mismatch: {} values for {b} vectors of dimension {}",
            batch.embeddings.len(),
            config.embed_dim
        )));
    }
    if let Some(&t) = batch.timesteps.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(ModelError::Config(format!("timestep {t} outside [0, 1]")));
    }
    Ok(())
}

/// Records the full forward pass and returns logits `[batch * n x V]`.
///
/// `vars` must come from [`DenoiserParams::record`] on the same tape.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &DenoiserParams<T>,
    vars: &[Var],
    batch: &BatchInput<'_>,
) -> Result<Var, ModelError> {
    Ok(forward_with_layers(tape, params, vars, batch)?.0)
}

/// Like [`forward_on_tape`], also returning the residual stream
/// `[batch * n x hidden]` after each layer.
pub fn forward_with_layers<T: Scalar>(
    tape: &mut Tape<T>,
    params: &DenoiserParams<T>,
    vars: &[Var],
    batch: &BatchInput<'_>,
) -> Result<(Var, Vec<Var>), ModelError> {
    let cfg = params.config();
    check_batch(cfg, batch)?;
    let (b, n, h) = (batch.batch_size(), cfg.seq_len, cfg.hidden);
    let l = params.layout();

    let ids: Vec<usize> = batch.tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
    let tok = tape.gather(vars[l.token_embedding], &ids).map_err(outside)?;
    let pos = tape.gather(vars[l.pos_embedding], &positions).map_err(outside)?;
    let mut x = tape.add(tok, pos).map_err(outside)?;

    let cond = if cfg.conditional {
        let e = Tensor::new(
            vec![b, cfg.embed_dim],
            batch.embeddings.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
        .map_err(outside)?;
        let e = tape.leaf(e).map_err(outside)?;
        Some(projection(tape, params, vars, e).map_err(outside)?)
    } else {
        None
    };

    let feats: Vec<T> = batch
        .timesteps
        .iter()
        .flat_map(|&t| timestep_features(t, cfg.t_feature_dim).expect("validated config"))
        .map(T::from_f64_lossy)
        .collect();
    let t_feat = tape
        .leaf(Tensor::new(vec![b, cfg.t_feature_dim], feats).map_err(outside)?)
        .map_err(outside)?;

    let mut layer_out = Vec::with_capacity(l.layers.len());
    for (li, slots) in l.layers.iter().enumerate() {
        let err = at(li);
        // attention sub-block
        let (norm, _, _) = tape.layer_norm(x, LN_EPS).map_err(&err)?;
        let (gamma, beta) = modulation(tape, vars, &slots.adaln[0], h, t_feat, cond).map_err(&err)?;
        let a = tape.modulate(norm, gamma, beta).map_err(&err)?;
        let q = linear(tape, a, vars[slots.wq], vars[slots.bq]).map_err(&err)?;
        let k = linear(tape, a, vars[slots.wk], vars[slots.bk]).map_err(&err)?;
        let v = linear(tape, a, vars[slots.wv], vars[slots.bv]).map_err(&err)?;
        let att = tape.attention(q, k, v, n, cfg.heads).map_err(&err)?;
        let o = linear(tape, att, vars[slots.wo], vars[slots.bo]).map_err(&err)?;
        x = tape.add(x, o).map_err(&err)?;

        // feed-forward sub-block
        let (norm, _, _) = tape.layer_norm(x, LN_EPS).map_err(&err)?;
        let f_in = match slots.adaln.get(1) {
            Some(site) => {
                let (gamma, beta) = modulation(tape, vars, site, h, t_feat, cond).map_err(&err)?;
                tape.modulate(norm, gamma, beta).map_err(&err)?
            }
            None => norm,
        };
        let f = linear(tape, f_in, vars[slots.ffn_w1], vars[slots.ffn_b1]).map_err(&err)?;
        let f = tape.gelu(f).map_err(&err)?;
        let f = linear(tape, f, vars[slots.ffn_w2], vars[slots.ffn_b2]).map_err(&err)?;
        x = tape.add(x, f).map_err(&err)?;
        layer_out.push(x);
    }

    let (norm, _, _) = tape.layer_norm(x, LN_EPS).map_err(outside)?;
    let x = tape
        .modulate(norm, vars[l.final_scale], vars[l.final_shift])
        .map_err(outside)?;
    let logits = tape.matmul_nt(x, vars[l.token_embedding]).map_err(outside)?;
    Ok((logits, layer_out))
}

/// Tape-free batched forward; returns logits `[batch * n x V]`.
pub fn forward_batch<T: Scalar>(params: &DenoiserParams<T>, batch: &BatchInput<'_>) -> Result<Tensor<T>, ModelError> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape)?;
    let logits = forward_on_tape(&mut tape, params, &vars, batch)?;
    Ok(tape.value(logits)?.clone())
}

/// Residual stream `[batch * n x hidden]` after each layer.
pub fn layer_outputs<T: Scalar>(params: &DenoiserParams<T>, batch: &BatchInput<'_>) -> Result<Vec<Tensor<T>>, ModelError> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape)?;
    let (_, layers) = forward_with_layers(&mut tape, params, &vars, batch)?;
    layers.into_iter().map(|v| Ok(tape.value(v)?.clone())).collect()
}
