//! Parameter storage: one ordered list of named tensors plus a layout that
//! maps architectural roles onto list indices.
//!
//! The output head has no tensor of its own. Logits are computed against
//! `token_embedding` directly, so the tied weight is a single storage.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::numkit::{Tape, Tensor, Var};
use crate::rng::{self, TAG_INIT};
use crate::scalar::Scalar;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Embedding,
    Positional,
    Matrix,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    /// Whether AdamW applies decoupled weight decay to this kind.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Embedding | ParamKind::Matrix)
    }
}

/// `MLP_t` and `MLP_c` for one modulated norm site. Each is a single linear
/// map producing `gamma || beta` (width `2 * hidden`).
#[derive(Debug, Clone, PartialEq)]
pub struct AdaLnSlots {
    pub t_weight: usize,
    pub t_bias: usize,
    pub c_weight: usize,
    pub c_bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSlots {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
    /// Index 0 is the attention site, index 1 (if present) the FFN site.
    pub adaln: Vec<AdaLnSlots>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub token_embedding: usize,
    pub pos_embedding: usize,
    pub proj_w1: usize,
    pub proj_b1: usize,
    pub proj_w2: usize,
    pub proj_b2: usize,
    pub layers: Vec<LayerSlots>,
    pub final_scale: usize,
    pub final_shift: usize,
}

/// Name, shape and kind of every parameter, in storage order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], kind: ParamKind) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            kind,
        });
        self.specs.len() - 1
    }
}

/// Weight matrices are stored `[in x out]` so activations multiply on the left.
pub fn param_specs(config: &ModelConfig) -> (Vec<ParamSpec>, Layout) {
    use ParamKind::*;
    let (v, n, d, h, f, tf) = (
        config.vocab_size,
        config.seq_len,
        config.embed_dim,
        config.hidden,
        config.ffn_dim,
        config.t_feature_dim,
    );
    let mut b = Builder { specs: Vec::new() };
    let token_embedding = b.add("token_embedding".into(), &[v, h], Embedding);
    let pos_embedding = b.add("pos_embedding".into(), &[n, h], Positional);
    let proj_w1 = b.add("proj.w1".into(), &[d, h], Matrix);
    let proj_b1 = b.add("proj.b1".into(), &[h], Bias);
    let proj_w2 = b.add("proj.w2".into(), &[h, h], Matrix);
    let proj_b2 = b.add("proj.b2".into(), &[h], Bias);
    let sites = ["attn", "ffn"];
    let layers = (0..config.layers)
        .map(|l| {
            let p = |s: &str| format!("layers.{l}.{s}");
            let wq = b.add(p("attn.wq"), &[h, h], Matrix);
            let bq = b.add(p("attn.bq"), &[h], Bias);
            let wk = b.add(p("attn.wk"), &[h, h], Matrix);
            let bk = b.add(p("attn.bk"), &[h], Bias);
            let wv = b.add(p("attn.wv"), &[h, h], Matrix);
            let bv = b.add(p("attn.bv"), &[h], Bias);
            let wo = b.add(p("attn.wo"), &[h, h], Matrix);
            let bo = b.add(p("attn.bo"), &[h], Bias);
            let ffn_w1 = b.add(p("ffn.w1"), &[h, f], Matrix);
            let ffn_b1 = b.add(p("ffn.b1"), &[f], Bias);
            let ffn_w2 = b.add(p("ffn.w2"), &[f, h], Matrix);
            let ffn_b2 = b.add(p("ffn.b2"), &[h], Bias);
            let adaln = sites[..config.sites_per_layer()]
                .iter()
                .map(|site| AdaLnSlots {
                    t_weight: b.add(p(&format!("adaln_{site}.t_weight")), &[tf, 2 * h], Matrix),
                    t_bias: b.add(p(&format!("adaln_{site}.t_bias")), &[2 * h], Bias),
                    c_weight: b.add(p(&format!("adaln_{site}.c_weight")), &[h, 2 * h], Matrix),
                    c_bias: b.add(p(&format!("adaln_{site}.c_bias")), &[2 * h], Bias),
                })
                .collect();
            LayerSlots {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
                adaln,
            }
        })
        .collect();
    let final_scale = b.add("final_norm.scale".into(), &[h], NormScale);
    let final_shift = b.add("final_norm.shift".into(), &[h], NormShift);
    let layout = Layout {
        token_embedding,
        pos_embedding,
        proj_w1,
        proj_b1,
        proj_w2,
        proj_b2,
        layers,
        final_scale,
        final_shift,
    };
    (b.specs, layout)
}

/// All learnable tensors of the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T> {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    layout: Layout,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> DenoiserParams<T> {
    /// Truncated-normal (std 0.02, cut at 2 std) weights; zero biases; zero
    /// AdaLN maps so initial modulation is the identity.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (specs, layout) = param_specs(config);
        let adaln: Vec<usize> = layout
            .layers
            .iter()
            .flat_map(|l| l.adaln.iter().flat_map(|s| [s.t_weight, s.t_bias, s.c_weight, s.c_bias]))
            .collect();
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let mut rng = rng::stream(seed, &[TAG_INIT, i as u64]);
                match spec.kind {
                    ParamKind::Bias | ParamKind::NormShift => Tensor::zeros(&spec.shape),
                    ParamKind::NormScale => Tensor::full(&spec.shape, T::one()),
                    _ if adaln.contains(&i) => Tensor::zeros(&spec.shape),
                    _ => Tensor::from_fn(&spec.shape, |_| T::from_f64_lossy(truncated(&normal, &mut rng))),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            specs,
            layout,
            tensors,
        })
    }

    /// Assembles parameters from tensors in storage order, checking shapes.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let (specs, layout) = param_specs(config);
        if tensors.len() != specs.len() {
            return Err(ModelError::Config(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: spec.name.clone(),
                    want: spec.shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            specs,
            layout,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor as a tape leaf, in storage order.
    pub fn record(&self, tape: &mut Tape<T>) -> Result<Vec<Var>, ModelError> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone()).map_err(ModelError::from))
            .collect()
    }

    /// Zeroes both AdaLN conditioning maps at every site. The forward pass
    /// then ignores the embedding exactly.
    pub fn zero_conditioning(&mut self) {
        let slots: Vec<usize> = self
            .layout
            .layers
            .iter()
            .flat_map(|l| l.adaln.iter().flat_map(|s| [s.c_weight, s.c_bias]))
            .collect();
        for i in slots {
            self.tensors[i].data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserParams<U> {
        DenoiserParams {
            config: self.config.clone(),
            specs: self.specs.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

fn truncated(normal: &Normal<f64>, rng: &mut rng::Rng) -> f64 {
    loop {
        let x = normal.sample(rng);
        if x.abs() <= 2.0 * INIT_STD {
            return x;
        }
    }
}
