use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::corpus::VocabSpec;

/// Which layer-norm sites inside a block receive AdaLN modulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaLnSites {
    /// Pre-attention and pre-FFN norms, each with its own MLP pair.
    Both,
    /// Pre-attention only; the FFN norm stays a plain layer norm.
    AttnOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub t_feature_dim: usize,
    pub adaln_sites: AdaLnSites,
    /// When false the embedding branch is skipped entirely: the model is an
    /// unconditional masked language model.
    pub conditional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 128,
            heads: 4,
            ffn_dim: 512,
            vocab_size: 64,
            seq_len: 8,
            embed_dim: 32,
            t_feature_dim: 32,
            adaln_sites: AdaLnSites::Both,
            conditional: true,
        }
    }
}

impl ModelConfig {
    /// The tiny configuration used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        Self {
            layers: 2,
            hidden: 16,
            heads: 2,
            ffn_dim: 32,
            vocab_size: 12,
            seq_len: 4,
            embed_dim: 8,
            t_feature_dim: 8,
            ..Self::default()
        }
    }

    pub fn vocab(&self) -> VocabSpec {
        VocabSpec {
            vocab_size: self.vocab_size,
        }
    }

    pub fn sites_per_layer(&self) -> usize {
        match self.adaln_sites {
            AdaLnSites::Both => 2,
            AdaLnSites::AttnOnly => 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.hidden < 2 || self.heads == 0 {
            return fail(format!(
                "layers {}, hidden {}, heads {} must be positive (hidden >= 2)",
                self.layers, self.hidden, self.heads
            ));
        }
        if self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.ffn_dim < self.hidden {
            return fail(format!("ffn_dim {} < hidden {}", self.ffn_dim, self.hidden));
        }
        if self.vocab_size < 2 || self.seq_len == 0 || self.embed_dim == 0 {
            return fail("vocab_size >= 2, seq_len >= 1 and embed_dim >= 1 required".into());
        }
        if self.t_feature_dim == 0 || self.t_feature_dim % 2 != 0 {
            return fail(format!("t_feature_dim {} must be even and positive", self.t_feature_dim));
        }
        Ok(())
    }
}
