use std::path::Path;

use maskinv_core::corpus::VocabSpec;
use maskinv_core::decode::{DecodeConfig, Strategy};
use maskinv_core::model::ModelConfig;
use maskinv_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    #[serde(rename = "V")]
    pub vocab_size: usize,
    pub n: usize,
    pub count: usize,
    pub order: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 64,
            n: 8,
            count: 100_000,
            order: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub seed: u64,
    pub d: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { seed: 0, d: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out sequences decoded per evaluation (from the start of the
    /// validation split).
    pub samples: usize,
    /// Pairs drawn for the random-pair cosine baseline.
    pub random_pairs: usize,
    /// Base seed for decoding and the random-token baseline.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            random_pairs: 10_000,
            seed: 0,
        }
    }
}

fn default_decoders() -> Vec<DecodeConfig> {
    Strategy::ALL.iter().map(|&s| DecodeConfig::with_strategy(s)).collect()
}

/// Everything a run needs. The model's `vocab_size`, `seq_len` and
/// `embed_dim` always follow the corpus and encoder sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: Vec<DecodeConfig>,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            corpus: CorpusConfig::default(),
            encoder: EncoderConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: default_decoders(),
            eval: EvalConfig::default(),
        };
        c.sync();
        c
    }
}

impl RunConfig {
    /// Reads a JSON config (defaults fill missing fields), or the defaults
    /// when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut c: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::config(format!("config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        c.sync();
        c.validate()?;
        Ok(c)
    }

    pub fn sync(&mut self) {
        self.model.vocab_size = self.corpus.vocab_size;
        self.model.seq_len = self.corpus.n;
        self.model.embed_dim = self.encoder.d;
    }

    /// Replaces every seed with `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.encoder.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    pub fn vocab(&self) -> Result<VocabSpec, CliError> {
        Ok(VocabSpec::new(self.corpus.vocab_size)?)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.vocab()?;
        let c = &self.corpus;
        if c.n == 0 || c.order == 0 || c.count < 10 {
            return Err(CliError::config(format!(
                "corpus needs n >= 1, order >= 1 and count >= 10 (got n={} order={} count={})",
                c.n, c.order, c.count
            )));
        }
        if self.encoder.d == 0 {
            return Err(CliError::config("encoder.d must be positive"));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.decode.is_empty() {
            return Err(CliError::config("decode list is empty"));
        }
        for d in &self.decode {
            d.validate()?;
        }
        if self.eval.samples == 0 || self.eval.random_pairs == 0 {
            return Err(CliError::config("eval.samples and eval.random_pairs must be positive"));
        }
        Ok(())
    }
}
