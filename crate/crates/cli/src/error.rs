use maskinv_core::cache::CacheError;
use maskinv_core::corpus::CorpusError;
use maskinv_core::decode::DecodeError;
use maskinv_core::model::ModelError;
use maskinv_core::trainer::TrainError;
use maskinv_encoder::EncoderError;
use maskinv_eval::EvalError;

/// Process exit codes.
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: m.into(),
        }
    }

    pub fn data(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: m.into(),
        }
    }

    pub fn numeric(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERIC,
            message: m.into(),
        }
    }

    pub fn other(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_OTHER,
            message: m.into(),
        }
    }

    /// Prefixes the message with what was being attempted.
    pub fn context(mut self, what: &str) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Config(m) => Self::config(m),
            CorpusError::Format { .. } => Self::data(e.to_string()),
            CorpusError::Io(e) => e.into(),
        }
    }
}

impl From<CacheError> for CliError {
    fn from(e: CacheError) -> Self {
        match e {
            CacheError::Io(e) => e.into(),
            e => Self::data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numeric { .. } => Self::numeric(e.to_string()),
            ModelError::ParamShape { .. } => Self::data(e.to_string()),
            ModelError::Config(_) => Self::config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::config(e.to_string()),
            TrainError::NonFiniteGradient { .. } | TrainError::Numeric(_) | TrainError::Diffusion(_) => {
                Self::numeric(e.to_string())
            }
            TrainError::Data(_) | TrainError::Checkpoint(_) | TrainError::Json(_) => Self::data(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Io(e) => e.into(),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Config(_) => Self::config(e.to_string()),
            DecodeError::Dimension { .. } => Self::data(e.to_string()),
            DecodeError::Internal(_) => Self::other(e.to_string()),
            DecodeError::Model(m) => m.into(),
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Config(_) => Self::config(e.to_string()),
            EncoderError::Domain(_) => Self::data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Decode(d) => d.into(),
            EvalError::Encoder(d) => d.into(),
            e => Self::data(e.to_string()),
        }
    }
}
