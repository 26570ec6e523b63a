//! Error categories and process exit codes.

use std::fmt;

use adaptkit::adapt::AdaptError;
use adaptkit::ckpt::CkptError;
use adaptkit::evalmc::EvalError;
use adaptkit::merge::MergeError;
use adaptkit::model::ModelError;
use adaptkit::quant::QuantError;
use adaptkit::tensor::TensorError;
use adaptkit::tok::TokError;

use crate::config::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub stage: Option<String>,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            stage: None,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, message)
    }

    pub fn in_stage(mut self, stage: &str) -> Self {
        self.stage.get_or_insert_with(|| stage.to_string());
        self
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.stage {
            Some(s) => write!(f, "stage {s} failed: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for CliError {}

pub type Result<T> = std::result::Result<T, CliError>;

/// Maps a library error onto an exit category.
pub trait Classify: fmt::Display {
    fn kind(&self) -> ErrorKind;
}

impl Classify for ConfigError {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Config
    }
}

impl Classify for std::io::Error {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

impl Classify for serde_json::Error {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

impl Classify for TensorError {
    fn kind(&self) -> ErrorKind {
        match self {
            TensorError::Numeric { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for CkptError {
    fn kind(&self) -> ErrorKind {
        match self {
            CkptError::NonFinite { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for TokError {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

impl Classify for QuantError {
    fn kind(&self) -> ErrorKind {
        match self {
            QuantError::NonFinite(_) | QuantError::NotPositiveDefinite { .. } | QuantError::Singular => {
                ErrorKind::Numeric
            }
            QuantError::UnknownScheme(_) | QuantError::InvalidSpec(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for ModelError {
    fn kind(&self) -> ErrorKind {
        match self {
            ModelError::InvalidConfig(_) => ErrorKind::Config,
            ModelError::Quant(q) => q.kind(),
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for AdaptError {
    fn kind(&self) -> ErrorKind {
        match self {
            AdaptError::InvalidConfig(_) | AdaptError::UnknownTarget(_) | AdaptError::InvalidTrainConfig(_) => {
                ErrorKind::Config
            }
            AdaptError::NonFinite { .. } => ErrorKind::Numeric,
            AdaptError::Model(m) => m.kind(),
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for EvalError {
    fn kind(&self) -> ErrorKind {
        match self {
            EvalError::Template(_) | EvalError::NoEligibleVariant(_) => ErrorKind::Config,
            EvalError::NonFinite => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for MergeError {
    fn kind(&self) -> ErrorKind {
        match self {
            MergeError::Weight(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

macro_rules! from_classified {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new(Classify::kind(&e), e.to_string())
            }
        }
    )*};
}

from_classified!(
    ConfigError,
    std::io::Error,
    serde_json::Error,
    TensorError,
    CkptError,
    TokError,
    QuantError,
    ModelError,
    AdaptError,
    EvalError,
    MergeError
);

/// Attach a stage name to any classified error.
pub trait StageContext<T> {
    fn stage(self, name: &str) -> Result<T>;
}

impl<T, E: Into<CliError>> StageContext<T> for std::result::Result<T, E> {
    fn stage(self, name: &str) -> Result<T> {
        self.map_err(|e| e.into().in_stage(name))
    }
}
