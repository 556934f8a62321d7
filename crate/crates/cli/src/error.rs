use std::path::PathBuf;

use cellscale_core::corpus::CorpusError;
use cellscale_core::entropy::EntropyError;
use cellscale_core::fit::FitError;
use cellscale_core::model::ModelError;
use cellscale_core::trainer::TrainError;
use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Config {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Self {
        let path = path.into();
        move |source| CliError::Json { path, source }
    }

    /// 2 usage, 3 data or format, 4 numeric or degenerate.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => EXIT_USAGE,
            CliError::Corpus(CorpusError::InvalidArgument(_)) => EXIT_USAGE,
            CliError::Io { .. } | CliError::Json { .. } | CliError::Corpus(_) => EXIT_DATA,
            CliError::Model(ModelError::InvalidConfig(_)) => EXIT_USAGE,
            CliError::Model(ModelError::Layer { .. } | ModelError::Tensor(_)) => EXIT_NUMERIC,
            CliError::Model(_) => EXIT_DATA,
            CliError::Train(e) => match e {
                TrainError::InvalidConfig(_) | TrainError::DegenerateMask { .. } => EXIT_USAGE,
                TrainError::Diverged { .. } | TrainError::Tensor(_) => EXIT_NUMERIC,
                TrainError::Model(ModelError::InvalidConfig(_)) => EXIT_USAGE,
                _ => EXIT_DATA,
            },
            CliError::Fit(FitError::Read(_)) => EXIT_DATA,
            CliError::Fit(_) | CliError::Entropy(_) => EXIT_NUMERIC,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
