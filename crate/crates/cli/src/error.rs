use thiserror::Error;

use sewercast::band::BandError;
use sewercast::conformal::ConformalError;
use sewercast::denoiser::DenoiserError;
use sewercast::diffusion::DiffusionError;
use sewercast::evaluation::EvaluationError;
use sewercast::masking::MaskError;
use sewercast::series::SeriesError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("no correction profile for {0}; run `calibrate` for this sensor, condition, horizon and alpha")]
    MissingProfile(String),
    #[error("profile key mismatch: {0}")]
    KeyMismatch(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 usage or config, 2 data, 3 missing artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) | CliError::Io(_) => 2,
            CliError::MissingArtifact(_) | CliError::MissingProfile(_) | CliError::KeyMismatch(_) => 3,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_error!(
    BandError,
    ConformalError,
    DenoiserError,
    DiffusionError,
    EvaluationError,
    MaskError,
    SeriesError,
    serde_json::Error
);
