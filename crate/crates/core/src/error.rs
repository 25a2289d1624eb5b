use thiserror::Error;

use crate::config::ConfigError;
use crate::csvio::DataError;
use crate::detection::DetectionError;
use crate::dynamics::DynamicsError;
use crate::herald::AnalysisError;
use crate::optics::OpticsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data format error: {0}")]
    Data(#[from] DataError),
    #[error("estimator failure: {0}")]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl Error {
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
        let context = context.into();
        move |source| Error::Io { context, source }
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Optics(_) | Error::Dynamics(_) | Error::Detection(_) => 2,
            Error::Data(_) => 3,
            Error::Analysis(_) => 4,
            Error::Io { .. } => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
