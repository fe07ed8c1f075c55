use std::io;
use std::path::PathBuf;

use poore_core::data::DataError;
use poore_core::encoder::ModelError;
use poore_core::estimators::EstimatorError;
use poore_core::keywords::KeywordError;
use poore_core::mahalanobis::MahalanobisError;
use poore_core::metrics::MetricsError;
use poore_core::training::TrainingError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("{stage}: {source}")]
    Model { stage: &'static str, source: ModelError },
    #[error("{stage}: {source}")]
    Training { stage: &'static str, source: TrainingError },
    #[error("{stage}: {source}")]
    Mahalanobis { stage: &'static str, source: MahalanobisError },
    #[error("keywords: {0}")]
    Keyword(#[from] KeywordError),
    #[error("eval: {0}")]
    Estimator(#[from] EstimatorError),
    #[error("eval: {0}")]
    Metrics(#[from] MetricsError),
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// 2 for configuration and input problems, 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Data(_) | Error::Keyword(_) => 2,
            Error::Model { source, .. } => model_code(source),
            Error::Training { source, .. } => match source {
                TrainingError::Step { .. } => 3,
                TrainingError::Model(e) => model_code(e),
                TrainingError::Keyword(_) | TrainingError::EmptyTrainingSet => 2,
            },
            Error::Mahalanobis { source, .. } => mahalanobis_code(source),
            Error::Estimator(e) => match e {
                EstimatorError::Model(e) => model_code(e),
                EstimatorError::Mahalanobis(e) => mahalanobis_code(e),
                EstimatorError::NotFitted(_) => 2,
            },
            Error::Metrics(MetricsError::NonFinite(_)) => 3,
            Error::Metrics(_) => 2,
            Error::Io { .. } | Error::Artifact { .. } => 1,
        }
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::InvalidConfig(_)
        | ModelError::TokenOutOfRange { .. }
        | ModelError::SequenceTooLong { .. }
        | ModelError::EmptySequence => 2,
    }
}

fn mahalanobis_code(e: &MahalanobisError) -> i32 {
    match e {
        MahalanobisError::NonFinite { .. } | MahalanobisError::NotPositiveDefinite => 3,
        _ => 2,
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for std::result::Result<T, ModelError> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| Error::Model { stage, source })
    }
}

impl<T> StageExt<T> for std::result::Result<T, TrainingError> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| Error::Training { stage, source })
    }
}

impl<T> StageExt<T> for std::result::Result<T, MahalanobisError> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| Error::Mahalanobis { stage, source })
    }
}
