use std::path::PathBuf;

use crate::data::DataError;
use crate::geom::GeomError;
use crate::model::ModelError;
use crate::patching::PatchError;
use crate::resample::ResampleError;
use crate::tensor::TensorError;
use crate::train::TrainError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Module-prefixed machine-readable code, e.g. `geom.norm`.
    pub fn code(&self) -> String {
        match self {
            Error::Geom(e) => format!("geom.{}", e.code()),
            Error::Resample(e) => format!("resample.{}", e.code()),
            Error::Patch(e) => format!("patching.{}", e.code()),
            Error::Tensor(e) => format!("tensor.{}", e.code()),
            Error::Model(e) => format!("model.{}", e.code()),
            Error::Train(e) => format!("train.{}", e.code()),
            Error::Data(e) => format!("data.{}", e.code()),
            Error::Io { .. } => "io.file".to_string(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Tensor(_) => ErrorClass::Numeric,
            Error::Train(TrainError::NonFinite { .. }) => ErrorClass::Numeric,
            Error::Model(ModelError::InvalidConfig(_))
            | Error::Train(TrainError::InvalidConfig(_))
            | Error::Model(ModelError::HeadMismatch { .. }) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}
