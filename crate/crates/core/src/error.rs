use crate::eval::EvalError;
use crate::evidence::EvidenceError;
use crate::fusion_net::NetError;
use crate::geometry::CalibrationError;
use crate::kitti_io::{ConfigError, ParseError};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: ParseError },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no labeled frames to train on")]
    EmptyTrainingSet,
    #[error("unknown class `{0}`")]
    UnknownClass(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
