use std::path::PathBuf;

use crate::gaussian::GaussianId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid scale: every component must be positive, got {0:?}")]
    InvalidScale([f64; 3]),

    #[error("degenerate rotation: quaternion norm {0:e} is too small to normalize")]
    DegenerateRotation(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("OutOfWindow: time {t} is outside the deformation window starting at t0 = {t0} (gaussian {id:?})")]
    OutOfWindow {
        id: Option<GaussianId>,
        t0: f64,
        t: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate depth: {0}")]
    DegenerateDepth(String),

    #[error("fit diverged: {0}")]
    FitDiverged(String),

    #[error("predictor failure: {0}")]
    Predictor(String),

    #[error("scene spec rejected: {0}")]
    Spec(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
