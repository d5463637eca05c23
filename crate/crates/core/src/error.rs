use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid language tag {0:?}")]
    InvalidTag(String),

    #[error("invalid sentence pair: {0}")]
    InvalidPair(String),

    #[error("token {token:?} collides with a reserved tag token")]
    ReservedCollision { token: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("language {0:?} is unknown to the model")]
    UnknownLanguage(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("mask has no allowed entries")]
    EmptyMask,

    #[error("mask/vocabulary mismatch: {0}")]
    MaskMismatch(String),

    #[error("OnTarget pairs cannot be removed")]
    RemoveOnTarget,

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
