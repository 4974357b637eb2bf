use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes disagree at a graph node or between containers.
    #[error("shape error at {at}: {msg}")]
    Shape { at: String, msg: String },

    /// A caller broke an operation's contract (e.g. gradients of a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A scalar argument is outside its admissible range.
    #[error("domain error: {name} = {value} ({expected})")]
    Domain {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("non-finite value produced at node {node}")]
    NonFinite { node: usize },

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("missing prerequisite artifact {path}: {hint}")]
    Prerequisite { path: PathBuf, hint: String },

    #[error("source-free guard: stage `{stage}` attempted to read source-domain data at {path}")]
    SourceFree { stage: String, path: PathBuf },

    #[error("prediction dump line {line}: {msg}")]
    Dump { line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(at: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            at: at.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Prerequisite { .. } => 3,
            Error::SourceFree { .. } => 4,
            _ => 1,
        }
    }
}
