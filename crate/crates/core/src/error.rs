use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("singular matrix{}", fmt_instance(.instance))]
    Singular { instance: Option<String> },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid instance `{id}`: {message}")]
    InvalidInstance { id: String, message: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn fmt_instance(instance: &Option<String>) -> String {
    match instance {
        Some(id) => format!(" (instance `{id}`)"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Attach an instance id to errors that are reported per instance.
    pub fn for_instance(self, id: &str) -> Self {
        match self {
            Error::Singular { instance: None } => Error::Singular {
                instance: Some(id.to_string()),
            },
            other => other,
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. } | Error::NonFinite { .. } | Error::NonFiniteLoss { .. }
        )
    }
}
