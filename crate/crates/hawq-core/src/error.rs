//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),

    #[error("node {0} is not on this tape")]
    NotOnTape(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("malformed data: {0}")]
    MalformedData(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("quantizer: {0}")]
    Quantizer(String),

    #[error("probe: {0}")]
    Probe(String),

    #[error("planner: {0}")]
    Planner(String),

    #[error("training diverged at stage {stage}, epoch {epoch}: loss is not finite")]
    Diverged { stage: usize, epoch: usize },

    #[error("landscape: {0}")]
    Landscape(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("fixture: {0}")]
    Fixture(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
