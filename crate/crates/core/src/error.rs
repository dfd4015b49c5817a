use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
///
/// Every variant maps to a stable machine-readable class name and process
/// exit code so the command-line front end can report failures uniformly.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed template {template:?}: {reason}")]
    MalformedTemplate { template: String, reason: String },

    #[error("empty concept: {0}")]
    EmptyConcept(String),

    #[error("invalid concept set: {0}")]
    ConceptSet(String),

    #[error("encoder backend {backend}: {message}")]
    Backend { backend: String, message: String },

    #[error("zero direction in {which} row {row} (norm {norm:e})")]
    ZeroDirection {
        which: &'static str,
        row: usize,
        norm: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("configuration field `{field}` out of range: {message}")]
    Range { field: String, message: String },

    #[error("configuration schema violations: {}", .0.join("; "))]
    Schema(Vec<String>),

    #[error("resolution mismatch: expected {expected:?}, got {actual:?}")]
    Resolution {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("unusable POOD dataset: {0}")]
    UnusablePood(String),

    #[error("loss diverged at step {step}: {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("nothing to evaluate: {0}")]
    EmptyEval(String),

    #[error("bad perturbation file: {0}")]
    Format(String),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn backend(backend: impl Into<String>, message: impl ToString) -> Self {
        Error::Backend {
            backend: backend.into(),
            message: message.to_string(),
        }
    }

    pub fn range(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Range {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Stable class name used in machine-readable error reports.
    pub fn class(&self) -> &'static str {
        match self {
            Error::MalformedTemplate { .. } => "malformed_template",
            Error::EmptyConcept(_) => "empty_concept",
            Error::ConceptSet(_) => "concept_set",
            Error::Backend { .. } => "encoder_backend",
            Error::ZeroDirection { .. } => "zero_direction",
            Error::Config(_) | Error::Json(_) => "config",
            Error::Range { .. } => "range",
            Error::Schema(_) => "schema",
            Error::Resolution { .. } => "resolution",
            Error::UnusablePood(_) => "unusable_pood",
            Error::Divergence { .. } => "divergence",
            Error::EmptyEval(_) => "empty_eval",
            Error::Format(_) => "format",
            Error::Oracle(_) => "oracle",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
            Error::Tensor(_) => "tensor",
        }
    }

    /// Process exit code for this error class. Zero is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Schema(_) => 3,
            Error::Range { .. } => 4,
            Error::Resolution { .. } => 5,
            Error::UnusablePood(_) => 6,
            Error::EmptyEval(_) => 7,
            Error::ZeroDirection { .. } => 8,
            Error::Divergence { .. } => 9,
            Error::Io { .. } => 10,
            Error::Format(_) => 11,
            Error::Backend { .. } => 12,
            Error::MalformedTemplate { .. } => 13,
            Error::EmptyConcept(_) => 14,
            Error::ConceptSet(_) => 15,
            Error::Oracle(_) => 16,
            Error::Image(_) => 17,
            Error::Tensor(_) => 18,
        }
    }
}
