use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes, used for CLI exit codes and HTTP status mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Transport,
    Integrity,
    NotFound,
    Io,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Validation => "validation",
            ErrorKind::Transport => "transport",
            ErrorKind::Integrity => "integrity",
            ErrorKind::NotFound => "not_found",
            ErrorKind::Io => "io",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("empty response text at row {row}")]
    EmptyText { row: usize },
    #[error("duplicate response ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("unknown response `{0}`")]
    UnknownResponse(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("shape mismatch: expected dimension {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("degenerate vector: zero norm")]
    DegenerateVector,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("embeddings from model `{0}` cannot be compared with model `{1}`")]
    ModelMismatch(String, String),
    #[error("missing embeddings for responses: {}", .0.join(", "))]
    MissingEmbeddings(Vec<String>),
    #[error("missing codes for responses: {}", .0.join(", "))]
    MissingCodes(Vec<String>),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("stale revision: request carried {given}, project is at {current}")]
    StaleRevision { given: u64, current: u64 },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("training diverged at epoch {epoch} (learning rate {learning_rate})")]
    Divergence { epoch: usize, learning_rate: f64 },
    #[error("did not converge: {0}")]
    Convergence(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Transport { .. } => ErrorKind::Transport,
            Error::Integrity(_) | Error::StaleRevision { .. } | Error::ModelMismatch(..) => {
                ErrorKind::Integrity
            }
            Error::NotFound(_) => ErrorKind::NotFound,
            Error::Io(_) => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::EmptyText { .. } => "empty_text",
            Error::DuplicateIds(_) => "duplicate_ids",
            Error::UnknownCategory(_) => "unknown_category",
            Error::UnknownResponse(_) => "unknown_response",
            Error::UnknownLabel(_) => "unknown_label",
            Error::Shape { .. } => "shape",
            Error::DegenerateVector => "degenerate_vector",
            Error::Config(_) => "config",
            Error::Invalid(_) => "invalid",
            Error::ModelMismatch(..) => "model_mismatch",
            Error::MissingEmbeddings(_) => "missing_embeddings",
            Error::MissingCodes(_) => "missing_codes",
            Error::Integrity(_) => "integrity",
            Error::StaleRevision { .. } => "stale_revision",
            Error::Transport { .. } => "transport",
            Error::Divergence { .. } => "divergence",
            Error::Convergence(_) => "convergence",
            Error::NotFound(_) => "not_found",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Structured fields of the error, for JSON error reports.
    pub fn details(&self) -> serde_json::Value {
        use serde_json::json;
        match self {
            Error::Parse { line, .. } => json!({ "line": line }),
            Error::EmptyText { row } => json!({ "row": row }),
            Error::DuplicateIds(ids) | Error::MissingEmbeddings(ids) | Error::MissingCodes(ids) => {
                json!({ "ids": ids })
            }
            Error::UnknownCategory(c) => json!({ "category": c }),
            Error::UnknownResponse(r) => json!({ "response_id": r }),
            Error::UnknownLabel(l) => json!({ "label": l }),
            Error::Shape { expected, got } => json!({ "expected": expected, "got": got }),
            Error::ModelMismatch(a, b) => json!({ "expected_model": a, "got_model": b }),
            Error::StaleRevision { given, current } => json!({ "given": given, "current": current }),
            Error::Transport { attempts, .. } => json!({ "attempts": attempts }),
            Error::Divergence {
                epoch,
                learning_rate,
            } => json!({ "epoch": epoch, "learning_rate": learning_rate }),
            _ => json!({}),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
