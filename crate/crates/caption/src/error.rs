use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("unbound placeholder {{{0}}}")]
    UnboundPlaceholder(String),
    #[error("template syntax: {0}")]
    Template(String),
    #[error("missing configuration: {0}")]
    Config(String),
    #[error("authentication rejected by endpoint (HTTP {0})")]
    Auth(u16),
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("endpoint failed after {attempts} attempt(s): {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("request rejected (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("{path}:{line}: {message}")]
    Line { path: PathBuf, line: usize, message: String },
    #[error("no stored embedding for caption hash {0}")]
    LookupMiss(String),
    #[error("embedding store: {0}")]
    Format(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CaptionError {
    /// Short stable name for reports.
    pub fn category(&self) -> &'static str {
        match self {
            CaptionError::Invalid(_) => "invalid",
            CaptionError::UnboundPlaceholder(_) | CaptionError::Template(_) => "template",
            CaptionError::Config(_) => "config",
            CaptionError::Auth(_) => "auth",
            CaptionError::Timeout { .. } => "timeout",
            CaptionError::Exhausted { .. } => "exhausted",
            CaptionError::Malformed(_) => "malformed",
            CaptionError::Rejected { .. } => "rejected",
            CaptionError::Line { .. } | CaptionError::Format(_) => "format",
            CaptionError::LookupMiss(_) => "lookup",
            CaptionError::Io(_) => "io",
        }
    }
}

pub type Result<T, E = CaptionError> = std::result::Result<T, E>;
