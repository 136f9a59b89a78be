use pestvl_caption::CaptionError;
use pestvl_core::CoreError;

pub const USAGE: i32 = 2;
pub const CONFIG: i32 = 3;
pub const DATA: i32 = 4;
pub const RUNTIME: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: DATA,
            message: message.into(),
        }
    }

    pub fn category(&self) -> &'static str {
        match self.code {
            USAGE => "usage",
            CONFIG => "config",
            DATA => "data",
            _ => "runtime",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match e {
            CoreError::Config(_) => CONFIG,
            CoreError::Data(_) | CoreError::Format { .. } | CoreError::Image { .. } | CoreError::Io(_) | CoreError::Domain(_) => DATA,
            CoreError::Shape(_) | CoreError::Diverged { .. } => RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<CaptionError> for CliError {
    fn from(e: CaptionError) -> Self {
        let code = match e {
            CaptionError::Config(_) | CaptionError::Template(_) | CaptionError::UnboundPlaceholder(_) => CONFIG,
            CaptionError::Invalid(_)
            | CaptionError::Line { .. }
            | CaptionError::LookupMiss(_)
            | CaptionError::Format(_)
            | CaptionError::Io(_) => DATA,
            CaptionError::Auth(_)
            | CaptionError::Timeout { .. }
            | CaptionError::Exhausted { .. }
            | CaptionError::Malformed(_)
            | CaptionError::Rejected { .. } => RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
