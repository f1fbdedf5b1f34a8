use std::fmt;

use cxrlab_core::corpus::CorpusError;
use cxrlab_core::harness::HarnessError;
use cxrlab_core::labeler::{LabelError, MatrixError};
use cxrlab_core::reference::ReferenceError;

pub const IO: u8 = 1;
pub const VALIDATION: u8 = 2;
pub const BACKEND: u8 = 3;
pub const GATE: u8 = 4;

/// A message plus the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(VALIDATION, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            return Self::new(0, "");
        }
        Self::new(IO, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::validation(format!("json: {e}"))
    }
}

impl From<toml::de::Error> for Failure {
    fn from(e: toml::de::Error) -> Self {
        Self::validation(format!("config: {e}"))
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(_) => Self::new(IO, e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<ReferenceError> for Failure {
    fn from(e: ReferenceError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<MatrixError> for Failure {
    fn from(e: MatrixError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<LabelError> for Failure {
    fn from(e: LabelError) -> Self {
        match e {
            LabelError::InvalidConfig(_) => Self::validation(e.to_string()),
            _ => Self::new(BACKEND, e.to_string()),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Label(inner) => inner.into(),
            HarnessError::TooManyFailures { .. } => Self::new(BACKEND, e.to_string()),
            HarnessError::MaxRoundsExceeded { .. } => Self::new(GATE, e.to_string()),
            HarnessError::Io(_) => Self::new(IO, e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}
