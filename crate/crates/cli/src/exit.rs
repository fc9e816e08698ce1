use std::fmt;
use std::path::Path;

pub const CHECK_FAILED: u8 = 1;
pub const CONFIG_ERROR: u8 = 2;
pub const IO_ERROR: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: CONFIG_ERROR,
            message: message.into(),
        }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Self {
            code: CHECK_FAILED,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self {
            code: IO_ERROR,
            message: format!("{}: {err}", path.display()),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<posmlp::Error> for Failure {
    fn from(e: posmlp::Error) -> Self {
        use posmlp::Error::*;
        let code = match e {
            Config(_) | OutOfRange { .. } | Json(_) => CONFIG_ERROR,
            Io { .. } | Checkpoint { .. } | Dataset(_) => IO_ERROR,
            _ => CHECK_FAILED,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::check(format!("serializing output: {e}"))
    }
}
