use std::fmt;

use afm_core::AfmError;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<AfmError> for CliError {
    fn from(e: AfmError) -> Self {
        let message = e.to_string();
        let code = match e {
            AfmError::Config(_) | AfmError::Tensor { .. } => EXIT_USAGE,
            AfmError::Format { .. }
            | AfmError::Length { .. }
            | AfmError::Consistency(_)
            | AfmError::Corruption(_)
            | AfmError::UnsupportedVersion { .. }
            | AfmError::Io { .. } => EXIT_DATA,
            AfmError::Dimension { .. }
            | AfmError::Shape(_)
            | AfmError::State(_)
            | AfmError::Input(_)
            | AfmError::Numeric(_)
            | AfmError::DegenerateMask(_) => EXIT_INTERNAL,
        };
        Self { code, message }
    }
}
