//! CLI-level error type and its mapping onto process exit codes.
//!
//! Two kinds of failure exist at this level: the run configuration is bad
//! (syntax, unknown keys, values out of range, requests the machinery
//! cannot serve), or the library failed underneath us. The exit code
//! contract is: 0 success, 2 configuration error, 3 numeric or
//! optimization failure, 4 IO or file-parse error. Library errors that
//! describe an impossible request (shape mismatches, size guards,
//! unsupported marginals) count as configuration errors: the user asked
//! for them in the config file.

use gsgw::GsgwError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Lib(#[from] GsgwError),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(msg: impl Into<String>) -> CliError {
        CliError::Config(msg.into())
    }

    /// The documented process exit code for this failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Lib(e) => match e {
                GsgwError::NumericFailure(_)
                | GsgwError::OptimizationFailure(_)
                | GsgwError::Disconnected(_)
                | GsgwError::DegenerateInput(_) => 3,
                GsgwError::Io(_) | GsgwError::Parse { .. } => 4,
                GsgwError::InvalidInput(_)
                | GsgwError::ShapeMismatch(_)
                | GsgwError::SizeGuard(_)
                | GsgwError::UnsupportedMarginals(_) => 2,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_partition_the_error_space() {
        assert_eq!(CliError::config("x").exit_code(), 2);
        assert_eq!(
            CliError::from(GsgwError::numeric("nan")).exit_code(),
            3
        );
        assert_eq!(
            CliError::from(GsgwError::OptimizationFailure("diverged".into())).exit_code(),
            3
        );
        assert_eq!(
            CliError::from(GsgwError::Parse {
                path: "x.off".into(),
                location: "line 1".into(),
                message: "bad".into(),
            })
            .exit_code(),
            4
        );
        assert_eq!(
            CliError::from(GsgwError::invalid("bad n")).exit_code(),
            2
        );
    }
}
