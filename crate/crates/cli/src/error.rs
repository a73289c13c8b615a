use thiserror::Error;

/// Command failures, each tied to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("incompatible: {0}")]
    Compat(String),
    #[error("out of range: {0}")]
    Range(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Compat(_) => 5,
            CliError::Range(_) => 6,
        }
    }

    pub(crate) fn io(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{context}: {e}"))
    }
}

impl From<stsn_core::Error> for CliError {
    fn from(e: stsn_core::Error) -> Self {
        use stsn_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Io { .. } | E::Malformed(_) | E::Checksum(_) => CliError::Io(msg),
            E::NonFinite { .. } | E::Diverged { .. } | E::DivisionByZero => CliError::Numeric(msg),
            E::ShapeMismatch { .. } | E::ValueCount { .. } => CliError::Compat(msg),
            E::InvalidArgument(_) => CliError::Usage(msg),
            E::NotScalar(_) | E::TapeConsumed | E::UnknownVar(_) => CliError::Numeric(msg),
        }
    }
}
