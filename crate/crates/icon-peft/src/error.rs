use std::io;
use std::path::Path;

/// Failures surfaced by the command line, mapped onto stable exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] icon_peft_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    /// A numerical verification did not meet its threshold.
    #[error("numerical check failed: {0}")]
    Numeric(String),
}

pub type CliResult<T> = Result<T, CliError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

impl From<io::Error> for CliError {
    fn from(source: io::Error) -> Self {
        CliError::Io {
            context: "writing output".into(),
            source,
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use icon_peft_core::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core(E::NonFinite { .. } | E::NanLoss { .. }) => EXIT_NUMERIC,
            CliError::Core(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            context: path.display().to_string(),
            source,
        }
    }
}
