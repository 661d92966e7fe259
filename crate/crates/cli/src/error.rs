use std::path::PathBuf;

/// Process exit status for each failure class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const MISSING: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const GUARD: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {path}: {what}")]
    Missing { path: PathBuf, what: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("consistency guard: {0}")]
    Guard(String),
    #[error(transparent)]
    Core(#[from] patchlab::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use patchlab::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Missing { .. } => exit::MISSING,
            CliError::Numeric(_) => exit::NUMERIC,
            CliError::Guard(_) => exit::GUARD,
            CliError::Core(e) => match e {
                E::TrainingDiverged { .. } | E::AttackDiverged { .. } => exit::NUMERIC,
                E::NotATransfer(_) | E::IncompatibleReports(_) => exit::GUARD,
                E::InvalidParameter(_) | E::InvalidTarget(_) | E::InvalidClass(_) => exit::CONFIG,
                _ => exit::OTHER,
            },
            CliError::Io { .. } => exit::OTHER,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

pub type CliResult<T> = Result<T, CliError>;
