use std::io;
use std::path::{Path, PathBuf};

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERICAL: i32 = 4;
    /// No bit configuration fits the size budget.
    pub const INFEASIBLE: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("infeasible budget: {0}")]
    Infeasible(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Data(_) => exit::DATA,
            CliError::Numerical(_) => exit::NUMERICAL,
            CliError::Infeasible(_) => exit::INFEASIBLE,
            CliError::Io { .. } | CliError::Other(_) => exit::OTHER,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<snnq::Error> for CliError {
    fn from(e: snnq::Error) -> Self {
        use snnq::Error as E;
        match e {
            E::Config(_) | E::Input(_) => CliError::Config(e.to_string()),
            E::Format(_) | E::Data { .. } => CliError::Data(e.to_string()),
            E::Numerical(_) | E::StateCorruption(_) => CliError::Numerical(e.to_string()),
            E::Io(_) => CliError::Data(e.to_string()),
        }
    }
}
