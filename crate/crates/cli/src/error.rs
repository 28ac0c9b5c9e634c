use std::path::PathBuf;
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const DATA: i32 = 3;
    pub const DIVERGED: i32 = 4;
    pub const GRADCHECK: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("cannot parse config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("output directory {0} exists and is not empty (pass --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),

    #[error("ablation runs failed: {}", .failed.join(", "))]
    Ablation { failed: Vec<String>, diverged: bool },

    #[error(transparent)]
    Core(#[from] mtl_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use mtl_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config { .. } | CliError::OutputExists(_) => exit::USAGE,
            CliError::Io { .. } => exit::DATA,
            CliError::GradCheck(_) => exit::GRADCHECK,
            CliError::Ablation { diverged: true, .. } => exit::DIVERGED,
            CliError::Ablation { .. } => exit::OTHER,
            CliError::Core(e) => match e {
                E::Diverged { .. } | E::NonFinite { .. } => exit::DIVERGED,
                E::InvalidArgument(_) | E::ModeMismatch { .. } => exit::USAGE,
                E::Format(_)
                | E::VersionMismatch { .. }
                | E::Checksum(_)
                | E::ArchitectureMismatch { .. }
                | E::UnreachableTarget { .. }
                | E::LabelOutOfRange { .. }
                | E::EmptyInput(_)
                | E::Io(_)
                | E::Json(_) => exit::DATA,
                _ => exit::OTHER,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
