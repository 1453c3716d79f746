use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input {path}: run `hesslens {command}` first")]
    Dependency { path: PathBuf, command: &'static str },
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] hesslens::Error),
}

impl CliError {
    /// 1 configuration, 2 divergence or other numerical failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        use hesslens::Error as E;
        match self {
            CliError::Config(_) => 1,
            CliError::Dependency { .. } | CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                E::Dimension(_) | E::Contract(_) | E::Capacity(_) | E::UnsupportedOrder(_) => 1,
                E::Io { .. } | E::Format { .. } | E::Corrupt { .. } | E::Version { .. } => 4,
                _ => 2,
            },
        }
    }
}
