use std::path::PathBuf;

use thiserror::Error;

use bats_core::BatsError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {}: run `bats {producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error(transparent)]
    Core(#[from] BatsError),

    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn from_config(e: BatsError) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 config, 3 missing artifact, 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(BatsError::Input(_)) => 2,
            _ => 1,
        }
    }
}
