use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot read config file {path}: {source}")]
    ConfigFile {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] semppl_core::Error),
    #[error("epoch {epoch}, step {step}: {source}")]
    Step {
        epoch: usize,
        step: u64,
        source: semppl_core::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error("grid error: {0}")]
    Grid(String),
    #[error("metrics file error: {0}")]
    Metrics(String),
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::ConfigFile { .. } | Self::Grid(_) => 2,
            Self::Core(semppl_core::Error::Spec(_)) => 2,
            _ => 1,
        }
    }
}
