//! Top-level error type and the stable process exit codes derived from it.

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::diffusion::ModelError;
use crate::synth::bench::BenchError;
use crate::synth::render::RasterError;
use crate::train::TrainError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONTRACT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum DeigError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("numerical check failed: {0}")]
    Numerical(String),
}

impl DeigError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DeigError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// 1 usage, 2 contract violation, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            DeigError::Usage(_) | DeigError::Config(_) | DeigError::Io { .. } => EXIT_USAGE,
            DeigError::Numerical(_) | DeigError::Train(TrainError::Diverged { .. }) => EXIT_NUMERICAL,
            _ => EXIT_CONTRACT,
        }
    }
}

pub type Result<T, E = DeigError> = std::result::Result<T, E>;
