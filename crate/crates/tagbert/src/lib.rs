//! File formats, checkpoints, run configuration and the command-line driver
//! around [`tagbert_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod io;
pub mod runlog;
pub mod shard;

pub use tagbert_core as core;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] tagbert_core::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
