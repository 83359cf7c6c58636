//! Recurrent dual attention reasoning for visual dialog answer ranking.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense matrices with a reverse-mode differentiation tape.
//! * [`encoders`], [`memory`], [`reasoning`], [`decoders`]: the network.
//! * [`model`]: parameter layout and the per-dialog forward pass.
//! * [`ranking`]: rank aggregation and retrieval metrics.
//! * [`data`]: vocabulary, dataset files and the synthetic task generator.
//! * [`training`] and [`checkpoint`]: optimization and persistence.
//! * [`trace`]: attention traces for plotting.

pub mod checkpoint;
pub mod data;
pub mod decoders;
pub mod encoders;
pub mod memory;
pub mod model;
pub mod params;
pub mod ranking;
pub mod reasoning;
pub mod tensor;
pub mod trace;
pub mod training;

use thiserror::Error;

pub use tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
