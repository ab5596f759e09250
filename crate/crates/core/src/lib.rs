//! Two-stage neural cellular automata (Med-NCA) for high-resolution 2D
//! segmentation, trained from scratch on the CPU.
//!
//! The crate is organised bottom-up:
//!
//! - [`engine`]: tensors, the fixed differentiable op set and the tape.
//! - [`nca`]: one backbone NCA (parameters, update step, rollout).
//! - [`pipeline`]: the two-stage model, the patch-based training step and
//!   patch-free inference, plus activation accounting.
//! - [`losses`]: Dice / BCE losses and Dice evaluation.
//! - [`trainer`]: Adam, schedule, early stopping, history.
//! - [`data`]: the synthetic organ generator, PGM I/O and manifests.
//! - [`perturb`]: invariance transforms and acquisition artefacts.
//! - [`checkpoint`], [`config`], [`harness`]: what the CLI is built from.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod harness;
pub mod losses;
pub mod nca;
pub mod par;
pub mod perturb;
pub mod pipeline;
pub mod rng;
pub mod trainer;

pub use engine::{EngineError, Scalar, Tensor};
pub use nca::{param_count, BackboneParams, NcaConfig};
pub use pipeline::{MedNcaModel, TrainSample};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed pgm: {0}")]
    Pgm(String),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
