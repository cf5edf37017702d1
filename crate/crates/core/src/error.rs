use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unstable time step: dt = {dt} must be below 2/omega_max = {limit}")]
    UnstableTimeStep { dt: f64, limit: f64 },

    #[error("crack lies outside the plate: rasterization touched no lattice bond")]
    CrackOutsidePlate,

    #[error("simulation blew up at step {step}: |displacement| = {magnitude:e}")]
    Instability { step: usize, magnitude: f64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("layer state error: {0}")]
    State(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
