//! Micro-crack localization from simulated guided-wave fields.
//!
//! The crate covers the whole pipeline: a lattice wave simulator that
//! produces labelled displacement fields, a small layer engine with
//! hand-written gradients, the inception-style regression network built on
//! it, and training, evaluation and plotting utilities.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gradnet;
pub mod io;
pub mod kv;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod rng;
pub mod train;
pub mod wavesim;

pub use error::{Error, Result};
