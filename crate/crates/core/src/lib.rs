//! Flow-matching trajectory generation and one-step distillation on 2-D
//! manipulation tasks, built on a small tape-based autodiff core.

pub mod cfm;
pub mod config;
pub mod diffcore;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod io;
pub mod nets;
pub mod pipeline;
pub mod rng;
pub mod metrics;
pub mod simloop;
pub mod tasks;

pub use error::{Error, Result};
