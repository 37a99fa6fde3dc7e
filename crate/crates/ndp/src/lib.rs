//! Neural diffusion processes: denoising diffusion over function draws.
//!
//! The library trains a diffusion model on synthetic Gaussian-process data
//! and samples functions from it: unconditionally, conditioned on a context
//! dataset (in-painting style resampling), or with the input locations
//! themselves diffused, which enables Thompson-sampling Bayesian
//! optimisation and density-estimation global optimisation.
//!
//! See the `examples/` directory for one runnable program per capability and
//! the `ndp` binary for the command-line interface.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod csvio;
pub mod error;
pub mod gp;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sample;
pub mod schedule;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{NdpError, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
