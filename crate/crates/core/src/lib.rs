//! KL-regularized normalization with baseline normalization layers, a small
//! reverse-mode autodiff engine and a seeded experiment harness.
//!
//! The layers compose into a bottleneck classifier (`model`), trained by the
//! harness in `experiment` and checked by the numerical oracles in `verify`.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linear;
pub mod model;
pub mod norm;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod verify;
