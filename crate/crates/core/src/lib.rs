//! Reflective learning for long-tail classification.
//!
//! The crate bundles a small dense classifier with analytic gradients, a
//! long-tail dataset synthesizer, the loss zoo used by the method (CE, balanced
//! softmax, temperature distillation, soft-label CE, logit MSE), the
//! previous-epoch review state, gradient conflict correction and an epoch
//! trainer with diagnostics. The `reflearn` binary drives all of it from the
//! command line.
//!
//! Data-parallel inner loops (batch forward/backward rows, evaluation, class
//! medians, multi-seed sweeps) run on rayon when the `parallel` feature is on
//! and fall back to plain loops otherwise. Both paths produce bit-identical
//! results.

pub mod cli;
pub mod data;
pub mod error;
pub mod kc;
pub mod losses;
pub mod matrix;
pub mod nn;
pub mod par;
pub mod reflect;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
