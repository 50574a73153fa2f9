//! MSDB: a from-scratch numerical stack for multi-scale dual-branch hand
//! parsing. A small reverse-mode autodiff tensor core drives dilated
//! convolutions, a dual-path upsampling fusion block, class-balanced focal
//! losses, confusion-matrix metrics, a synthetic articulated-hand dataset
//! generator, and a deterministic two-stage trainer with an ablation harness.
//!
//! See the `examples/` directory for one runnable program per capability, or
//! the `msdb` binary for the subcommand front end.

pub mod config;
pub mod datagen;
pub mod dbblock;
pub mod error;
pub mod gradsuite;
pub mod label;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{backward, grad_check, Graph, Tensor};
pub mod cli;
