//! Frequency-domain low-rank adaptation (FouRA) and baseline LoRA, built from
//! first principles on a small dense-matrix core.
//!
//! Layout:
//! - [`matrix`], [`linalg`]: dense `f64` matrices, Jacobi SVD, norms.
//! - [`spectral`]: unitary DFT / DCT along the token or embedding axis.
//! - [`adapter`]: LoRA and FouRA layers, the rank gate, `ΔW` materialization.
//! - [`autodiff`], [`train`]: reverse-mode tape, optimizers, toy tasks.
//! - [`analysis`]: singular-value spread, bounds, subspace metrics.
//! - [`merge`]: training-free adapter combination.
//! - [`workbench`]: checkpoints, config files, CSV/SVG reports, CLI commands.

pub mod adapter;
pub mod analysis;
pub mod autodiff;
pub mod train;
pub mod error;
pub mod linalg;
pub mod merge;
pub mod matrix;
pub mod rng;
pub mod spectral;
pub mod workbench;

pub use error::{FouraError, Result};
pub use matrix::Matrix;
