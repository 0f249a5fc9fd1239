//! Unsupervised deformable image registration with two training mechanisms
//! that reduce folding in predicted deformations: cycle-consistent training
//! and alternating generation/refinement.
//!
//! The crate is organized bottom-up:
//!
//! - [`ndtensor`]: dense tensors, a reverse-mode tape and the Adam optimizer.
//! - [`stn`]: the sampling unit (identity grid, differentiable warping, label warping).
//! - [`nets`]: the deformation unit (a small U-net) and the refinement block.
//! - [`losses`]: local cross-correlation, displacement smoothness and their compositions.
//! - [`trainer`]: baseline, cycle-consistent and alternating refinement training.
//! - [`metrics`]: Jacobian determinants, folding fraction, Dice and raster rendering.
//! - [`dataio`]: synthetic pairs, volume files, normalization and cropping.
//! - [`gradcheck`]: the finite-difference suite covering every differentiable op.

pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod ndtensor;
pub mod nets;
pub mod stn;
pub mod trainer;

pub use error::{Error, Result};
pub use ndtensor::{Scalar, Tape, Tensor, Var};
