//! Symmetric single-index learning in the feature space of powersum polynomials.
//!
//! The library is organized around the pipeline of a teacher–student
//! experiment on permutation-invariant inputs:
//!
//! - [`sympoly`]: normalized powersum polynomials, integer partitions, and
//!   exact/Monte-Carlo inner products under the squared-Vandermonde measure.
//! - [`cue`]: seeded sampling of CUE eigenvalues (the input distribution).
//! - [`model`]: analytic activations, the feature matrix `A`, teacher and
//!   student evaluation, information exponent.
//! - [`loss`]: population and empirical correlational losses, Wirtinger
//!   gradients, and the `pinv(A^H A)` preconditioner.
//! - [`dynamics`]: the three-variable summary-statistics ODE, its integrator,
//!   stopping times, and closed-form reference bounds.
//! - [`init`]: initialization of the trainable weights, projection
//!   deficiency, and random-matrix diagnostics.
//! - [`train`]: full-batch preconditioned gradient descent with trajectory
//!   recording.
//! - [`cli`]: the command-line entry point and its config/artifact formats.

extern crate blas_src;

pub mod cli;
pub mod cue;
pub mod dynamics;
pub mod error;
pub mod init;
pub mod loss;
pub mod model;
pub mod sympoly;
pub mod train;

pub use error::{Error, Result};
