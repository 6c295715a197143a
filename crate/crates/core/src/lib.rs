//! Generalized Lasso estimation under model mismatch.
//!
//! The crate is organised around the pipeline used to study constrained
//! least squares on semi-parametric data:
//!
//! * [`model_gen`] draws latent factors, mixes them into observed inputs and
//!   produces outputs for a menu of observation models.
//! * [`mismatch_lab`] measures the mismatch covariance / deviation of a
//!   candidate parameter vector and constructs the target vectors that
//!   minimise the mismatch covariance for each model family.
//! * [`geometry`] estimates Gaussian mean widths of hypothesis sets and turns
//!   them into sample-size requirements.
//! * [`solver`] solves the constrained least-squares program by projected
//!   gradient descent.
//! * [`experiment`] wires everything into reproducible, config-driven sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod geometry;
pub mod mismatch_lab;
pub mod model_gen;
pub mod par;
pub mod quadrature;
pub mod rng;
mod serde_la;
pub mod solver;

pub use error::{Error, Result};
pub use geometry::{HypothesisSet, WidthEstimate, WidthKind};
pub use mismatch_lab::{MismatchReport, TargetVector};
pub use model_gen::{
    LatentDistribution, LatentKind, MixingMatrix, MultiFn, ObservationModel, OutputFn, SampleSet,
};
pub use par::Execution;
pub use solver::{FitResult, SolverConfig};
