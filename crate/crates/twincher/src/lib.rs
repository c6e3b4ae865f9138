//! Bijective representation learning for inverse problems.
//!
//! This crate implements invertible "Twincher" transforms whose distilled
//! latent subspace is trained to align bijectively with the generative
//! parameters of a black-box forward process, together with the synthetic
//! benchmark family, baseline learner, and experiment harness used to
//! evaluate them.
//!
//! Module map:
//! - [`forward`]: seeded synthetic forward processes (harmonic entangler,
//!   spiral), observation-noise channels, query-budget accounting;
//! - [`flow`]: the invertible transform with exact forward, inverse,
//!   Jacobian, and parameter gradients;
//! - [`nets`]: small dense networks, Adam, early-stopped training;
//! - [`solve`]: clipped regularized Gauss-Newton refinement and numerical
//!   Jacobians;
//! - [`learners`]: the baseline and Twincher learners, training losses,
//!   exploration, and acquisition scoring;
//! - [`bench`]: complexity estimation and the reproducible experiment
//!   protocols;
//! - [`gradcheck`]: finite-difference oracles for every analytic gradient;
//! - [`report`]: CSV and checkpoint text formatting.

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod flow;
pub mod forward;
pub mod gradcheck;
pub mod learners;
pub mod nets;
pub mod report;
pub mod rng;
pub mod solve;

pub use error::{Error, Result};
