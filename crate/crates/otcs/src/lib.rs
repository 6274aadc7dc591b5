//! Coupling estimation between unpaired (or partially paired) sample sets
//! via L2-regularized optimal transport with parameterized dual potentials,
//! plus a conditional score-based diffusion model trained against that
//! coupling by resampling-by-compatibility, and reverse-SDE samplers for
//! generating conditionally.
//!
//! The pipeline, end to end:
//!
//! 1. [`ot`] defines the transport problem: ground costs, empirical
//!    measures, keypoints, relation vectors, masks.
//! 2. [`potentials`] trains dual potentials `(u, v)` by stochastic ascent
//!    and exposes the compatibility `H` and the reconstructed plan.
//! 3. [`oracle`] solves the same problem exactly on small supports, as
//!    ground truth.
//! 4. [`sde`] provides the forward VE/VP diffusion and its closed-form
//!    perturbation kernels.
//! 5. [`score`] is the conditional score network; [`cdsm`] trains it against
//!    the coupling with resampling-by-compatibility.
//! 6. [`samplers`] integrates the reverse SDE (Euler–Maruyama or
//!    predictor–corrector), including the guided SCONES baseline.
//! 7. [`metrics`] measures how close generated conditionals are to the plan.
//!
//! The `otcs` binary drives all of this from flat key-value config files;
//! see the book under `book/` for a guided tour.

pub mod cdsm;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod ot;
pub mod plan;
pub mod potentials;
pub mod rng;
pub mod samplers;
pub mod score;
pub mod sde;

pub use error::{Error, Result};
