//! Variational inverse-problem solver with robust normalizing flows.
//!
//! Solves imaging inverse problems by fitting a flow-based approximate
//! posterior against a single measurement: no training data, full posterior
//! samples, pixel-wise uncertainty maps. The moving parts:
//!
//! - [`diffcore`] — flat parameter store, MLP conditioners, reverse-mode
//!   gradients over a fixed op set, Adam.
//! - [`sampling`] — latent designs (SRS/LHS/maximin/PSS/LPSS/Sobol) and the
//!   Gaussian transform.
//! - [`flows`] — coupling-layer flow stacks with exact log-density, the
//!   finite-difference Lipschitz penalty, and MLE density fitting.
//! - [`boosting`] — gradient-boosted mixtures of flows with stage-weight SGD.
//! - [`forward_ops`] — measurement models (masked Fourier, sparse
//!   visibilities, image-defined 2-D densities) and synthetic phantoms.
//! - [`variational`] — the total-loss assembly and posterior fitting loop.
//! - [`metrics`] — precision/recall/density/coverage, posterior statistics,
//!   mode clustering, variance studies.
//! - [`io`] — CSV, PGM, raw float32, and model blob formats.

pub mod boosting;
pub mod diffcore;
pub mod error;
pub mod flows;
pub mod forward_ops;
pub mod io;
pub mod metrics;
pub mod sampling;
pub mod variational;

pub use error::{Error, Result};
