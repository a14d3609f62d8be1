//! Conditional Karhunen-Loeve field representations with basis-adaptation
//! surrogates for a 2-D groundwater (Darcy) testbed.
//!
//! The crate covers the full workflow on a synthetic rectangular domain:
//!
//! * [`gp`] — Gaussian-process models of the log-transmissivity field and
//!   Kriging conditioning on direct point measurements.
//! * [`kle`] — discretized Mercer eigenproblem and truncated (conditional)
//!   Karhunen-Loeve expansions, plus coefficient sampling.
//! * [`darcy`] — finite-volume forward solver for steady saturated flow and
//!   extraction of hydraulic-head observables.
//! * [`pce`] — normalized probabilists' Hermite chaos with
//!   Smolyak-Gauss-Hermite projection.
//! * [`ba`] — basis adaptation: dominant directions via basis pursuit
//!   denoising and KD / Kx1D ridge surrogates.
//! * [`uq`] — kernel density estimation and PDF comparison metrics.
//! * [`inverse`] — surrogate-based (BA-MAP) and full-solver (CKLEMAP)
//!   trust-region MAP estimation of the field.
//! * [`pipeline`] — experiment orchestration, persistence formats, and the
//!   `ckba` CLI stages.

pub mod ba;
pub mod darcy;
pub mod error;
pub mod gp;
pub mod inverse;
pub mod kle;
pub mod linalg;
pub mod pce;
pub mod pipeline;
pub mod rng;
pub mod uq;

pub use error::{Error, Result};
