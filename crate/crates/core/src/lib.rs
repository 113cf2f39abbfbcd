//! Decomposition-driven univariate forecasting:
//!
//! * [`vmd`] — variational mode decomposition of a finite signal via ADMM in
//!   the frequency domain.
//! * [`windowing`] — rolling input–target windows and causality-preserving
//!   sample-wise decomposition, with an on-disk mode cache.
//! * [`criteria`] — forecastability (AR residual) and mutual-information
//!   scores for a candidate decomposition.
//! * [`bilevel`] — leader/follower search selecting the mode count K and
//!   bandwidth penalty alpha.
//! * [`nn`] — a small dense-tensor reverse-mode autodiff engine (f64).
//! * [`forecaster`] — per-mode frequency-aware embeddings, parallel TCN
//!   branches, MLP fusion, training and evaluation.

pub mod bilevel;
pub mod criteria;
pub mod forecaster;
pub mod io;
pub mod nn;
pub mod rng;
pub mod signal;
pub mod synthetic;
pub mod vmd;
pub mod windowing;

pub use signal::{Signal, SignalError};
pub use vmd::{decompose, reconstruct, Boundary, OmegaInit, VmdConfig, VmdError, VmdResult};
