//! Parameter identification for a stochastic discrete logistic population
//! model with affine observation.
//!
//! The continuous state is quantized onto a uniform grid, which turns the
//! model into a finite hidden Markov model. On top of the scaled
//! forward-backward recursions sit two estimators:
//!
//! * [`aig`]: offline, batch EM over a block of observations;
//! * [`are`]: online, one stochastic-approximation step per observation.
//!
//! [`oracle`] holds brute-force validators used by the tests and the
//! `verify` command.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aig;
pub mod are;
pub mod cli;
pub mod config;
pub mod error;
pub mod fb;
pub mod grid;
pub mod hmm;
pub mod io;
pub mod model;
pub mod oracle;
pub mod verify;

pub use error::{Error, Param, Result};
pub use model::{Lambda, SimConfig, Trajectory};
