//! Safe deep FBSDE controllers: stochastic optimal control with a
//! differentiable control-barrier-function QP layer.
//!
//! The pieces, bottom up:
//!
//! * [`dynamics`] - control-affine SDE models and Euler–Maruyama stepping.
//! * [`barrier`] - zeroing barrier functions and their QP constraint rows.
//! * [`qp`] - interior-point QP solver, its KKT backward pass and a brute-force oracle.
//! * [`network`] - the two-layer LSTM value-gradient network.
//! * [`diff_engine`] - reverse-mode gradients of the whole training iteration.
//! * [`trainer`] - rollouts, loss, Adam and the training loop.
//! * [`verifier`] - Monte Carlo safety checks and worst-case extraction.
//! * [`config`] - task presets and run configuration.

pub mod barrier;
pub mod cli;
pub mod config;


pub mod diff_engine;
pub mod dynamics;
pub mod error;
pub mod network;
pub mod parallel;
pub mod qp;
pub mod scalar;
pub mod trainer;
pub mod verifier;


pub use error::{Error, Result};
