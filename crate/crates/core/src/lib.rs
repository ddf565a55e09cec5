//! Kalman-type state estimation, classic and learning-aided.
//!
//! The crate covers model-based filters and smoothers (KF, EKF, RTS,
//! bootstrap particle filter, gradient-ascent MAP smoother), a small
//! reverse-mode differentiation substrate, three learning-aided filters
//! (learned Kalman gain, recurrent Gaussian prior, augmented physics-based
//! model) and the Lorenz sampling-mismatch benchmark that compares them.

pub mod apbm;
pub mod bench;
pub mod danse;
pub mod error;
pub mod filters;
pub mod gaussmath;
pub mod knet;
pub mod nn;
pub mod ssm;

pub use error::{Error, Result};
