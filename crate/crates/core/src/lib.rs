//! Uncertainty quantification for physics-informed neural networks.
//!
//! The crate provides a small tanh-MLP engine with forward-mode second-order
//! jets and a hand-rolled reverse sweep for parameter gradients, physics
//! residual operators (Van der Pol oscillator and 2-D incompressible RANS
//! with unclosed Reynolds-force fields), tempered Bayesian posteriors sampled
//! with HMC/NUTS, MC-dropout and repulsive deep-ensemble baselines, and
//! post-hoc recalibration of predictive standard deviations.

pub mod autodiff;
pub mod data_io;
pub mod error;
pub mod network;
pub mod physics;
pub mod posterior;
pub mod samplers;
pub mod trainers;
pub mod uq;

pub use error::{CoreError, Result};
