//! Experiment runner for uncertainty-quantified physics-informed neural
//! networks: configuration, method pipelines, and run-directory comparison.

pub mod compare;
pub mod config;
pub mod pipeline;
