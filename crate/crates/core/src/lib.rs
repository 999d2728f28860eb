//! Hyperparameter scaling rules for large-batch training with exponential
//! moving averages, plus discrete-chain and SDE simulators that measure how
//! well the rules preserve training dynamics.
//!
//! The central objects are the scaling rules (linear and square-root
//! learning-rate rules, the exponential EMA momentum rule rho-hat = rho^kappa,
//! weight-decay transformations), closed-form multi-step EMA transition maps,
//! and a set of desk-scale experiments (noisy parabola, optimal-momentum
//! search, toy Polyak-Ruppert classifier, toy self-distillation) that compare
//! scaled runs against their baselines at aligned continuous times.

pub mod core;
pub mod ema;
mod error;
pub mod experiments;
pub mod optim;
pub mod scaling;
pub mod sde;

pub use error::{Error, Result};
