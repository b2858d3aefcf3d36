//! Residualized temporal sparse autoencoders over multi-timestep activation
//! trajectories.
//!
//! The pipeline: normalize activations per timestep block, fit closed-form
//! ridge predictors between neighboring blocks, train a BatchTopK (or
//! Matryoshka) sparse autoencoder on the residualized trajectory
//! representation, evaluate teacher-forced reconstruction in original
//! activation units, and derive activation-space decoder trajectories for
//! feature analysis and steering.

pub mod analysis;
pub mod dataset;
pub mod evalmetrics;
pub mod linalg;
pub mod residualize;
pub mod sae;
pub mod steering;
pub mod wire;
