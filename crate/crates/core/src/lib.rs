//! Low-light image enhancement by iterated pixel-wise curve adjustment, with
//! the per-pixel curve coefficients chosen by an asynchronous advantage
//! actor-critic agent rewarded for aesthetic improvement, color constancy,
//! smoothness and exposure.

pub mod agent;
pub mod config;
pub mod curve;
pub mod dataset;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod reward;
