//! Numerical laboratory for weight balancing in long-tailed recognition.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`], [`rng`]: dense matrices, factorizations, deterministic streams;
//! - [`dataset`]: long-tailed profiles, synthetic blobs, IDX files, groups;
//! - [`network`]: MLP / residual feature extractors with batch normalization
//!   and a linear head, with exact reverse-mode gradients;
//! - [`losses`]: cross entropy, class-balanced loss, weight decay, feature
//!   regularization, MaxNorm projection;
//! - [`classifier`]: ETF heads and logit adjustment;
//! - [`trainer`]: SGD with momentum, cosine schedule, method presets;
//! - [`metrics`]: FDR, cosine heatmaps, norms, BN statistics, forgetting,
//!   random-probe FDR;
//! - [`theory`]: numerical checkers for the cone bound, the harmonic-ratio
//!   closed form and the second-stage stationary point.

pub mod classifier;
pub mod dataset;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod table;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use rng::RngStream;
