//! Subspace modeling and class-conditional density estimation over
//! pre-extracted deep-network feature vectors, with log-likelihood and
//! feature-reconstruction-error confidence scores for out-of-distribution
//! detection.
//!
//! The pipeline: fit a linear (PCA) or nonlinear (RBF kernel PCA) subspace
//! to training features, fit class-conditional densities in the reduced
//! space, then score test samples by maximum class log-likelihood and by
//! the L2 distance between a sample and the pre-image of its embedding.

pub mod codec;
pub mod config;
pub mod container;
pub mod density;
pub mod error;
pub mod eval;
pub mod feature_store;
pub mod kernel_subspace;
pub mod linear_subspace;
pub mod pipeline;
pub mod rng;
pub mod synthbench;
pub mod tuning;

pub use error::{Error, ErrorClass, Result};
pub use feature_store::{FeatureFormat, FeatureSet, RankReport};
