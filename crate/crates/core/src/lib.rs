//! Differentially private gradient pipelines (clip, noise, compress), Monte
//! Carlo bias/variance analysis of the resulting gradient error,
//! minimal-error clipping, and the Denoise velocity/acceleration scheme,
//! plus a small training harness for synthetic tasks.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod clipping;
pub mod compress;
pub mod config;
pub mod denoise;
pub mod dp;
pub mod dump;
pub mod error;
pub mod error_analysis;
pub mod grad;
pub mod harness;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
pub use grad::{
    l2_norm, mean_gradient, sphere_project, GradientVector, LayerSpec, Layout, SampleBatchGradients,
};
pub use rng::RngStream;
