//! Non-volume-preserving fusion (NVPF) for group-level classification.
//!
//! The pipeline: a compact convolutional extractor turns each face crop
//! into an M-dimensional feature; detected faces are clustered into
//! spatial groups; each group's features are stacked into a matrix `S`
//! and pushed through an invertible stack of affine coupling units whose
//! exact log-det Jacobian makes class-conditional densities tractable.
//! Classification picks the class-conditional Gaussian prior that assigns
//! the fused feature the highest likelihood. A temporal extension feeds
//! per-frame fused features through a gated recurrence for video-level
//! prediction.
//!
//! Everything runs on a small reverse-mode autodiff core ([`tape`]) over
//! dense `f64` tensors ([`tensor`]), with finite-difference verification
//! ([`gradcheck`]) wired into the test suite.

pub mod baseline;
pub mod config;
pub mod data;
pub mod emonet;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod gradsuite;
pub mod grouping;
pub mod harness;
pub mod inspect;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod serialize;
pub mod synth;
pub mod tape;
pub mod temporal;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
