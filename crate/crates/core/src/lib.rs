//! Dyadic movement-synchrony estimation from skeleton keypoints.
//!
//! Pipeline: keypoint files ([`pose`]) are filtered, resampled to a fixed
//! length and normalized; sequences feed the spatial-temporal transformer
//! ([`sttf`]) and the cross-similarity branch ([`similarity`], [`csmnet`]);
//! [`baselines`] provides the classical comparisons and [`eval`] fuses and
//! scores predictions. [`synth`] generates labeled data for desk-scale runs.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod csmnet;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod matrix_io;
pub mod params;
pub mod pipeline;
pub mod pose;
pub mod rng;
pub mod similarity;
pub mod sttf;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorKind, Result};
