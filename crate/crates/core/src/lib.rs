//! Whole-organ reconstruction from monocular fisheye endoscope sequences.
//!
//! The pipeline runs single-channel frames through feature extraction, exhaustive
//! matching and incremental structure-from-motion, turns the sparse cloud into a closed
//! mesh with screened Poisson reconstruction, and textures it from the registered views.
//! [`synth`] renders ground-truth scenes for evaluating every stage.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod error;
pub mod features;
pub mod geometry;
pub mod io;
pub mod lm;
pub mod meshgen;
pub mod pipeline;
pub mod preprocess;
pub mod sfm;
pub mod synth;
pub mod texturing;

pub use error::{Error, Result};
