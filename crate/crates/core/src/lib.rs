//! Featuremetric refinement of sparse Structure-from-Motion reconstructions.
//!
//! Keypoints are adjusted per tentative track by aligning dense features
//! sampled at their locations, then structure (and optionally poses) are
//! refined by a bundle adjustment whose residuals are feature differences
//! instead of reprojection errors.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod eval;
pub mod features;
pub mod io;
pub mod keypoint_adjust;
pub mod matching;
pub mod optim;
pub mod pipeline;
pub mod scene;
pub mod synth;
