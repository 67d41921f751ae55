//! Multi-task face and landmark detection pipeline.
//!
//! The crate covers anchor geometry and matching, the detection and keypoint
//! losses with analytic gradients, RoIAlign and keypoint mask coding,
//! suppression and test-time fusion, evaluation metrics, a procedural scene
//! generator, and a small reverse-mode differentiable model that trains the
//! whole pipeline end to end on synthetic data.
//!
//! Geometry, losses, pooling, suppression and metrics are generic over
//! [`Scalar`] (`f32` or `f64`). The aliases below fix the scalar for callers
//! that do not care.

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod roialign;
pub mod scalar;
pub mod suppression;
pub mod synthdata;
pub mod toytrain;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Box64 = geometry::BBox<f64>;
pub type Box32 = geometry::BBox<f32>;
pub type BoxDelta64 = geometry::BoxDelta<f64>;
pub type AnchorGrid64 = geometry::AnchorGrid<f64>;
pub type Detection64 = suppression::Detection<f64>;
pub type Detection32 = suppression::Detection<f32>;
pub type FeatureMap64 = roialign::FeatureMap<f64>;
