//! Collaborative 3D detection from sparse labels with a static teacher, an
//! EMA dynamic teacher and a student, on synthetic bird's-eye-view scenes.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the file-level
//! pipeline runs in `f64`.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod mining;
pub mod pipeline;
pub mod scalar;
pub mod scenes;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use scalar::Real;

pub type BoxBev64 = geometry::BoxBev<f64>;
pub type BoxBev32 = geometry::BoxBev<f32>;
pub type AnchorGrid64 = geometry::AnchorGrid<f64>;
pub type AnchorGrid32 = geometry::AnchorGrid<f32>;
pub type Scene64 = scenes::Scene<f64>;
pub type Scene32 = scenes::Scene<f32>;
pub type DetectorState64 = detector::DetectorState<f64>;
pub type DetectorState32 = detector::DetectorState<f32>;
pub type Prediction64 = detector::Prediction<f64>;
pub type Prediction32 = detector::Prediction<f32>;
