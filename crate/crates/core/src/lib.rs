//! Instant-level scene generation, adversarial texture optimization and
//! vehicle detection evaluation.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom of this file fix the scalar for common uses. File formats and
//! the command-line front end use `f64`.

pub mod attack;
pub mod case_graph;
pub mod compositor;
pub mod dataset;
pub mod detector;
pub mod evaluator;
pub mod geometry;
pub mod renderer;
pub mod scalar;
pub mod scene;

pub use geometry::{BBox, Rgb, Vec3};
pub use scalar::Scalar;

pub type Mesh64 = scene::Mesh<f64>;
pub type Mesh32 = scene::Mesh<f32>;
pub type Texture64 = scene::Texture<f64>;
pub type Texture32 = scene::Texture<f32>;
pub type Image64 = scene::Image<f64>;
pub type Image32 = scene::Image<f32>;
pub type Pose64 = scene::Pose<f64>;
pub type Env64 = scene::EnvironmentParams<f64>;
pub type SceneInstance64 = scene::SceneInstance<f64>;
pub type BuiltScene64 = compositor::BuiltScene<f64>;
pub type CaseGraph64 = case_graph::CaseGraph<f64>;
pub type Manifest64 = dataset::Manifest<f64>;
pub type ToyDetector64 = detector::ToyDetectorModel<f64>;
pub type ToyDetector32 = detector::ToyDetectorModel<f32>;
pub type Detection64 = detector::Detection<f64>;
