//! Adversarial posters and stickers against a compact single-shot grid
//! detector, optimized under an expectation over simulated physical
//! conditions and scene placements.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training and attacks,
//! `f64` for gradient checks). The aliases below name the concrete `f32`
//! types used by the pipeline.

pub mod attack;
pub mod detector;
pub mod difftrans;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod scalar;
pub mod scenegen;
pub mod seed;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `H × W × C` array of unit-interval intensities.
pub type Image<T> = ndarray::Array3<T>;

pub type ImageF32 = Image<f32>;
pub type Texture = scenegen::CanonicalTexture<f32>;
pub type Scene = scenegen::SceneSample<f32>;
pub type Detector = detector::DetectorParams<f32>;
pub type Detector64 = detector::DetectorParams<f64>;
pub type Patch = attack::PatchSpec<f32>;
