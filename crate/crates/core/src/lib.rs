//! Static mask priors for distractor-free Gaussian splatting from sparse
//! views.
//!
//! The pipeline matches entity masks across views through the global
//! attention of a geometry foundation model, checks geometric agreement with
//! Chamfer distance, lets a vision-language model rescue large static regions
//! the geometric test misses, and assembles per-image binary priors. A
//! warm-up scheduler hands those priors to a residual-driven mask model.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the double-precision instantiation used by the
//! pipeline.

pub mod attention_match;
pub mod camera;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod pipeline;
pub mod prior;
pub mod scalar;
pub mod scene_io;
pub mod synth;
pub mod tokenizer;
pub mod vlm;
pub mod warmup;

pub use config::{PipelineConfig, VlmConfig, VlmMode, WarmupConfig};
pub use error::{Error, Result};
pub use grid::{Grid, Mask};
pub use scene_io::{load_scene, write_scene, EntityMask, SceneBundle, ViewRecord};

/// Double-precision camera.
pub type Camera = camera::CameraParams<f64>;
/// Double-precision point set.
pub type PointSet = geometry::PointSet<f64>;
/// Double-precision depth alignment.
pub type AlignmentModel = geometry::AlignmentModel<f64>;
/// Double-precision warm-up state.
pub type WarmupState = warmup::WarmupState<f64>;
/// Double-precision residual frame.
pub type ResidualFrame = warmup::ResidualFrame<f64>;
