//! Mirror-aware radiance field reconstruction.
//!
//! The pipeline trains a small radiance field on posed images, scores pixels
//! whose renders stay structurally wrong while their depth is confident,
//! fits bounded planar primitives to those regions, and finally refines the
//! field together with the mirror geometry using explicit reflections and
//! differentiable antialiased mirror masks.

pub mod error;
pub mod field;
pub mod losses;
pub mod mirror_detect;
pub mod pipeline;
pub mod reflect_render;
pub mod scene;
pub mod scoring;

pub use error::{Error, Result};
