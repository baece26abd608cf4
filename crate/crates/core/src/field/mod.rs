//! Trainable radiance field, ray sampling, and differentiable volume rendering.

pub mod encoding;
pub mod mlp;
pub mod optim;
pub mod render;
pub mod sampling;
pub mod train;

pub use encoding::{encode_position, encoded_len};
pub use mlp::{FieldArch, FieldBatch, RadianceField};
pub use render::{composite, composite_backward, render_ray, RayRenderResult};
pub use sampling::{sample_hierarchical, sample_stratified, RaySamples};

/// Anything that maps world positions to volume density.
pub trait DensityQuery {
    fn density(&self, positions: &[[f64; 3]]) -> Vec<f64>;
}

impl DensityQuery for RadianceField {
    fn density(&self, positions: &[[f64; 3]]) -> Vec<f64> {
        self.forward(positions, None).sigma
    }
}
