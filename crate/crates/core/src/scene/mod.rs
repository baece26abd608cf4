//! Cameras, rays, images, and ray-primitive geometry shared by every stage.

pub mod camera;
pub mod dual;
pub mod image;
pub mod primitive;

pub use camera::{optical_axis_angle, reflect_direction, Camera, CameraRecord, Ray};
pub use image::ImageBuffer;
pub use primitive::{Hit, IntersectOptions, MirrorPrimitive, PrimitiveKind, PrimitiveRecord, PRIM_PARAMS};
