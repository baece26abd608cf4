//! Pinhole cameras and rays.
//!
//! Right-handed camera frame looking down `-z`, `+y` up, image rows growing
//! downwards. Pixel `(x, y)` addresses continuous image coordinates; the
//! center of pixel `(i, j)` is `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub pixel: [f64; 2],
    pub camera_id: usize,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
            pixel: [0.0, 0.0],
            camera_id: usize::MAX,
        }
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }

    /// Distance at which the ray leaves the box `[min, max]`; infinite when
    /// it never does.
    pub fn box_exit(&self, min: &[f64; 3], max: &[f64; 3]) -> f64 {
        (0..3)
            .filter_map(|k| {
                let d = self.direction[k];
                if d > 0.0 {
                    Some((max[k] - self.origin[k]) / d)
                } else if d < 0.0 {
                    Some((min[k] - self.origin[k]) / d)
                } else {
                    None
                }
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// `far` shortened to the box exit, kept just beyond `near`.
    pub fn clip_far(&self, near: f64, far: f64, bounds: Option<&[[f64; 3]; 2]>) -> f64 {
        match bounds {
            Some([lo, hi]) => self.box_exit(lo, hi).min(far).max(near + 1e-3 * (far - near)),
            None => far,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub principal: [f64; 2],
    /// Camera-to-world rotation; columns are the camera axes in world space.
    pub rotation: Matrix3<f64>,
    pub origin: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        width: usize,
        height: usize,
        focal: f64,
        principal: [f64; 2],
        rotation: Matrix3<f64>,
        origin: Vector3<f64>,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("camera with empty image".into()));
        }
        if !(focal > 0.0) {
            return Err(Error::InvalidInput(format!("focal must be positive, got {focal}")));
        }
        if !(near > 0.0 && near < far) {
            return Err(Error::InvalidInput(format!(
                "need 0 < near < far, got near={near} far={far}"
            )));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho <= 1e-6) || rotation.determinant() < 0.0 {
            return Err(Error::InvalidInput(format!(
                "camera rotation is not a proper rotation (|R^T R - I| = {ortho:e})"
            )));
        }
        Ok(Self {
            id,
            width,
            height,
            focal,
            principal,
            rotation,
            origin,
            near,
            far,
        })
    }

    /// Camera at `eye` looking at `target` with the principal point at the image center.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        id: usize,
        width: usize,
        height: usize,
        fov_x: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let back = (eye - target).normalize();
        let right = up.cross(&back);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidInput("look_at: up is parallel to view direction".into()));
        }
        let right = right.normalize();
        let true_up = back.cross(&right);
        let rotation = Matrix3::from_columns(&[right, true_up, back]);
        let focal = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(
            id,
            width,
            height,
            focal,
            [0.5 * width as f64, 0.5 * height as f64],
            rotation,
            eye,
            near,
            far,
        )
    }

    pub fn optical_axis(&self) -> Vector3<f64> {
        -self.rotation.column(2).into_owned()
    }

    pub fn pixel_in_bounds(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
    }

    /// Unnormalized world-space direction through continuous pixel `(x, y)`.
    pub fn pixel_direction(&self, x: f64, y: f64) -> Vector3<f64> {
        let local = Vector3::new(
            (x - self.principal[0]) / self.focal,
            -(y - self.principal[1]) / self.focal,
            -1.0,
        );
        self.rotation * local
    }

    /// Derivatives of [`Camera::pixel_direction`] with respect to `x` and `y`.
    pub fn pixel_direction_derivatives(&self) -> (Vector3<f64>, Vector3<f64>) {
        let dx = self.rotation * Vector3::new(1.0 / self.focal, 0.0, 0.0);
        let dy = self.rotation * Vector3::new(0.0, -1.0 / self.focal, 0.0);
        (dx, dy)
    }

    pub fn camera_ray(&self, x: f64, y: f64) -> Result<Ray> {
        if !self.pixel_in_bounds(x, y) {
            return Err(Error::PixelOutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.ray_unchecked(x, y))
    }

    pub(crate) fn ray_unchecked(&self, x: f64, y: f64) -> Ray {
        Ray {
            origin: self.origin,
            direction: self.pixel_direction(x, y).normalize(),
            pixel: [x, y],
            camera_id: self.id,
        }
    }

    /// Ray through the center of integer pixel `(i, j)`.
    pub fn pixel_center_ray(&self, i: usize, j: usize) -> Ray {
        self.ray_unchecked(i as f64 + 0.5, j as f64 + 0.5)
    }

    /// Point at ray-parameter `depth` along the ray through `(x, y)`.
    pub fn unproject(&self, x: f64, y: f64, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::InvalidInput(format!("unproject depth must be positive, got {depth}")));
        }
        Ok(self.camera_ray(x, y)?.at(depth))
    }

    /// Projects `point` into this camera. Returns the continuous pixel and the
    /// ray-parameter depth, or `None` when the point is not in front of the camera.
    pub fn reproject(&self, point: &Vector3<f64>) -> Option<([f64; 2], f64)> {
        let rel = point - self.origin;
        let local = self.rotation.transpose() * rel;
        if !(local.z < 0.0) {
            return None;
        }
        let w = -local.z;
        let x = self.principal[0] + self.focal * local.x / w;
        let y = self.principal[1] - self.focal * local.y / w;
        Some(([x, y], rel.norm()))
    }

    /// 4x4 camera-to-world transform.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.origin);
        m
    }

    pub fn to_record(&self) -> CameraRecord {
        let m = self.to_matrix();
        CameraRecord {
            id: self.id,
            width: self.width,
            height: self.height,
            focal: self.focal,
            principal: self.principal,
            near: self.near,
            far: self.far,
            transform_matrix: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
        }
    }

    pub fn from_record(rec: &CameraRecord) -> Result<Self> {
        let t = &rec.transform_matrix;
        let rotation = Matrix3::from_fn(|r, c| t[r][c]);
        let origin = Vector3::new(t[0][3], t[1][3], t[2][3]);
        Self::new(
            rec.id,
            rec.width,
            rec.height,
            rec.focal,
            rec.principal,
            rotation,
            origin,
            rec.near,
            rec.far,
        )
    }
}

/// Serialized camera: intrinsics plus a row-major 4x4 camera-to-world matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub principal: [f64; 2],
    pub near: f64,
    pub far: f64,
    pub transform_matrix: [[f64; 4]; 4],
}

/// Angle between the optical axes of two cameras, in radians.
pub fn optical_axis_angle(a: &Camera, b: &Camera) -> f64 {
    let c = a.optical_axis().dot(&b.optical_axis()).clamp(-1.0, 1.0);
    c.acos()
}

pub fn reflect_direction(d: &Vector3<f64>, n: &Vector3<f64>) -> Vector3<f64> {
    d - n * (2.0 * d.dot(n))
}
