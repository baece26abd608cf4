//! Bounded mirror primitives and ray intersection.

use nalgebra::{Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use super::camera::Ray;
use super::dual::{self, Dual, Real, V3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Rect,
    Cylinder,
}

/// A mirror surface. For `Rect` the surface spans `center + a*u + b*v` with
/// `|a| <= half_extents[0]`, `|b| <= half_extents[1]`. For `Cylinder` the axis
/// is `v`, `half_extents = (radius, half_height)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MirrorPrimitive {
    pub kind: PrimitiveKind,
    pub center: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub n: Vector3<f64>,
    pub half_extents: [f64; 2],
    pub active: bool,
}

/// Number of trainable parameters of a primitive: center, rotation increment, half extents.
pub const PRIM_PARAMS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntersectOptions {
    /// Minimum accepted hit distance.
    pub eps_t: f64,
    /// Only accept hits on the side the normal points to.
    pub single_sided: bool,
}

impl IntersectOptions {
    pub fn for_scene(diameter: f64) -> Self {
        Self {
            eps_t: 1e-4 * diameter,
            single_sided: false,
        }
    }
}

impl Default for IntersectOptions {
    fn default() -> Self {
        Self {
            eps_t: 1e-6,
            single_sided: false,
        }
    }
}

/// Primitive geometry over a generic scalar, used for parameter derivatives.
#[derive(Debug, Clone, Copy)]
pub struct PrimitiveFrame<T> {
    pub center: V3<T>,
    pub u: V3<T>,
    pub v: V3<T>,
    pub n: V3<T>,
    pub half: [T; 2],
}

impl MirrorPrimitive {
    pub fn rect(center: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, half_extents: [f64; 2]) -> Result<Self> {
        Self::new(PrimitiveKind::Rect, center, u, v, half_extents)
    }

    pub fn new(
        kind: PrimitiveKind,
        center: Vector3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
        half_extents: [f64; 2],
    ) -> Result<Self> {
        let prim = Self {
            kind,
            center,
            u,
            v,
            n: u.cross(&v),
            half_extents,
            active: true,
        };
        prim.validate()?;
        Ok(prim)
    }

    pub fn validate(&self) -> Result<()> {
        let err = (self.u.norm() - 1.0)
            .abs()
            .max((self.v.norm() - 1.0).abs())
            .max(self.u.dot(&self.v).abs())
            .max((self.u.cross(&self.v) - self.n).norm());
        if !(err <= 1e-6) {
            return Err(Error::InvalidInput(format!("primitive frame not orthonormal (error {err:e})")));
        }
        if !(self.half_extents[0] > 0.0 && self.half_extents[1] > 0.0) {
            return Err(Error::InvalidInput(format!(
                "primitive half extents must be positive, got {:?}",
                self.half_extents
            )));
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidInput("primitive center not finite".into()));
        }
        Ok(())
    }

    /// Gram-Schmidt on (u, v) keeping the direction of `u`, then `n = u x v`.
    pub fn reorthonormalize(&mut self) {
        let u = self.u.normalize();
        let v = (self.v - u * u.dot(&self.v)).normalize();
        self.u = u;
        self.v = v;
        self.n = u.cross(&v);
    }

    /// Signed distance of `p` to the unbounded surface (plane or infinite cylinder).
    pub fn unbounded_distance(&self, p: &Vector3<f64>) -> f64 {
        let w = p - self.center;
        match self.kind {
            PrimitiveKind::Rect => w.dot(&self.n),
            PrimitiveKind::Cylinder => {
                let radial = w - self.v * w.dot(&self.v);
                radial.norm() - self.half_extents[0]
            }
        }
    }

    /// Surface normal of the unbounded shape at the projection of `p`.
    pub fn normal_at(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match self.kind {
            PrimitiveKind::Rect => self.n,
            PrimitiveKind::Cylinder => {
                let w = p - self.center;
                let radial = w - self.v * w.dot(&self.v);
                let len = radial.norm();
                if len > 0.0 {
                    radial / len
                } else {
                    self.u
                }
            }
        }
    }

    pub fn intersect(&self, ray: &Ray, opts: &IntersectOptions) -> Option<Hit> {
        if !self.active {
            return None;
        }
        match self.kind {
            PrimitiveKind::Rect => self.intersect_rect(ray, opts),
            PrimitiveKind::Cylinder => self.intersect_cylinder(ray, opts),
        }
    }

    /// Intersection with the unbounded plane of a rect, ignoring its extent.
    pub fn intersect_plane(&self, ray: &Ray, opts: &IntersectOptions) -> Option<f64> {
        let denom = ray.direction.dot(&self.n);
        if denom.abs() < 1e-12 || (opts.single_sided && denom >= 0.0) {
            return None;
        }
        let t = (self.center - ray.origin).dot(&self.n) / denom;
        (t > opts.eps_t).then_some(t)
    }

    fn intersect_rect(&self, ray: &Ray, opts: &IntersectOptions) -> Option<Hit> {
        let t = self.intersect_plane(ray, opts)?;
        let point = ray.at(t);
        let w = point - self.center;
        let a = w.dot(&self.u);
        let b = w.dot(&self.v);
        if a.abs() <= self.half_extents[0] && b.abs() <= self.half_extents[1] {
            Some(Hit {
                t,
                point,
                normal: self.n,
            })
        } else {
            None
        }
    }

    fn intersect_cylinder(&self, ray: &Ray, opts: &IntersectOptions) -> Option<Hit> {
        let axis = self.v;
        let w = ray.origin - self.center;
        let d_perp = ray.direction - axis * ray.direction.dot(&axis);
        let w_perp = w - axis * w.dot(&axis);
        let a = d_perp.dot(&d_perp);
        if a < 1e-14 {
            return None;
        }
        let b = 2.0 * d_perp.dot(&w_perp);
        let c = w_perp.dot(&w_perp) - self.half_extents[0] * self.half_extents[0];
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
            if t <= opts.eps_t {
                continue;
            }
            let point = ray.at(t);
            let rel = point - self.center;
            if rel.dot(&axis).abs() > self.half_extents[1] {
                continue;
            }
            let normal = self.normal_at(&point);
            if opts.single_sided && ray.direction.dot(&normal) >= 0.0 {
                continue;
            }
            return Some(Hit { t, point, normal });
        }
        None
    }

    /// Frame seeded for derivatives with respect to the 8 primitive parameters
    /// `(center, rotation increment, half extents)` at the current value.
    pub fn dual_frame(&self) -> PrimitiveFrame<Dual<PRIM_PARAMS>> {
        let center = std::array::from_fn(|i| Dual::variable(self.center[i], i));
        let rotated = |axis: &Vector3<f64>| -> V3<Dual<PRIM_PARAMS>> {
            // d/d(omega_k) of exp([omega]) axis at omega = 0 is e_k x axis.
            let mut out: V3<Dual<PRIM_PARAMS>> = std::array::from_fn(|i| Dual::constant(axis[i]));
            for k in 0..3 {
                let e = Vector3::ith(k, 1.0);
                let de = e.cross(axis);
                for (i, o) in out.iter_mut().enumerate() {
                    o.g[3 + k] = de[i];
                }
            }
            out
        };
        PrimitiveFrame {
            center,
            u: rotated(&self.u),
            v: rotated(&self.v),
            n: rotated(&self.n),
            half: [
                Dual::variable(self.half_extents[0], 6),
                Dual::variable(self.half_extents[1], 7),
            ],
        }
    }

    pub fn plain_frame(&self) -> PrimitiveFrame<f64> {
        PrimitiveFrame {
            center: self.center.into(),
            u: self.u.into(),
            v: self.v.into(),
            n: self.n.into(),
            half: self.half_extents,
        }
    }

    /// Applies a parameter step: translation, rotation by the axis-angle vector
    /// `delta[3..6]`, and half-extent change. The frame is re-orthonormalized
    /// and half extents are clamped to at least `min_half`.
    pub fn stepped(&self, delta: &[f64; PRIM_PARAMS], min_half: f64) -> Self {
        let mut out = self.clone();
        out.center += Vector3::new(delta[0], delta[1], delta[2]);
        let omega = Vector3::new(delta[3], delta[4], delta[5]);
        let angle = omega.norm();
        if angle > 0.0 {
            let rot = Rotation3::from_axis_angle(&Unit::new_normalize(omega), angle);
            out.u = rot * out.u;
            out.v = rot * out.v;
        }
        out.reorthonormalize();
        out.half_extents[0] = (out.half_extents[0] + delta[6]).max(min_half);
        out.half_extents[1] = (out.half_extents[1] + delta[7]).max(min_half);
        out
    }

    pub fn to_record(&self) -> PrimitiveRecord {
        PrimitiveRecord {
            kind: self.kind,
            center: self.center.into(),
            frame: [self.u.into(), self.v.into(), self.n.into()],
            half_extents: self.half_extents,
        }
    }

    pub fn from_record(rec: &PrimitiveRecord) -> Result<Self> {
        let prim = Self {
            kind: rec.kind,
            center: rec.center.into(),
            u: rec.frame[0].into(),
            v: rec.frame[1].into(),
            n: rec.frame[2].into(),
            half_extents: rec.half_extents,
            active: true,
        };
        prim.validate()?;
        Ok(prim)
    }
}

/// JSON form of a primitive: frame rows are `u`, `v`, `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveRecord {
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    pub frame: [[f64; 3]; 3],
    pub half_extents: [f64; 2],
}

/// Ray depth to the plane of a rect frame over a generic scalar; `None` when the
/// ray is parallel to the plane.
pub fn plane_depth<T: Real>(origin: [f64; 3], dir: [f64; 3], frame: &PrimitiveFrame<T>) -> Option<T> {
    let o = dual::lift::<T>(origin);
    let d = dual::lift::<T>(dir);
    let denom = dual::dot(d, frame.n);
    if denom.value().abs() < 1e-12 {
        return None;
    }
    Some(dual::dot(dual::sub(frame.center, o), frame.n) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rect() -> MirrorPrimitive {
        MirrorPrimitive::rect(Vector3::zeros(), Vector3::x(), Vector3::y(), [1.0, 1.0]).unwrap()
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.random_range(0.0..3.1))
    }

    #[test]
    fn head_on_hit_and_miss() {
        let rect = unit_rect();
        let opts = IntersectOptions::default();
        let ray = Ray::new(Vector3::new(0.0, 0.0, 5.0), Vector3::new(0.0, 0.0, -1.0));
        let hit = rect.intersect(&ray, &opts).unwrap();
        assert!((hit.t - 5.0).abs() < 1e-12);
        assert!(hit.point.norm() < 1e-12);
        let mut far = rect.clone();
        far.center = Vector3::new(10.0, 0.0, 0.0);
        assert!(far.intersect(&ray, &opts).is_none());
    }

    #[test]
    fn double_and_single_sided() {
        let rect = unit_rect();
        let from_back = Ray::new(Vector3::new(0.2, 0.1, -3.0), Vector3::new(0.0, 0.0, 1.0));
        assert!(rect.intersect(&from_back, &IntersectOptions::default()).is_some());
        let single = IntersectOptions {
            single_sided: true,
            ..Default::default()
        };
        assert!(rect.intersect(&from_back, &single).is_none());
    }

    #[test]
    fn inactive_primitive_never_hits() {
        let mut rect = unit_rect();
        rect.active = false;
        let ray = Ray::new(Vector3::new(0.0, 0.0, 5.0), Vector3::new(0.0, 0.0, -1.0));
        assert!(rect.intersect(&ray, &IntersectOptions::default()).is_none());
    }

    /// Moller-Trumbore against the two triangles of the rect.
    fn mesh_raycast(rect: &MirrorPrimitive, ray: &Ray, eps: f64) -> Option<f64> {
        let c = rect.center;
        let (a, b) = (rect.u * rect.half_extents[0], rect.v * rect.half_extents[1]);
        let corners = [c - a - b, c + a - b, c + a + b, c - a + b];
        let tris = [[corners[0], corners[1], corners[2]], [corners[0], corners[2], corners[3]]];
        let mut best: Option<f64> = None;
        for [p0, p1, p2] in tris {
            let e1 = p1 - p0;
            let e2 = p2 - p0;
            let pv = ray.direction.cross(&e2);
            let det = e1.dot(&pv);
            if det.abs() < 1e-14 {
                continue;
            }
            let inv = 1.0 / det;
            let tv = ray.origin - p0;
            let bu = tv.dot(&pv) * inv;
            if !(-1e-12..=1.0 + 1e-12).contains(&bu) {
                continue;
            }
            let qv = tv.cross(&e1);
            let bv = ray.direction.dot(&qv) * inv;
            if bv < -1e-12 || bu + bv > 1.0 + 1e-12 {
                continue;
            }
            let t = e2.dot(&qv) * inv;
            if t > eps {
                best = Some(best.map_or(t, |x: f64| x.min(t)));
            }
        }
        best
    }

    #[test]
    fn analytic_matches_mesh_raycast() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let opts = IntersectOptions::default();
        let mut hits = 0;
        for _ in 0..1000 {
            let rot = random_rotation(&mut rng);
            let rect = MirrorPrimitive::rect(
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                rot * Vector3::x(),
                rot * Vector3::y(),
                [rng.random_range(0.3..1.5), rng.random_range(0.3..1.5)],
            )
            .unwrap();
            let origin = Vector3::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let target = rect.center
                + rect.u * rng.random_range(-2.0..2.0) * rect.half_extents[0]
                + rect.v * rng.random_range(-2.0..2.0) * rect.half_extents[1];
            let ray = Ray::new(origin, target - origin);
            let analytic = rect.intersect(&ray, &opts).map(|h| h.t);
            let mesh = mesh_raycast(&rect, &ray, opts.eps_t);
            match (analytic, mesh) {
                (Some(a), Some(m)) => {
                    hits += 1;
                    assert!((a - m).abs() < 1e-6, "t mismatch {a} vs {m}");
                }
                (None, None) => {}
                (a, m) => {
                    // Only tolerated exactly on the silhouette.
                    let t = rect.intersect_plane(&ray, &opts).unwrap_or(0.0);
                    let w = ray.at(t) - rect.center;
                    let edge = (w.dot(&rect.u).abs() - rect.half_extents[0])
                        .abs()
                        .min((w.dot(&rect.v).abs() - rect.half_extents[1]).abs());
                    assert!(edge < 1e-9, "disagreement {a:?} vs {m:?} away from edge");
                }
            }
        }
        assert!(hits > 100);
    }

    #[test]
    fn rigid_motion_leaves_t_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let opts = IntersectOptions::default();
        for _ in 0..200 {
            let rect = unit_rect();
            let origin = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 3.0);
            let ray = Ray::new(origin, Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), -1.0));
            let rot = random_rotation(&mut rng);
            let shift = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let moved = MirrorPrimitive::rect(rot * rect.center + shift, rot * rect.u, rot * rect.v, rect.half_extents).unwrap();
            let moved_ray = Ray::new(rot * ray.origin + shift, rot * ray.direction);
            let a = rect.intersect(&ray, &opts).map(|h| h.t);
            let b = moved.intersect(&moved_ray, &opts).map(|h| h.t);
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                (None, None) => {}
                _ => panic!("hit/miss changed under rigid motion"),
            }
        }
    }

    #[test]
    fn plane_depth_derivatives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        while checked < 200 {
            let rot = random_rotation(&mut rng);
            let rect = MirrorPrimitive::rect(
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                rot * Vector3::x(),
                rot * Vector3::y(),
                [1.0, 0.7],
            )
            .unwrap();
            let origin = Vector3::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let ray = Ray::new(origin, rect.center + rect.u * 0.3 - origin);
            if ray.direction.dot(&rect.n).abs() <= 0.1 {
                continue;
            }
            let t = plane_depth(ray.origin.into(), ray.direction.into(), &rect.dual_frame()).unwrap();
            let h = 1e-4;
            for k in 0..PRIM_PARAMS {
                let mut dp = [0.0; PRIM_PARAMS];
                dp[k] = h;
                let plus = rect.stepped(&dp, 1e-9).intersect_plane(&ray, &IntersectOptions::default()).unwrap();
                dp[k] = -h;
                let minus = rect.stepped(&dp, 1e-9).intersect_plane(&ray, &IntersectOptions::default()).unwrap();
                let fd = (plus - minus) / (2.0 * h);
                let err = (fd - t.g[k]).abs() / fd.abs().max(t.g[k].abs()).max(1e-3);
                assert!(err < 1e-3, "param {k}: fd {fd} vs ad {}", t.g[k]);
            }
            checked += 1;
        }
    }

    #[test]
    fn cylinder_intersection() {
        let cyl = MirrorPrimitive::new(PrimitiveKind::Cylinder, Vector3::zeros(), Vector3::x(), Vector3::y(), [1.0, 2.0])
            .unwrap();
        let opts = IntersectOptions::default();
        let ray = Ray::new(Vector3::new(0.0, 0.5, 5.0), Vector3::new(0.0, 0.0, -1.0));
        let hit = cyl.intersect(&ray, &opts).unwrap();
        assert!((hit.t - 4.0).abs() < 1e-12);
        assert!((hit.normal - Vector3::z()).norm() < 1e-12);
        let above = Ray::new(Vector3::new(0.0, 2.5, 5.0), Vector3::new(0.0, 0.0, -1.0));
        assert!(cyl.intersect(&above, &opts).is_none());
        // From inside the cylinder the far wall is hit.
        let inside = Ray::new(Vector3::zeros(), Vector3::x());
        assert!((cyl.intersect(&inside, &opts).unwrap().t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stepped_keeps_frame_valid() {
        let rect = unit_rect();
        let stepped = rect.stepped(&[0.1, 0.0, 0.0, 0.3, -0.2, 0.1, -5.0, 0.2], 1e-3);
        stepped.validate().unwrap();
        assert_eq!(stepped.half_extents[0], 1e-3);
        assert!((stepped.half_extents[1] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn invalid_primitives_rejected() {
        assert!(MirrorPrimitive::rect(Vector3::zeros(), Vector3::x(), Vector3::x(), [1.0, 1.0]).is_err());
        assert!(MirrorPrimitive::rect(Vector3::zeros(), Vector3::x(), Vector3::y(), [0.0, 1.0]).is_err());
    }
}
