//! RANSAC fits of planes and cylinders, followed by a least-squares refit
//! and bitmap-filtered bounding of the projected inliers.

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::obb::{density_filter_bitmap, oriented_bounding_box};
use super::{evaluate_fit, FitMetrics, FittedPrimitive};
use crate::error::{Error, Result};
use crate::scene::{MirrorPrimitive, PrimitiveKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub kind: PrimitiveKind,
    pub iterations: usize,
    /// Absolute inlier distance.
    pub inlier_distance: f64,
    pub min_inlier_ratio: f64,
    pub min_normal_similarity: f64,
    /// Bitmap cell as a fraction of the planar extent of the inliers.
    pub bitmap_cell: f64,
    pub bitmap_rho: f64,
    pub seed: u64,
}

impl RansacConfig {
    pub fn passes(&self, m: &FitMetrics) -> bool {
        m.inlier_ratio >= self.min_inlier_ratio
            && m.mean_distance <= self.inlier_distance
            && m.normal_similarity >= self.min_normal_similarity
    }
}

/// Candidate surface during the search: plane `(n, offset)` or cylinder
/// `(axis, point on axis, radius)`.
#[derive(Debug, Clone, Copy)]
enum Model {
    Plane { n: Vector3<f64>, d: f64 },
    Cylinder { axis: Vector3<f64>, at: Vector3<f64>, r: f64 },
}

impl Model {
    fn distance(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Model::Plane { n, d } => (n.dot(p) - d).abs(),
            Model::Cylinder { axis, at, r } => {
                let w = p - at;
                ((w - axis * w.dot(&axis)).norm() - r).abs()
            }
        }
    }
}

/// Inlier indices of `model` and their mean distance.
fn score(model: &Model, points: &[Vector3<f64>], tau: f64) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut sum = 0.0;
    for (i, p) in points.iter().enumerate() {
        let d = model.distance(p);
        if d <= tau {
            idx.push(i);
            sum += d;
        }
    }
    let mean = if idx.is_empty() { f64::INFINITY } else { sum / idx.len() as f64 };
    (idx, mean)
}

fn plane_from_three(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<Model> {
    let n = (b - a).cross(&(c - a));
    let len = n.norm();
    let scale = (b - a).norm() * (c - a).norm();
    if !(len > 1e-12 * scale) {
        return None;
    }
    let n = n / len;
    Some(Model::Plane { n, d: n.dot(a) })
}

fn cylinder_from_two(p1: &Vector3<f64>, n1: &Vector3<f64>, p2: &Vector3<f64>, n2: &Vector3<f64>) -> Option<Model> {
    let axis = n1.cross(n2);
    if !(axis.norm() > 1e-6) {
        return None;
    }
    let axis = axis.normalize();
    // Closest approach of the two normal lines gives a point on the axis.
    let (a, b, c) = (n1.dot(n1), n1.dot(n2), n2.dot(n2));
    let w = p1 - p2;
    let (d, e) = (n1.dot(&w), n2.dot(&w));
    let den = a * c - b * b;
    if !(den.abs() > 1e-12) {
        return None;
    }
    let s = (b * e - c * d) / den;
    let t = (a * e - b * d) / den;
    let at = 0.5 * ((p1 + n1 * s) + (p2 + n2 * t));
    let radial = |p: &Vector3<f64>| {
        let w = p - at;
        (w - axis * w.dot(&axis)).norm()
    };
    let r = 0.5 * (radial(p1) + radial(p2));
    (r > 0.0 && r.is_finite()).then_some(Model::Cylinder { axis, at, r })
}

fn centroid(points: &[Vector3<f64>], idx: &[usize]) -> Vector3<f64> {
    idx.iter().map(|&i| points[i]).sum::<Vector3<f64>>() / idx.len() as f64
}

/// Total-least-squares plane through the inliers.
fn refit_plane(points: &[Vector3<f64>], idx: &[usize]) -> (Vector3<f64>, Vector3<f64>) {
    let mean = centroid(points, idx);
    let mut cov = Matrix3::zeros();
    for &i in idx {
        let d = points[i] - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (k, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    (mean, eig.eigenvectors.column(k).normalize())
}

/// Algebraic circle fit `x^2 + y^2 + D x + E y + F = 0`.
fn kasa_circle(pts: &[Vector2<f64>]) -> Option<(Vector2<f64>, f64)> {
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for p in pts {
        let row = Vector3::new(p.x, p.y, 1.0);
        ata += row * row.transpose();
        atb += row * -(p.x * p.x + p.y * p.y);
    }
    let sol = ata.lu().solve(&atb)?;
    let c = Vector2::new(-0.5 * sol.x, -0.5 * sol.y);
    let r2 = c.norm_squared() - sol.z;
    (r2 > 0.0).then(|| (c, r2.sqrt()))
}

/// Any unit vector orthogonal to `n`.
fn orthogonal(n: &Vector3<f64>) -> Vector3<f64> {
    let t = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    (t - n * n.dot(&t)).normalize()
}

/// Bitmap-filters 2D coordinates with a cell relative to their extent.
fn filtered(coords: &[Vector2<f64>], cfg: &RansacConfig) -> Vec<usize> {
    let (mut lo, mut hi) = (coords[0], coords[0]);
    for c in coords {
        lo = lo.inf(c);
        hi = hi.sup(c);
    }
    let extent = (hi - lo).max();
    if !(extent > 0.0) {
        return (0..coords.len()).collect();
    }
    density_filter_bitmap(coords, cfg.bitmap_cell * extent, cfg.bitmap_rho)
}

/// Fits one primitive of `cfg.kind` to a cluster with estimated normals.
pub fn fit_primitive_ransac(points: &[Vector3<f64>], normals: &[Vector3<f64>], cfg: &RansacConfig) -> Result<FittedPrimitive> {
    let minimal = match cfg.kind {
        PrimitiveKind::Rect => 3,
        PrimitiveKind::Cylinder => 2,
    };
    if points.len() < minimal || normals.len() != points.len() {
        return Err(Error::InvalidInput(format!(
            "RANSAC needs at least {minimal} points with normals, got {} points and {} normals",
            points.len(),
            normals.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Model, Vec<usize>, f64)> = None;
    for _ in 0..cfg.iterations {
        let model = match cfg.kind {
            PrimitiveKind::Rect => {
                let s = rand::seq::index::sample(&mut rng, points.len(), 3);
                plane_from_three(&points[s.index(0)], &points[s.index(1)], &points[s.index(2)])
            }
            PrimitiveKind::Cylinder => {
                let s = rand::seq::index::sample(&mut rng, points.len(), 2);
                let (i, j) = (s.index(0), s.index(1));
                cylinder_from_two(&points[i], &normals[i], &points[j], &normals[j])
            }
        };
        let Some(model) = model else { continue };
        let (idx, mean) = score(&model, points, cfg.inlier_distance);
        let better = match &best {
            None => true,
            Some((_, bi, bm)) => idx.len() > bi.len() || (idx.len() == bi.len() && mean < *bm),
        };
        if better {
            best = Some((model, idx, mean));
        }
    }
    let Some((model, inliers, _)) = best else {
        return Err(Error::InvalidInput("RANSAC found no non-degenerate minimal sample".into()));
    };
    let primitive = match model {
        Model::Plane { .. } => bound_plane(points, normals, &inliers, cfg)?,
        Model::Cylinder { axis, at, r } => bound_cylinder(points, normals, &inliers, axis, at, r, cfg)?,
    };
    let (primitive, kept) = primitive;
    let metrics = evaluate_fit(&primitive, points, normals, cfg.inlier_distance);
    let ratio_ok = inliers.len() as f64 >= cfg.min_inlier_ratio * points.len() as f64;
    Ok(FittedPrimitive {
        accepted: ratio_ok && cfg.passes(&metrics),
        primitive,
        metrics,
        inlier_indices: kept,
    })
}

fn bound_plane(
    points: &[Vector3<f64>],
    normals: &[Vector3<f64>],
    inliers: &[usize],
    cfg: &RansacConfig,
) -> Result<(MirrorPrimitive, Vec<usize>)> {
    if inliers.len() < 3 {
        return Err(Error::InvalidInput("plane fit with fewer than 3 inliers".into()));
    }
    let (origin, mut n) = refit_plane(points, inliers);
    let mean_normal: Vector3<f64> = inliers.iter().map(|&i| normals[i]).sum();
    if mean_normal.dot(&n) < 0.0 {
        n = -n;
    }
    let e1 = orthogonal(&n);
    let e2 = n.cross(&e1);
    let coords: Vec<Vector2<f64>> = inliers
        .iter()
        .map(|&i| {
            let w = points[i] - origin;
            Vector2::new(w.dot(&e1), w.dot(&e2))
        })
        .collect();
    let keep = filtered(&coords, cfg);
    let kept_coords: Vec<Vector2<f64>> = keep.iter().map(|&k| coords[k]).collect();
    let obb = oriented_bounding_box(&kept_coords).expect("non-empty after filtering");
    let u = (e1 * obb.axis.x + e2 * obb.axis.y).normalize();
    let v = n.cross(&u);
    let center = origin + e1 * obb.center.x + e2 * obb.center.y;
    let floor = 1e-9 * (obb.half[0].max(obb.half[1])).max(1e-12);
    let prim = MirrorPrimitive::rect(center, u, v, [obb.half[0].max(floor), obb.half[1].max(floor)])?;
    Ok((prim, keep.iter().map(|&k| inliers[k]).collect()))
}

#[allow(clippy::too_many_arguments)]
fn bound_cylinder(
    points: &[Vector3<f64>],
    normals: &[Vector3<f64>],
    inliers: &[usize],
    axis0: Vector3<f64>,
    at0: Vector3<f64>,
    r0: f64,
    cfg: &RansacConfig,
) -> Result<(MirrorPrimitive, Vec<usize>)> {
    // Axis refit: the direction least represented among inlier normals.
    let mut nn = Matrix3::zeros();
    for &i in inliers {
        nn += normals[i] * normals[i].transpose();
    }
    let eig = SymmetricEigen::new(nn);
    let (k, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let mut axis: Vector3<f64> = eig.eigenvectors.column(k).normalize();
    if axis.dot(&axis0) < 0.0 {
        axis = -axis;
    }
    let e1 = orthogonal(&axis);
    let e2 = axis.cross(&e1);
    let flat: Vec<Vector2<f64>> = inliers
        .iter()
        .map(|&i| {
            let w = points[i] - at0;
            Vector2::new(w.dot(&e1), w.dot(&e2))
        })
        .collect();
    let (c2, r) = kasa_circle(&flat).unwrap_or((Vector2::zeros(), r0));
    let base = at0 + e1 * c2.x + e2 * c2.y;
    let mean_dir = inliers.iter().map(|&i| {
        let w = points[i] - base;
        w - axis * w.dot(&axis)
    });
    let mean_dir: Vector3<f64> = mean_dir.sum();
    let u = if mean_dir.norm() > 0.0 { mean_dir.normalize() } else { e1 };
    let w_axis = u.cross(&axis).normalize();
    // Unrolled surface coordinates: arc length around the axis, height along it.
    let coords: Vec<Vector2<f64>> = inliers
        .iter()
        .map(|&i| {
            let w = points[i] - base;
            let ang = w.dot(&w_axis).atan2(w.dot(&u));
            Vector2::new(r * ang, w.dot(&axis))
        })
        .collect();
    let keep = filtered(&coords, cfg);
    let (lo, hi) = keep.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &k| (lo.min(coords[k].y), hi.max(coords[k].y)));
    let half_h = (0.5 * (hi - lo)).max(1e-9 * r);
    let center = base + axis * (0.5 * (lo + hi));
    let prim = MirrorPrimitive::new(PrimitiveKind::Cylinder, center, u, axis, [r, half_h])?;
    Ok((prim, keep.iter().map(|&k| inliers[k]).collect()))
}
