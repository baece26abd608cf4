//! From high-score pixels to bounded mirror primitives: candidate clouds,
//! normals, clustering, robust shape fits, and their evaluation.

pub mod kmeans;
pub mod normals;
pub mod obb;
pub mod ransac;

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::scene::{Camera, MirrorPrimitive, PrimitiveRecord};
use crate::scoring::{threshold_scores, ScoreMaps};

pub use kmeans::{segment_kmeans, within_cluster_ss};
pub use normals::{estimate_normals, hybrid_neighborhood};
pub use obb::{convex_hull, density_filter_bitmap, oriented_bounding_box, Obb};
pub use ransac::{fit_primitive_ransac, RansacConfig};

/// Unprojected candidate points with per-point provenance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateCloud {
    pub points: Vec<Vector3<f64>>,
    /// Unit normals once estimated; zero before.
    pub normals: Vec<Vector3<f64>>,
    pub camera_ids: Vec<usize>,
    pub scores: Vec<f64>,
    /// Origin of the camera that produced each point.
    pub origins: Vec<Vector3<f64>>,
    /// Points whose neighborhood was too small for a normal.
    pub flagged: Vec<bool>,
}

impl CandidateCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, point: Vector3<f64>, camera: &Camera, score: f64) {
        self.points.push(point);
        self.normals.push(Vector3::zeros());
        self.camera_ids.push(camera.id);
        self.scores.push(score);
        self.origins.push(camera.origin);
        self.flagged.push(false);
    }

    /// Keeps the points at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: indices.iter().map(|&i| self.normals[i]).collect(),
            camera_ids: indices.iter().map(|&i| self.camera_ids[i]).collect(),
            scores: indices.iter().map(|&i| self.scores[i]).collect(),
            origins: indices.iter().map(|&i| self.origins[i]).collect(),
            flagged: indices.iter().map(|&i| self.flagged[i]).collect(),
        }
    }

    /// Bounding-box diagonal of the points.
    pub fn diameter(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (hi - lo).norm()
    }

    /// ASCII PLY with positions, normals, scores and camera ids.
    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "ply\nformat ascii 1.0\nelement vertex {}", self.len());
        for p in ["x", "y", "z", "nx", "ny", "nz", "score"] {
            let _ = writeln!(s, "property float {p}");
        }
        let _ = writeln!(s, "property int camera\nend_header");
        for i in 0..self.len() {
            let (p, n) = (self.points[i], self.normals[i]);
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {} {}",
                p.x as f32, p.y as f32, p.z as f32, n.x as f32, n.y as f32, n.z as f32, self.scores[i] as f32, self.camera_ids[i]
            );
        }
        std::fs::write(path, s).at(path)
    }
}

/// One point per pixel scoring above `threshold`, at the rendered depth along
/// its center ray.
pub fn build_candidate_cloud(views: &[(Camera, ScoreMaps)], threshold: f64) -> Result<CandidateCloud> {
    let mut cloud = CandidateCloud::default();
    for (cam, maps) in views {
        if maps.score.width != cam.width || maps.score.height != cam.height {
            return Err(Error::InvalidInput(format!("score map of camera {} does not match its size", cam.id)));
        }
        for (x, y) in threshold_scores(&maps.score, threshold) {
            let depth = maps.depth.get(x, y, 0);
            if !(depth > 0.0) {
                continue;
            }
            let p = cam.unproject(x as f64 + 0.5, y as f64 + 0.5, depth)?;
            cloud.push(p, cam, maps.score.get(x, y, 0));
        }
    }
    Ok(cloud)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub inlier_ratio: f64,
    pub mean_distance: f64,
    pub normal_similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedPrimitive {
    pub primitive: MirrorPrimitive,
    pub metrics: FitMetrics,
    pub inlier_indices: Vec<usize>,
    pub accepted: bool,
}

/// Inliers are points within `inlier_distance` of the unbounded shape; the
/// distance and normal terms average over inliers only.
pub fn evaluate_fit(prim: &MirrorPrimitive, points: &[Vector3<f64>], normals: &[Vector3<f64>], inlier_distance: f64) -> FitMetrics {
    let mut count = 0usize;
    let mut dist = 0.0;
    let mut cos = 0.0;
    for (p, n) in points.iter().zip(normals) {
        let d = prim.unbounded_distance(p).abs();
        if d <= inlier_distance {
            count += 1;
            dist += d;
            cos += prim.normal_at(p).dot(n);
        }
    }
    let c = count.max(1) as f64;
    FitMetrics {
        inlier_ratio: if points.is_empty() { 0.0 } else { count as f64 / points.len() as f64 },
        mean_distance: dist / c,
        normal_similarity: if count == 0 { 0.0 } else { cos / c },
    }
}

/// Settings of the full detection chain, with lengths already absolute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectSettings {
    pub k: usize,
    pub normal_radius: f64,
    pub normal_knn: usize,
    pub kmeans_with_normals: bool,
    pub kmeans_max_iter: usize,
    pub min_cluster_points: usize,
    pub ransac: RansacConfig,
}

/// Normals, clustering and one fit per cluster. Flagged points are left out
/// of clustering; clusters below `min_cluster_points` are dropped with a
/// warning. Returns the cloud with normals and the fits in label order.
pub fn detect_primitives(cloud: &CandidateCloud, s: &DetectSettings, seed: u64) -> Result<(CandidateCloud, Vec<FittedPrimitive>)> {
    use rayon::prelude::*;
    if cloud.is_empty() {
        return Ok((cloud.clone(), Vec::new()));
    }
    let with_normals = estimate_normals(cloud, s.normal_radius, s.normal_knn)?;
    let usable: Vec<usize> = (0..with_normals.len()).filter(|&i| !with_normals.flagged[i]).collect();
    let sub = with_normals.subset(&usable);
    if sub.is_empty() {
        return Ok((with_normals, Vec::new()));
    }
    let labels = segment_kmeans(&sub, s.k, seed, s.kmeans_max_iter, s.kmeans_with_normals)?;
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let clusters: Vec<Vec<usize>> = (0..k).map(|c| (0..sub.len()).filter(|&i| labels[i] == c).collect()).collect();
    let fits: Vec<Option<Result<FittedPrimitive>>> = clusters
        .par_iter()
        .enumerate()
        .map(|(c, idx)| {
            if idx.len() < s.min_cluster_points.max(3) {
                log::warn!("cluster {c} has {} points; skipped", idx.len());
                return None;
            }
            let pts: Vec<_> = idx.iter().map(|&i| sub.points[i]).collect();
            let nrm: Vec<_> = idx.iter().map(|&i| sub.normals[i]).collect();
            let cfg = RansacConfig {
                seed: seed.wrapping_add(c as u64 + 1),
                ..s.ransac
            };
            Some(fit_primitive_ransac(&pts, &nrm, &cfg).map(|mut f| {
                f.inlier_indices = f.inlier_indices.iter().map(|&j| usable[idx[j]]).collect();
                f
            }))
        })
        .collect();
    let fits = fits.into_iter().flatten().collect::<Result<Vec<_>>>()?;
    Ok((with_normals, fits))
}

/// JSON manifest entry; the same schema serves detected, refined and
/// ground-truth primitives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub record: PrimitiveRecord,
    pub metrics: Option<FitMetrics>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrimitiveManifest {
    pub config_hash: Option<String>,
    pub primitives: Vec<ManifestEntry>,
}

impl PrimitiveManifest {
    pub fn from_fits(fits: &[FittedPrimitive], config_hash: Option<String>) -> Self {
        Self {
            config_hash,
            primitives: fits
                .iter()
                .map(|f| ManifestEntry {
                    record: f.primitive.to_record(),
                    metrics: Some(f.metrics),
                    accepted: f.accepted,
                })
                .collect(),
        }
    }

    pub fn accepted(&self) -> Result<Vec<MirrorPrimitive>> {
        self.primitives
            .iter()
            .filter(|e| e.accepted)
            .map(|e| MirrorPrimitive::from_record(&e.record))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path).at(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ImageBuffer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane_prim() -> MirrorPrimitive {
        MirrorPrimitive::rect(Vector3::zeros(), Vector3::x(), Vector3::y(), [1.0, 1.0]).unwrap()
    }

    fn maps_with(cam: &Camera, hot: &[(usize, usize, f64)]) -> ScoreMaps {
        let mut score = ImageBuffer::new(cam.width, cam.height, 1);
        let mut depth = ImageBuffer::new(cam.width, cam.height, 1);
        for &(x, y, d) in hot {
            score.set(x, y, 0, 0.9);
            depth.set(x, y, 0, d);
        }
        ScoreMaps {
            ssim: ImageBuffer::new(cam.width, cam.height, 1),
            depth,
            depth_variance: ImageBuffer::new(cam.width, cam.height, 1),
            score,
        }
    }

    fn axis_camera() -> Camera {
        Camera::new(0, 5, 5, 10.0, [2.5, 2.5], nalgebra::Matrix3::identity(), Vector3::zeros(), 0.1, 10.0).unwrap()
    }

    #[test]
    fn candidate_cloud_examples() {
        let cam = axis_camera();
        let maps = maps_with(&cam, &[(2, 2, 2.0)]);
        let views = vec![(cam.clone(), maps)];
        assert!(build_candidate_cloud(&views, 1.0).unwrap().is_empty());
        let cloud = build_candidate_cloud(&views, 0.3).unwrap();
        assert_eq!(cloud.len(), 1);
        assert!((cloud.points[0] - Vector3::new(0.0, 0.0, -2.0)).norm() < 1e-12);
        assert_eq!(cloud.camera_ids, vec![0]);
    }

    #[test]
    fn perfect_plane_metrics() {
        let pts: Vec<_> = (0..50).map(|i| Vector3::new(i as f64 * 0.01, -(i as f64) * 0.02, 0.0)).collect();
        let nrm = vec![Vector3::z(); 50];
        let m = evaluate_fit(&plane_prim(), &pts, &nrm, 0.01);
        assert_eq!((m.inlier_ratio, m.mean_distance, m.normal_similarity), (1.0, 0.0, 1.0));
    }

    #[test]
    fn half_offset_plane_metrics() {
        let mut pts: Vec<_> = (0..40).map(|i| Vector3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        pts.extend((0..40).map(|i| Vector3::new(i as f64 * 0.01, 0.0, 5.0)));
        let m = evaluate_fit(&plane_prim(), &pts, &vec![Vector3::z(); 80], 0.01);
        assert!((m.inlier_ratio - 0.5).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_literal_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = Vector3::new(1.0, 1.0, 0.0).normalize();
        let v = Vector3::new(-1.0, 1.0, 0.5).normalize();
        let prim = MirrorPrimitive::rect(Vector3::new(0.3, -0.2, 0.1), u, v, [0.5, 0.5]).unwrap();
        let pts: Vec<Vector3<f64>> = (0..300).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)) * 0.2).collect();
        let nrm: Vec<Vector3<f64>> = (0..300).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0f64)).normalize()).collect();
        let tau = 0.05;
        let m = evaluate_fit(&prim, &pts, &nrm, tau);
        // Literal: explicit plane equation n.x = n.c.
        let n = u.cross(&v);
        let off = n.dot(&prim.center);
        let mut idx = Vec::new();
        for i in 0..pts.len() {
            if (n.dot(&pts[i]) - off).abs() <= tau {
                idx.push(i);
            }
        }
        let ratio = idx.len() as f64 / pts.len() as f64;
        let md = idx.iter().map(|&i| (n.dot(&pts[i]) - off).abs()).sum::<f64>() / idx.len() as f64;
        let ns = idx.iter().map(|&i| n.dot(&nrm[i])).sum::<f64>() / idx.len() as f64;
        assert!(!idx.is_empty());
        assert!((m.inlier_ratio - ratio).abs() < 1e-9);
        assert!((m.mean_distance - md).abs() < 1e-9);
        assert!((m.normal_similarity - ns).abs() < 1e-9);
    }

    #[test]
    fn manifest_round_trip_and_ply() {
        let dir = tempfile::tempdir().unwrap();
        let fit = FittedPrimitive {
            primitive: plane_prim(),
            metrics: FitMetrics {
                inlier_ratio: 0.9,
                mean_distance: 0.001,
                normal_similarity: 0.99,
            },
            inlier_indices: vec![0, 1],
            accepted: true,
        };
        let m = PrimitiveManifest::from_fits(&[fit], Some("abc".into()));
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = PrimitiveManifest::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.accepted().unwrap().len(), 1);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"kind\": \"rect\"") && text.contains("\"frame\""));

        let cam = axis_camera();
        let mut cloud = CandidateCloud::default();
        cloud.push(Vector3::new(1.0, 2.0, 3.0), &cam, 0.5);
        let ply = dir.path().join("c.ply");
        cloud.write_ply(&ply).unwrap();
        let text = std::fs::read_to_string(&ply).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 1"));
        assert!(text.trim_end().ends_with("1 2 3 0 0 0 0.5 0"));
    }
}
