//! Seeded k-means++ and Lloyd iterations over candidate points.

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CandidateCloud;
use crate::error::{Error, Result};

/// Clusters `cloud` into at most `k` groups. Features are positions, or
/// positions followed by normals scaled by the cloud diameter when
/// `with_normals` is set. Returns one label per point.
pub fn segment_kmeans(cloud: &CandidateCloud, k: usize, seed: u64, max_iter: usize, with_normals: bool) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidInput("k-means needs k >= 1".into()));
    }
    if cloud.is_empty() {
        return Ok(Vec::new());
    }
    let k = if cloud.len() < k {
        log::warn!("k-means: {} points for k = {k}; reducing k", cloud.len());
        cloud.len()
    } else {
        k
    };
    let diam = cloud.diameter();
    let feats: Vec<DVector<f64>> = (0..cloud.len())
        .map(|i| {
            let p = cloud.points[i];
            if with_normals {
                let n = cloud.normals[i] * diam;
                DVector::from_vec(vec![p.x, p.y, p.z, n.x, n.y, n.z])
            } else {
                DVector::from_vec(vec![p.x, p.y, p.z])
            }
        })
        .collect();
    Ok(lloyd(&feats, k, seed, max_iter, 1e-6 * diam.max(f64::MIN_POSITIVE)))
}

fn nearest(f: &DVector<f64>, centers: &[DVector<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(c, m)| (c, (f - m).norm_squared()))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .unwrap()
}

fn lloyd(feats: &[DVector<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![feats[rng.random_range(0..feats.len())].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = feats.iter().map(|f| nearest(f, &centers).1).collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            d2.iter()
                .position(|&d| {
                    r -= d;
                    r < 0.0 && d > 0.0
                })
                .unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            rng.random_range(0..feats.len())
        };
        centers.push(feats[next].clone());
    }
    let mut labels: Vec<usize> = feats.iter().map(|f| nearest(f, &centers).0).collect();
    for _ in 0..max_iter {
        let dim = feats[0].len();
        let mut sums = vec![DVector::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for (f, &l) in feats.iter().zip(&labels) {
            sums[l] += f;
            counts[l] += 1;
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] > 0 {
                let m = &sums[c] / counts[c] as f64;
                shift = shift.max((&m - &centers[c]).norm());
                centers[c] = m;
            }
        }
        labels = feats.iter().map(|f| nearest(f, &centers).0).collect();
        if shift < tol {
            break;
        }
    }
    labels
}

/// Sum over points of squared distance to their cluster centroid.
pub fn within_cluster_ss(points: &[Vector3<f64>], labels: &[usize]) -> f64 {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sums = vec![Vector3::zeros(); k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        sums[l] += p;
        counts[l] += 1;
    }
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| (p - sums[l] / counts[l] as f64).norm_squared())
        .sum()
}
