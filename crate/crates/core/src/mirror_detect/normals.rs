//! PCA normals over a radius-ball plus k-nearest neighborhood.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use super::CandidateCloud;
use crate::error::{Error, Result};

/// Nearest neighbors beyond this multiple of the radius are not joined.
pub const KNN_RADIUS_CAP: f64 = 4.0;

/// Neighborhood indices of point `i`, including `i` itself.
pub fn hybrid_neighborhood(points: &[Vector3<f64>], i: usize, radius: f64, k: usize) -> Vec<usize> {
    let p = points[i];
    let mut by_dist: Vec<(f64, usize)> = points.iter().enumerate().map(|(j, q)| ((q - p).norm_squared(), j)).collect();
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let r2 = radius * radius;
    let cap2 = r2 * KNN_RADIUS_CAP * KNN_RADIUS_CAP;
    by_dist
        .iter()
        .enumerate()
        .take_while(|(rank, (d2, _))| *d2 <= r2 || (*rank <= k && *d2 <= cap2))
        .map(|(_, &(_, j))| j)
        .collect()
}

/// Smallest-eigenvalue eigenvector of the neighborhood covariance.
pub fn pca_normal(points: &[Vector3<f64>], idx: &[usize]) -> Vector3<f64> {
    let mean = idx.iter().map(|&j| points[j]).sum::<Vector3<f64>>() / idx.len() as f64;
    let mut cov = Matrix3::zeros();
    for &j in idx {
        let d = points[j] - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (min_i, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    eig.eigenvectors.column(min_i).normalize()
}

/// Estimates unit normals oriented toward each point's camera. Points with
/// fewer than three neighbors are flagged and keep a zero normal.
pub fn estimate_normals(cloud: &CandidateCloud, radius: f64, k: usize) -> Result<CandidateCloud> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("normal estimation on an empty cloud".into()));
    }
    if !(radius > 0.0) || k < 3 {
        return Err(Error::InvalidInput(format!("need radius > 0 and k >= 3, got {radius}, {k}")));
    }
    let est: Vec<Option<Vector3<f64>>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let nb = hybrid_neighborhood(&cloud.points, i, radius, k);
            if nb.len() < 3 {
                return None;
            }
            let n = pca_normal(&cloud.points, &nb);
            Some(if n.dot(&(cloud.origins[i] - cloud.points[i])) < 0.0 { -n } else { n })
        })
        .collect();
    let mut out = cloud.clone();
    for (i, n) in est.into_iter().enumerate() {
        out.flagged[i] = n.is_none();
        out.normals[i] = n.unwrap_or_else(Vector3::zeros);
    }
    Ok(out)
}
