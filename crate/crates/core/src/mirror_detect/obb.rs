//! Planar helpers: bitmap density filtering, convex hull, and minimum-area
//! oriented bounding boxes.

use std::collections::HashMap;

use nalgebra::Vector2;

/// Indices of points lying in grid cells of pitch `cell` whose count reaches
/// `max(1, rho * median occupied-cell count)`.
pub fn density_filter_bitmap(points: &[Vector2<f64>], cell: f64, rho: f64) -> Vec<usize> {
    assert!(cell > 0.0, "bitmap cell must be positive");
    let key = |p: &Vector2<f64>| ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
    let mut counts: HashMap<(i64, i64), usize> = HashMap::new();
    for p in points {
        *counts.entry(key(p)).or_default() += 1;
    }
    if counts.is_empty() {
        return Vec::new();
    }
    let mut occ: Vec<usize> = counts.values().copied().collect();
    occ.sort_unstable();
    let median = if occ.len() % 2 == 1 {
        occ[occ.len() / 2] as f64
    } else {
        0.5 * (occ[occ.len() / 2 - 1] + occ[occ.len() / 2]) as f64
    };
    let threshold = (median * rho).max(1.0);
    (0..points.len()).filter(|&i| counts[&key(&points[i])] as f64 >= threshold).collect()
}

fn cross(o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Counter-clockwise hull by the monotone chain; collinear points dropped.
pub fn convex_hull(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vector2<f64>>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for p in iter {
            while hull.len() >= start + 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    hull
}

/// Oriented rectangle `center + a*axis + b*perp(axis)`, `|a| <= half[0]`, `|b| <= half[1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    pub center: Vector2<f64>,
    pub axis: Vector2<f64>,
    pub half: [f64; 2],
}

impl Obb {
    pub fn area(&self) -> f64 {
        4.0 * self.half[0] * self.half[1]
    }

    pub fn contains(&self, p: &Vector2<f64>, tol: f64) -> bool {
        let d = p - self.center;
        let perp = Vector2::new(-self.axis.y, self.axis.x);
        d.dot(&self.axis).abs() <= self.half[0] + tol && d.dot(&perp).abs() <= self.half[1] + tol
    }
}

/// Minimum-area box over hull edge directions (rotating calipers). Degenerate
/// input yields a box along the principal spread with zero thickness.
pub fn oriented_bounding_box(points: &[Vector2<f64>]) -> Option<Obb> {
    let hull = convex_hull(points);
    if hull.is_empty() {
        return None;
    }
    let mut dirs: Vec<Vector2<f64>> = (0..hull.len())
        .filter_map(|i| {
            let e = hull[(i + 1) % hull.len()] - hull[i];
            (e.norm() > 0.0).then(|| e.normalize())
        })
        .collect();
    if dirs.is_empty() {
        dirs.push(Vector2::x());
    }
    let mut best: Option<(f64, Obb)> = None;
    for axis in dirs {
        let perp = Vector2::new(-axis.y, axis.x);
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &hull {
            let c = [p.dot(&axis), p.dot(&perp)];
            for k in 0..2 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        let half = [0.5 * (hi[0] - lo[0]), 0.5 * (hi[1] - lo[1])];
        let center = axis * (0.5 * (lo[0] + hi[0])) + perp * (0.5 * (lo[1] + hi[1]));
        let area = half[0] * half[1];
        if best.as_ref().is_none_or(|(a, _)| area < *a) {
            best = Some((area, Obb { center, axis, half }));
        }
    }
    best.map(|(_, b)| b)
}
