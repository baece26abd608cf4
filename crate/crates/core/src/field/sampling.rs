//! Stratified and hierarchical (inverse-CDF) sampling along rays.

use rand::Rng;

/// Delta assigned to the last sample of a ray.
pub const LAST_DELTA: f64 = 1e10;

/// Additive floor on coarse weights before building the sampling pdf.
pub const WEIGHT_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
    pub near: f64,
    pub far: f64,
}

impl RaySamples {
    pub fn from_sorted(t: Vec<f64>, near: f64, far: f64) -> Self {
        debug_assert!(t.windows(2).all(|w| w[0] <= w[1]));
        let deltas = deltas_for(&t);
        Self { t, deltas, near, far }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

pub fn deltas_for(t: &[f64]) -> Vec<f64> {
    let mut d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if !t.is_empty() {
        d.push(LAST_DELTA);
    }
    d
}

/// One sample per stratum `[near + k/K (far-near), near + (k+1)/K (far-near))`,
/// placed at `jitter()` in `[0, 1)` inside the stratum.
pub fn stratified_with(near: f64, far: f64, count: usize, mut jitter: impl FnMut() -> f64) -> RaySamples {
    assert!(near < far && count >= 2, "stratified sampling needs near < far and K >= 2");
    let step = (far - near) / count as f64;
    let t = (0..count)
        .map(|k| (near + (k as f64 + jitter()) * step).min(far - step * 1e-9))
        .collect();
    RaySamples::from_sorted(t, near, far)
}

pub fn sample_stratified(near: f64, far: f64, count: usize, rng: &mut impl Rng) -> RaySamples {
    stratified_with(near, far, count, || rng.random::<f64>())
}

pub fn stratified_midpoints(near: f64, far: f64, count: usize) -> RaySamples {
    stratified_with(near, far, count, || 0.5)
}

/// Bin edges around each coarse sample: midpoints between neighbours, the
/// outer edges mirrored and clipped to `[near, far]`.
pub fn bin_edges(samples: &RaySamples) -> Vec<f64> {
    let t = &samples.t;
    let k = t.len();
    let mut edges = Vec::with_capacity(k + 1);
    edges.push((t[0] - 0.5 * (t[1] - t[0])).max(samples.near));
    for w in t.windows(2) {
        edges.push(0.5 * (w[0] + w[1]));
    }
    edges.push((t[k - 1] + 0.5 * (t[k - 1] - t[k - 2])).min(samples.far));
    edges
}

/// Draws `count` sorted positions from the piecewise-constant density with
/// bin masses proportional to `weights` over `edges`.
pub fn sample_pdf(edges: &[f64], weights: &[f64], count: usize, rng: &mut impl Rng) -> Vec<f64> {
    assert_eq!(edges.len(), weights.len() + 1);
    let mass: Vec<f64> = weights.iter().map(|w| w.max(0.0) + WEIGHT_FLOOR).collect();
    let total: f64 = mass.iter().sum();
    let mut cdf = Vec::with_capacity(mass.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for m in &mass {
        acc += m / total;
        cdf.push(acc);
    }
    let last = cdf.len() - 1;
    cdf[last] = 1.0;

    let mut out = Vec::with_capacity(count);
    let mut bin = 0;
    for i in 0..count {
        let u = (i as f64 + rng.random::<f64>()) / count as f64;
        while bin + 1 < mass.len() && cdf[bin + 1] <= u {
            bin += 1;
        }
        let span = cdf[bin + 1] - cdf[bin];
        let frac = if span > 0.0 { ((u - cdf[bin]) / span).clamp(0.0, 1.0) } else { 0.5 };
        out.push(edges[bin] + frac * (edges[bin + 1] - edges[bin]));
    }
    out
}

/// Fine samples drawn from the coarse weights, merged and sorted with the
/// coarse positions. All-zero weights fall back to stratified fine samples.
pub fn sample_hierarchical(coarse: &RaySamples, weights: &[f64], count: usize, rng: &mut impl Rng) -> RaySamples {
    assert_eq!(weights.len(), coarse.len());
    let fine = if weights.iter().all(|&w| w <= 0.0) {
        sample_stratified(coarse.near, coarse.far, count, rng).t
    } else {
        sample_pdf(&bin_edges(coarse), weights, count, rng)
    };
    merge_sorted(coarse, &fine)
}

pub fn merge_sorted(coarse: &RaySamples, fine: &[f64]) -> RaySamples {
    let mut t: Vec<f64> = coarse.t.iter().chain(fine).copied().collect();
    t.sort_by(|a, b| a.total_cmp(b));
    RaySamples::from_sorted(t, coarse.near, coarse.far)
}
