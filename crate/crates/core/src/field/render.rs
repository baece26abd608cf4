//! Emission-absorption compositing of field samples along a ray, with the
//! expected absorption depth and its variance, and the matching backward pass.

use super::mlp::RadianceField;
use super::sampling::RaySamples;
use crate::error::{Error, Result};
use crate::scene::Ray;

#[derive(Debug, Clone, PartialEq)]
pub struct RayRenderResult {
    pub color: [f64; 3],
    pub depth: f64,
    pub depth_variance: f64,
    /// `T_k * alpha_k` per sample.
    pub weights: Vec<f64>,
    pub transmittance_tail: f64,
    /// `T_k` for `k = 1..=K+1`; the last entry equals the tail.
    transmittance: Vec<f64>,
}

/// Composites per-sample densities and colors. `t` are the sample depths used
/// for the depth statistics and `deltas` the integration segment lengths.
pub fn composite(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    t: &[f64],
    deltas: &[f64],
    background: [f64; 3],
) -> RayRenderResult {
    let k = sigmas.len();
    debug_assert!(colors.len() == k && t.len() == k && deltas.len() == k);
    let mut weights = Vec::with_capacity(k);
    let mut transmittance = Vec::with_capacity(k + 1);
    let mut optical = 0.0_f64;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    for i in 0..k {
        let tr = (-optical).exp();
        transmittance.push(tr);
        let tau = sigmas[i] * deltas[i];
        let alpha = -(-tau).exp_m1();
        let w = tr * alpha;
        weights.push(w);
        for c in 0..3 {
            color[c] += w * colors[i][c];
        }
        depth += w * t[i];
        optical += tau;
    }
    let tail = (-optical).exp();
    transmittance.push(tail);
    for c in 0..3 {
        color[c] += tail * background[c];
    }
    let depth_variance = weights
        .iter()
        .zip(t)
        .map(|(w, ti)| w * (ti - depth) * (ti - depth))
        .sum();
    RayRenderResult {
        color,
        depth,
        depth_variance,
        weights,
        transmittance_tail: tail,
        transmittance,
    }
}

/// Gradients of a loss with respect to sample densities and colors, given
/// `d_color = dL/dC(r)` and `d_depth = dL/dD(r)`.
pub fn composite_backward(
    result: &RayRenderResult,
    colors: &[[f64; 3]],
    t: &[f64],
    deltas: &[f64],
    background: [f64; 3],
    d_color: [f64; 3],
    d_depth: f64,
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let k = result.weights.len();
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    // g_k = dL/dw_k; the tail contributes through the background term.
    let g: Vec<f64> = (0..k).map(|i| dot(d_color, colors[i]) + d_depth * t[i]).collect();
    let tail_term = result.transmittance_tail * dot(d_color, background);
    let mut dsigma = vec![0.0; k];
    // suffix = sum_{j > i} w_j g_j + T_{K+1} g_tail
    let mut suffix = tail_term;
    for i in (0..k).rev() {
        let t_next = result.transmittance[i + 1];
        let v = t_next * g[i] - suffix;
        dsigma[i] = if t_next == 0.0 && suffix == 0.0 { 0.0 } else { deltas[i] * v };
        suffix += result.weights[i] * g[i];
    }
    let dcolor = result
        .weights
        .iter()
        .map(|w| [w * d_color[0], w * d_color[1], w * d_color[2]])
        .collect();
    (dsigma, dcolor)
}

/// Queries the field along `ray` at `samples` and composites the result.
pub fn render_ray(field: &RadianceField, ray: &Ray, samples: &RaySamples, background: [f64; 3]) -> Result<RayRenderResult> {
    let positions: Vec<[f64; 3]> = samples.t.iter().map(|&t| ray.at(t).into()).collect();
    let dirs = vec![<[f64; 3]>::from(ray.direction); positions.len()];
    let out = field.forward(&positions, Some(&dirs));
    check_outputs(&out.sigma, &out.color)?;
    Ok(composite(&out.sigma, &out.color, &samples.t, &samples.deltas, background))
}

pub(crate) fn check_outputs(sigma: &[f64], color: &[[f64; 3]]) -> Result<()> {
    if let Some(index) = sigma.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { what: "density", index });
    }
    if let Some(index) = color.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { what: "color", index });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::mlp::tests::small_arch;
    use crate::field::sampling::{sample_stratified, stratified_midpoints, LAST_DELTA};
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vacuum_renders_black() {
        let r = composite(&[0.0; 4], &[[0.7; 3]; 4], &[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 1.0, LAST_DELTA], [0.0; 3]);
        assert_eq!(r.color, [0.0; 3]);
        assert!(r.weights.iter().all(|&w| w == 0.0));
        assert_eq!(r.transmittance_tail, 1.0);
    }

    #[test]
    fn two_sample_closed_form() {
        let c1 = [1.0, 0.0, 0.2];
        let c2 = [0.0, 1.0, 0.6];
        let r = composite(&[std::f64::consts::LN_2, 1e6], &[c1, c2], &[0.0, 1.0], &[1.0, LAST_DELTA], [0.0; 3]);
        assert!((r.weights[0] - 0.5).abs() < 1e-15);
        assert!((r.weights[1] - 0.5).abs() < 1e-15);
        for k in 0..3 {
            assert!((r.color[k] - 0.5 * c1[k] - 0.5 * c2[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn opaque_sample_gives_exact_depth() {
        let t = [0.5, 1.7, 2.3];
        let r = composite(&[0.0, 1e9, 0.0], &[[0.3; 3]; 3], &t, &[1.2, 0.6, LAST_DELTA], [0.0; 3]);
        assert!((r.depth - 1.7).abs() < 1e-12);
        assert!(r.depth_variance.abs() < 1e-12);
    }

    /// Straight evaluation of the quadrature, transmittance recomputed from scratch per sample.
    fn literal(sigmas: &[f64], colors: &[[f64; 3]], t: &[f64], deltas: &[f64]) -> ([f64; 3], f64, f64) {
        let k = sigmas.len();
        let mut c = [0.0; 3];
        let mut d = 0.0;
        let mut w = vec![0.0; k];
        for i in 0..k {
            let mut s = 0.0;
            for j in 0..i {
                s += sigmas[j] * deltas[j];
            }
            let tk = (-s).exp();
            let ak = 1.0 - (-sigmas[i] * deltas[i]).exp();
            w[i] = tk * ak;
            for ch in 0..3 {
                c[ch] += w[i] * colors[i][ch];
            }
            d += w[i] * t[i];
        }
        let v = (0..k).map(|i| w[i] * (t[i] - d).powi(2)).sum();
        (c, d, v)
    }

    #[test]
    fn random_field_matches_literal_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let field = RadianceField::new(small_arch(), 5).unwrap();
        for _ in 0..200 {
            let origin = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let ray = Ray::new(origin, Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -1.0));
            let samples = sample_stratified(0.1, 4.0, 24, &mut rng);
            let r = render_ray(&field, &ray, &samples, [0.0; 3]).unwrap();
            let positions: Vec<[f64; 3]> = samples.t.iter().map(|&t| ray.at(t).into()).collect();
            let mut sig = Vec::new();
            let mut col = Vec::new();
            for p in &positions {
                let (s, c) = field.query(*p, ray.direction.into()).unwrap();
                sig.push(s);
                col.push(c);
            }
            let (c, d, v) = literal(&sig, &col, &samples.t, &samples.deltas);
            for k in 0..3 {
                assert!((c[k] - r.color[k]).abs() < 1e-10);
            }
            assert!((d - r.depth).abs() < 1e-10);
            assert!((v - r.depth_variance).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = 12;
        let t: Vec<f64> = stratified_midpoints(0.2, 3.0, k).t;
        let deltas = crate::field::sampling::deltas_for(&t);
        let mut sig: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..2.0)).collect();
        let colors: Vec<[f64; 3]> = (0..k).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
        let bg = [0.2, 0.4, 0.1];
        let dc = [0.3, -0.7, 0.5];
        let dd = 0.9;
        let loss = |s: &[f64]| {
            let r = composite(s, &colors, &t, &deltas, bg);
            r.color[0] * dc[0] + r.color[1] * dc[1] + r.color[2] * dc[2] + dd * r.depth
        };
        // Keep the last sample finite but not saturating so its gradient is visible.
        sig[k - 1] = 1e-11;
        let r = composite(&sig, &colors, &t, &deltas, bg);
        let (ds, dcol) = composite_backward(&r, &colors, &t, &deltas, bg, dc, dd);
        for i in 0..k - 1 {
            let h = 1e-6;
            let mut p = sig.clone();
            let mut m = sig.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - ds[i]).abs() < 1e-6 * fd.abs().max(1.0), "sample {i}: {fd} vs {}", ds[i]);
        }
        for i in 0..k {
            assert!((dcol[i][0] - r.weights[i] * dc[0]).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn weights_normalize_and_depths_are_bounded(
            seed in 0u64..10_000, count in 2usize..40,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples = sample_stratified(0.1, 5.0, count, &mut rng);
            let sig: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..3.0)).collect();
            let colors: Vec<[f64; 3]> = (0..count).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
            let r = composite(&sig, &colors, &samples.t, &samples.deltas, [0.0; 3]);
            let total: f64 = r.weights.iter().sum();
            prop_assert!((total + r.transmittance_tail - 1.0).abs() < 1e-6);
            prop_assert!(total <= 1.0 + 1e-6);
            prop_assert!(r.weights.iter().all(|&w| w >= 0.0));
            prop_assert!(r.transmittance.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(r.color.iter().all(|&c| (0.0..=1.0 + 1e-6).contains(&c)));
            prop_assert!(r.depth_variance >= 0.0);
            if r.transmittance_tail < 1e-9 {
                let (t1, tk) = (samples.t[0], samples.t[count - 1]);
                prop_assert!(r.depth >= t1 - 1e-9 && r.depth <= tk + 1e-9);
                prop_assert!(r.depth_variance <= (tk - t1).powi(2) / 4.0 + 1e-9);
            }
        }
    }
}
