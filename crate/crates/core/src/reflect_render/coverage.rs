//! Antialiased mirror coverage of a pixel.
//!
//! The pixel square is carried to the primitive plane by the linearized
//! pixel-to-plane map, which turns it into a parallelogram. For each rect
//! edge the covered fraction is the distribution function of the
//! parallelogram's extent across that edge, a sum of two uniforms; the four
//! edge fractions are multiplied.

use rayon::prelude::*;

use crate::scene::dual::{self, Dual, Real};
use crate::scene::primitive::PrimitiveFrame;
use crate::scene::{Camera, ImageBuffer, IntersectOptions, MirrorPrimitive, PrimitiveKind, PRIM_PARAMS};

/// `P(X + Y <= z)` for `X ~ U(-a/2, a/2)`, `Y ~ U(-b/2, b/2)`.
pub fn edge_cdf<T: Real>(z: T, a: T, b: T) -> T {
    let (hi, lo) = if a.value() >= b.value() { (a, b) } else { (b, a) };
    let alpha = hi.scale(0.5);
    let beta = lo.scale(0.5);
    if alpha.value() <= 1e-300 {
        return T::cst(if z.value() > 0.0 {
            1.0
        } else if z.value() < 0.0 {
            0.0
        } else {
            0.5
        });
    }
    let zv = z.value();
    if zv >= (alpha + beta).value() {
        return T::cst(1.0);
    }
    if zv <= -(alpha + beta).value() {
        return T::cst(0.0);
    }
    let linear = || T::cst(0.5) + z / alpha.scale(2.0);
    if beta.value() <= 1e-9 * alpha.value() {
        return linear();
    }
    if zv.abs() <= (alpha - beta).value() {
        return linear();
    }
    let ramp = |x: T| {
        let r = x + alpha + beta;
        r * r / (alpha * beta).scale(8.0)
    };
    if zv < 0.0 {
        ramp(z)
    } else {
        T::cst(1.0) - ramp(-z)
    }
}

/// Coverage of continuous pixel `(x, y)` by a rect given over a generic
/// scalar; zero when the plane is behind the camera or parallel to the ray.
pub fn coverage_with<T: Real>(cam: &Camera, pixel: [f64; 2], frame: &PrimitiveFrame<T>, single_sided: bool) -> T {
    let zero = T::cst(0.0);
    let d: [f64; 3] = cam.pixel_direction(pixel[0], pixel[1]).into();
    let (dx, dy) = cam.pixel_direction_derivatives();
    let dl = dual::lift::<T>(d);
    let denom = dual::dot(dl, frame.n);
    if denom.value().abs() < 1e-12 || (single_sided && denom.value() >= 0.0) {
        return zero;
    }
    let o = dual::lift::<T>(cam.origin.into());
    let s = dual::dot(dual::sub(frame.center, o), frame.n) / denom;
    if s.value() <= 0.0 {
        return zero;
    }
    let p = dual::add(o, dual::mul(dl, s));
    let w = dual::sub(p, frame.center);
    let (a, b) = (dual::dot(w, frame.u), dual::dot(w, frame.v));
    let jac = |dd: [f64; 3]| {
        let ddl = dual::lift::<T>(dd);
        let k = dual::dot(ddl, frame.n) / denom;
        let dp = dual::mul(dual::sub(ddl, dual::mul(dl, k)), s);
        (dual::dot(dp, frame.u), dual::dot(dp, frame.v))
    };
    let (jx, jy) = (jac(dx.into()), jac(dy.into()));
    let [ha, hb] = frame.half;
    let cu = edge_cdf(ha - a, jx.0.abs(), jy.0.abs()) * edge_cdf(ha + a, jx.0.abs(), jy.0.abs());
    if cu.value() == 0.0 {
        return zero;
    }
    let cv = edge_cdf(hb - b, jx.1.abs(), jy.1.abs()) * edge_cdf(hb + b, jx.1.abs(), jy.1.abs());
    cu * cv
}

/// Binary hit test of the ray through `pixel`, used for non-rect primitives.
fn binary_coverage(cam: &Camera, pixel: [f64; 2], prim: &MirrorPrimitive, single_sided: bool) -> f64 {
    let ray = cam.ray_unchecked(pixel[0], pixel[1]);
    let opts = IntersectOptions {
        eps_t: 0.0,
        single_sided,
    };
    if prim.intersect(&ray, &opts).is_some() {
        1.0
    } else {
        0.0
    }
}

/// Mirror coverage `M` of continuous pixel `pixel`.
pub fn pixel_coverage(cam: &Camera, pixel: [f64; 2], prim: &MirrorPrimitive, single_sided: bool) -> f64 {
    if !prim.active {
        return 0.0;
    }
    match prim.kind {
        PrimitiveKind::Rect => coverage_with(cam, pixel, &prim.plain_frame(), single_sided),
        PrimitiveKind::Cylinder => binary_coverage(cam, pixel, prim, single_sided),
    }
}

/// Coverage with its gradient over the primitive parameters.
pub fn pixel_coverage_dual(cam: &Camera, pixel: [f64; 2], prim: &MirrorPrimitive, single_sided: bool) -> Dual<PRIM_PARAMS> {
    if !prim.active {
        return Dual::constant(0.0);
    }
    match prim.kind {
        PrimitiveKind::Rect => coverage_with(cam, pixel, &prim.dual_frame(), single_sided),
        PrimitiveKind::Cylinder => Dual::constant(binary_coverage(cam, pixel, prim, single_sided)),
    }
}

/// Index and value of the largest positive coverage; ties keep the lowest index.
pub fn first_bounce_coverage(cam: &Camera, pixel: [f64; 2], prims: &[MirrorPrimitive], single_sided: bool) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in prims.iter().enumerate() {
        let m = pixel_coverage(cam, pixel, p, single_sided);
        if m > 0.0 && best.is_none_or(|b| m > b.1) {
            best = Some((i, m));
        }
    }
    best
}

/// One-channel image of `max_i M_i` at pixel centers.
pub fn render_mask(cam: &Camera, prims: &[MirrorPrimitive], single_sided: bool) -> ImageBuffer {
    let data: Vec<f64> = (0..cam.width * cam.height)
        .into_par_iter()
        .map(|k| {
            let px = [(k % cam.width) as f64 + 0.5, (k / cam.width) as f64 + 0.5];
            first_bounce_coverage(cam, px, prims, single_sided).map_or(0.0, |b| b.1)
        })
        .collect();
    ImageBuffer::from_data(cam.width, cam.height, 1, data).expect("mask shape")
}

/// Fraction of `n * n` stratified sub-pixel rays hitting any primitive.
pub fn supersampled_mask(cam: &Camera, prims: &[MirrorPrimitive], n: usize, single_sided: bool) -> ImageBuffer {
    let data: Vec<f64> = (0..cam.width * cam.height)
        .into_par_iter()
        .map(|k| {
            let (i, j) = ((k % cam.width) as f64, (k / cam.width) as f64);
            let mut hits = 0usize;
            for a in 0..n {
                for b in 0..n {
                    let px = [i + (a as f64 + 0.5) / n as f64, j + (b as f64 + 0.5) / n as f64];
                    if prims.iter().any(|p| p.active && binary_coverage(cam, px, p, single_sided) > 0.0) {
                        hits += 1;
                    }
                }
            }
            hits as f64 / (n * n) as f64
        })
        .collect();
    ImageBuffer::from_data(cam.width, cam.height, 1, data).expect("mask shape")
}
