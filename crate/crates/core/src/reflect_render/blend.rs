//! Field rendering along unfolded reflection paths and coverage-weighted
//! blending with the primary branch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::coverage::first_bounce_coverage;
use super::{nearest_hit, path_via_plane, UnfoldedPath};
use crate::error::Result;
use crate::field::render::{check_outputs, composite, RayRenderResult};
use crate::field::sampling::{sample_hierarchical, stratified_with, RaySamples};
use crate::field::{FieldBatch, RadianceField};
use crate::scene::{Camera, IntersectOptions, MirrorPrimitive, Ray};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendConfig {
    pub coarse: usize,
    pub fine: usize,
    pub background: [f64; 3],
    pub bounce_limit: usize,
    pub single_sided: bool,
    pub eps_t: f64,
    /// Length of every reflected segment that does not end on a mirror.
    pub segment_far: f64,
    /// Scene box that open segments are clipped to.
    pub bounds: Option<[[f64; 3]; 2]>,
}

impl BlendConfig {
    pub fn intersect_options(&self) -> IntersectOptions {
        IntersectOptions {
            eps_t: self.eps_t,
            single_sided: self.single_sided,
        }
    }
}

/// The two branches of one pixel before compositing.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelBranches {
    pub coverage: f64,
    /// Primitive with the largest coverage; receives the mask gradient.
    pub argmax: Option<usize>,
    /// Primitive whose plane reflects the reflected branch.
    pub mirror: Option<usize>,
    pub primary: Option<(UnfoldedPath, f64)>,
    pub reflected: Option<(UnfoldedPath, f64)>,
}

/// Coverage and branch geometry of continuous pixel `pixel`. Only the
/// branches with non-zero blend weight are built.
pub fn pixel_branches(cam: &Camera, pixel: [f64; 2], prims: &[MirrorPrimitive], cfg: &BlendConfig) -> PixelBranches {
    let ray = cam.ray_unchecked(pixel[0], pixel[1]);
    let opts = cfg.intersect_options();
    let best = if cfg.bounce_limit == 0 { None } else { first_bounce_coverage(cam, pixel, prims, cfg.single_sided) };
    let (mut coverage, argmax) = best.map_or((0.0, None), |(i, m)| (m, Some(i)));
    let mut mirror = None;
    let mut reflected = None;
    if let Some(i) = argmax {
        let j = nearest_hit(&ray, prims, &opts).map_or(i, |(j, _)| j);
        match path_via_plane(&ray, prims, j, cfg.bounce_limit, &opts) {
            Some(p) => {
                reflected = Some((UnfoldedPath::new(&p, cam.far, cfg.segment_far, cfg.bounds.as_ref()), cam.near));
                mirror = Some(j);
            }
            None => coverage = 0.0,
        }
    }
    // The reflected branch may end before near when the mirror is very close.
    if let Some((p, near)) = &reflected {
        if p.end <= *near * (1.0 + 1e-9) {
            reflected = None;
            coverage = 0.0;
        }
    }
    let primary = (coverage < 1.0).then(|| (UnfoldedPath::straight(&ray, cam.near, cam.far, cfg.bounds.as_ref()), cam.near));
    if coverage <= 0.0 {
        reflected = None;
    }
    PixelBranches {
        coverage,
        argmax: argmax.filter(|_| coverage > 0.0),
        mirror: mirror.filter(|_| coverage > 0.0),
        primary,
        reflected,
    }
}

/// How coarse samples are jittered and fine samples drawn.
pub enum Jitter<'a> {
    /// Stratum midpoints; fine samples from a generator seeded per path.
    Deterministic(&'a [u64]),
    Random(&'a mut ChaCha8Rng),
}

fn positions(paths: &[(&UnfoldedPath, f64)], samples: &[RaySamples], with_dirs: bool) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let mut pos = Vec::new();
    let mut dirs = Vec::new();
    for ((p, _), s) in paths.iter().zip(samples) {
        for &t in &s.t {
            pos.push(p.position(t).into());
            if with_dirs {
                dirs.push(p.direction(t).into());
            }
        }
    }
    (pos, dirs)
}

/// Coarse stratified samples over `[near, end]` of each path, then fine
/// samples from the density-only coarse weights.
pub fn plan_paths(field: &RadianceField, paths: &[(&UnfoldedPath, f64)], coarse: usize, fine: usize, jitter: Jitter<'_>) -> Result<Vec<RaySamples>> {
    let mut jitter = jitter;
    let coarse_s: Vec<RaySamples> = paths
        .iter()
        .map(|(p, near)| match &mut jitter {
            Jitter::Deterministic(_) => stratified_with(*near, p.end, coarse, || 0.5),
            Jitter::Random(rng) => stratified_with(*near, p.end, coarse, || rng.random::<f64>()),
        })
        .collect();
    if fine == 0 {
        return Ok(coarse_s);
    }
    let (pos, _) = positions(paths, &coarse_s, false);
    let sigma = field.forward(&pos, None).sigma;
    check_outputs(&sigma, &[])?;
    let zero = vec![[0.0; 3]; coarse];
    Ok(coarse_s
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let w = composite(&sigma[k * coarse..(k + 1) * coarse], &zero, &s.t, &s.deltas, [0.0; 3]).weights;
            match &mut jitter {
                Jitter::Deterministic(seeds) => sample_hierarchical(s, &w, fine, &mut ChaCha8Rng::seed_from_u64(seeds[k])),
                Jitter::Random(rng) => sample_hierarchical(s, &w, fine, *rng),
            }
        })
        .collect())
}

/// Field outputs and composites along planned paths.
pub fn composite_paths(
    field: &RadianceField,
    paths: &[(&UnfoldedPath, f64)],
    samples: &[RaySamples],
    background: [f64; 3],
) -> Result<(FieldBatch, Vec<RayRenderResult>, Vec<usize>)> {
    let (pos, dirs) = positions(paths, samples, true);
    let out = field.forward(&pos, Some(&dirs));
    check_outputs(&out.sigma, &out.color)?;
    let mut offsets = vec![0];
    let mut results = Vec::with_capacity(samples.len());
    for s in samples {
        let a = *offsets.last().unwrap();
        let b = a + s.len();
        results.push(composite(&out.sigma[a..b], &out.color[a..b], &s.t, &s.deltas, background));
        offsets.push(b);
    }
    Ok((out, results, offsets))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendedSample {
    pub color: [f64; 3],
    pub coverage: f64,
    pub mirror: Option<usize>,
    pub primary: Option<[f64; 3]>,
    pub reflected: Option<[f64; 3]>,
    /// Expected depth of the primary branch when rendered.
    pub depth: Option<f64>,
}

/// Seed of the fine sampler for one branch of one pixel.
pub fn pixel_seed(cam: &Camera, pixel: [f64; 2], branch: u64) -> u64 {
    let (i, j) = (pixel[0].floor().max(0.0) as u64, pixel[1].floor().max(0.0) as u64);
    ((j * cam.width as u64 + i) << 1 | branch) ^ ((cam.id as u64) << 40)
}

/// Deterministic blended render of a list of pixels of one camera.
pub fn render_blended_rays(
    field: &RadianceField,
    prims: &[MirrorPrimitive],
    cam: &Camera,
    pixels: &[[f64; 2]],
    cfg: &BlendConfig,
) -> Result<Vec<BlendedSample>> {
    let parts: Vec<Result<Vec<BlendedSample>>> = pixels
        .par_chunks(64)
        .map(|chunk| {
            let branches: Vec<PixelBranches> = chunk.iter().map(|&px| pixel_branches(cam, px, prims, cfg)).collect();
            let mut paths = Vec::new();
            let mut seeds = Vec::new();
            for (b, &px) in branches.iter().zip(chunk) {
                if let Some((p, n)) = &b.primary {
                    paths.push((p, *n));
                    seeds.push(pixel_seed(cam, px, 0));
                }
                if let Some((p, n)) = &b.reflected {
                    paths.push((p, *n));
                    seeds.push(pixel_seed(cam, px, 1));
                }
            }
            let samples = plan_paths(field, &paths, cfg.coarse, cfg.fine, Jitter::Deterministic(&seeds))?;
            let (_, results, _) = composite_paths(field, &paths, &samples, cfg.background)?;
            let mut it = results.into_iter();
            Ok(branches
                .iter()
                .map(|b| {
                    let prim = b.primary.as_ref().map(|_| it.next().expect("primary result"));
                    let refl = b.reflected.as_ref().map(|_| it.next().expect("reflected result"));
                    let m = b.coverage;
                    let pc = prim.as_ref().map(|r| r.color);
                    let rc = refl.as_ref().map(|r| r.color);
                    let color = std::array::from_fn(|c| m * rc.map_or(0.0, |x| x[c]) + (1.0 - m) * pc.map_or(0.0, |x| x[c]));
                    BlendedSample {
                        color,
                        coverage: m,
                        mirror: b.mirror,
                        primary: pc,
                        reflected: rc,
                        depth: prim.map(|r| r.depth),
                    }
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(pixels.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn render_pixel_blended(field: &RadianceField, prims: &[MirrorPrimitive], cam: &Camera, pixel: [f64; 2], cfg: &BlendConfig) -> Result<BlendedSample> {
    Ok(render_blended_rays(field, prims, cam, &[pixel], cfg)?.remove(0))
}

/// Plain deterministic render of straight rays, for comparison.
pub fn render_straight(field: &RadianceField, ray: &Ray, near: f64, far: f64, cfg: &BlendConfig, seed: u64) -> Result<RayRenderResult> {
    let path = UnfoldedPath::straight(ray, near, far, cfg.bounds.as_ref());
    let paths = [(&path, near)];
    let s = plan_paths(field, &paths, cfg.coarse, cfg.fine, Jitter::Deterministic(&[seed]))?;
    Ok(composite_paths(field, &paths, &s, cfg.background)?.1.remove(0))
}
