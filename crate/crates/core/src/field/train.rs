//! Batched loss evaluation and reverse-mode gradients for photometric and
//! depth-reprojection training.
//!
//! Sampling is split from differentiation: [`build_sample_plan`] draws every
//! sample position once, and [`loss_gradients`] is a deterministic function
//! of the parameters given that plan.

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;

use super::mlp::RadianceField;
use super::render::{check_outputs, composite, composite_backward};
use super::sampling::{sample_hierarchical, sample_stratified, RaySamples};
use crate::error::{Error, Result};
use crate::losses::{pnorm_grad, pnorm_term, reproject_depth, LossReport};
use crate::scene::{Camera, Ray};

/// A second camera that checks this ray's depth, with its pair weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Partner {
    pub camera: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRay {
    pub ray: Ray,
    pub target: [f64; 3],
    pub partner: Option<Partner>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub p: f64,
    pub lambda_d: f64,
    pub background: [f64; 3],
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub partner_samples: usize,
    /// Rays per gradient chunk; fixes the reduction order.
    pub chunk_rays: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            p: 2.0,
            lambda_d: 0.05,
            background: [0.0; 3],
            coarse_samples: 32,
            fine_samples: 32,
            partner_samples: 64,
            chunk_rays: 64,
        }
    }
}

/// Frozen sample positions for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub primary: Vec<RaySamples>,
    pub partner: Vec<Option<RaySamples>>,
}

/// Stratified coarse samples, density-only coarse render, inverse-CDF fine
/// samples merged with the coarse ones. Partner rays get stratified samples
/// over their camera's range.
pub fn build_sample_plan(
    field: &RadianceField,
    batch: &[TrainRay],
    cameras: &[Camera],
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<SamplePlan> {
    let mut primary = Vec::with_capacity(batch.len());
    let mut partner = Vec::with_capacity(batch.len());
    let coarse: Vec<RaySamples> = batch
        .iter()
        .map(|r| {
            let (near, far) = ray_range(&r.ray, cameras);
            let far = r.ray.clip_far(near, far, Some(&field.bounds()));
            sample_stratified(near, far, cfg.coarse_samples, rng)
        })
        .collect();
    let positions: Vec<[f64; 3]> = batch
        .iter()
        .zip(&coarse)
        .flat_map(|(r, s)| s.t.iter().map(move |&t| r.ray.at(t).into()))
        .collect();
    let sigma = field.forward(&positions, None).sigma;
    check_outputs(&sigma, &[])?;
    let zero = vec![[0.0; 3]; cfg.coarse_samples];
    for (i, (r, s)) in batch.iter().zip(&coarse).enumerate() {
        let sig = &sigma[i * cfg.coarse_samples..(i + 1) * cfg.coarse_samples];
        let weights = composite(sig, &zero, &s.t, &s.deltas, [0.0; 3]).weights;
        primary.push(if cfg.fine_samples > 0 {
            sample_hierarchical(s, &weights, cfg.fine_samples, rng)
        } else {
            s.clone()
        });
        partner.push(r.partner.map(|p| {
            let cam = &cameras[p.camera];
            sample_stratified(cam.near, cam.far, cfg.partner_samples, rng)
        }));
    }
    Ok(SamplePlan { primary, partner })
}

/// Near/far of the camera that produced `ray`, or of the first camera for
/// rays built without one.
fn ray_range(ray: &Ray, cameras: &[Camera]) -> (f64, f64) {
    let cam = cameras.iter().find(|c| c.id == ray.camera_id).unwrap_or(&cameras[0]);
    (cam.near, cam.far)
}

#[derive(Debug, Default, Clone)]
struct ChunkSums {
    image: f64,
    depth: f64,
    grad: Vec<f64>,
}

/// Loss report and parameter gradient of
/// `mean_r sum_c |C - C*|^p + lambda_d * mean_{r with partner} w (D_j - z_j)^2`.
pub fn loss_gradients(
    field: &RadianceField,
    batch: &[TrainRay],
    cameras: &[Camera],
    cfg: &LossConfig,
    plan: &SamplePlan,
) -> Result<(LossReport, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("loss gradients over an empty batch".into()));
    }
    assert_eq!(plan.primary.len(), batch.len());
    let n_rays = batch.len() as f64;
    let n_depth = batch.iter().filter(|r| r.partner.is_some()).count().max(1) as f64;
    let chunk = cfg.chunk_rays.max(1);
    let starts: Vec<usize> = (0..batch.len()).step_by(chunk).collect();
    let parts: Vec<Result<ChunkSums>> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + chunk).min(batch.len());
            chunk_gradients(field, &batch[s..e], cameras, cfg, &plan.primary[s..e], &plan.partner[s..e], n_rays, n_depth)
        })
        .collect();
    let mut grad = vec![0.0; field.parameter_count()];
    let (mut image, mut depth) = (0.0, 0.0);
    for part in parts {
        let part = part?;
        image += part.image;
        depth += part.depth;
        for (g, v) in grad.iter_mut().zip(&part.grad) {
            *g += v;
        }
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite { what: "gradient", index });
    }
    let report = LossReport::new(image / n_rays, depth / n_depth, cfg.p, cfg.lambda_d)?;
    Ok((report, grad))
}

#[allow(clippy::too_many_arguments)]
fn chunk_gradients(
    field: &RadianceField,
    rays: &[TrainRay],
    cameras: &[Camera],
    cfg: &LossConfig,
    primary: &[RaySamples],
    partner: &[Option<RaySamples>],
    n_rays: f64,
    n_depth: f64,
) -> Result<ChunkSums> {
    let mut sums = ChunkSums {
        grad: vec![0.0; field.parameter_count()],
        ..Default::default()
    };
    let mut offsets = Vec::with_capacity(rays.len() + 1);
    offsets.push(0);
    let mut positions = Vec::new();
    let mut dirs = Vec::new();
    for (r, s) in rays.iter().zip(primary) {
        let d: [f64; 3] = r.ray.direction.into();
        for &t in &s.t {
            positions.push(r.ray.at(t).into());
            dirs.push(d);
        }
        offsets.push(positions.len());
    }
    let out = field.forward(&positions, Some(&dirs));
    check_outputs(&out.sigma, &out.color)?;

    let results: Vec<_> = (0..rays.len())
        .map(|i| {
            let (a, b) = (offsets[i], offsets[i + 1]);
            composite(&out.sigma[a..b], &out.color[a..b], &primary[i].t, &primary[i].deltas, cfg.background)
        })
        .collect();

    let mut d_color = vec![[0.0; 3]; rays.len()];
    for (i, (r, res)) in rays.iter().zip(&results).enumerate() {
        for c in 0..3 {
            let e = res.color[c] - r.target[c];
            sums.image += pnorm_term(e, cfg.p);
            d_color[i][c] = pnorm_grad(e, cfg.p) / n_rays;
        }
    }

    // Depth reprojection through partner cameras.
    let mut d_depth = vec![0.0; rays.len()];
    let mut reps = Vec::new();
    let mut pp = Vec::new();
    for (i, (r, res)) in rays.iter().zip(&results).enumerate() {
        let (Some(p), Some(samples)) = (r.partner, &partner[i]) else { continue };
        if let Some(rep) = reproject_depth(&r.ray, res.depth, &cameras[p.camera]) {
            for &t in &samples.t {
                pp.push(rep.ray.at(t).into());
            }
            reps.push((i, p.weight, rep));
        }
    }
    if !reps.is_empty() && cfg.lambda_d != 0.0 {
        let pb = field.forward(&pp, None);
        check_outputs(&pb.sigma, &[])?;
        let mut dsig_all = Vec::with_capacity(pp.len());
        let mut back = Vec::with_capacity(reps.len());
        let mut start = 0;
        for (i, w, rep) in &reps {
            let s = partner[*i].as_ref().expect("partner samples");
            let sig = &pb.sigma[start..start + s.len()];
            let zero = vec![[0.0; 3]; s.len()];
            let res_j = composite(sig, &zero, &s.t, &s.deltas, [0.0; 3]);
            let resid = res_j.depth - rep.z;
            sums.depth += w * resid * resid;
            let g = cfg.lambda_d * 2.0 * w * resid / n_depth;
            let (dsig, _) = composite_backward(&res_j, &zero, &s.t, &s.deltas, [0.0; 3], [0.0; 3], g);
            dsig_all.extend(dsig);
            back.push((*i, g, start, s.len()));
            start += s.len();
        }
        let dx = field
            .backward(&pb, &dsig_all, None, &mut sums.grad, true)
            .expect("position gradients");
        for ((i, g, start, len), (_, _, rep)) in back.iter().zip(&reps) {
            let s = partner[*i].as_ref().expect("partner samples");
            let mut dd = Vector3::zeros();
            for k in 0..*len {
                dd += Vector3::from(dx[start + k]) * s.t[k];
            }
            let cam = &cameras[rays[*i].partner.expect("partner").camera];
            let q = rep.point - cam.origin;
            let z = q.norm();
            let dj = q / z;
            // D_j depends on the partner direction q/|q|; z_j = |q| enters with -g.
            let dq = (dd - dj * dj.dot(&dd)) / z - dj * *g;
            d_depth[*i] += dq.dot(&rays[*i].ray.direction);
        }
    }

    let mut dsig_all = Vec::with_capacity(positions.len());
    let mut dcol_all = Vec::with_capacity(positions.len());
    for (i, res) in results.iter().enumerate() {
        let (a, b) = (offsets[i], offsets[i + 1]);
        let (ds, dc) = composite_backward(
            res,
            &out.color[a..b],
            &primary[i].t,
            &primary[i].deltas,
            cfg.background,
            d_color[i],
            d_depth[i],
        );
        dsig_all.extend(ds);
        dcol_all.extend(dc);
    }
    field.backward(&out, &dsig_all, Some(&dcol_all), &mut sums.grad, false);
    Ok(sums)
}
