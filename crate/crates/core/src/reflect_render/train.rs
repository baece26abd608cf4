//! Joint optimization of the field and the mirror primitives.
//!
//! The field receives gradients through both branch colors. Primitive
//! parameters receive them only through the coverage mask: branch colors are
//! treated as constants with respect to the primitives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::blend::{composite_paths, pixel_branches, plan_paths, BlendConfig, Jitter, PixelBranches};
use super::coverage::{pixel_coverage, pixel_coverage_dual};
use crate::error::{Error, Result};
use crate::field::optim::{Adam, LrSchedule};
use crate::field::render::composite_backward;
use crate::field::sampling::RaySamples;
use crate::field::RadianceField;
use crate::losses::{pnorm_grad, pnorm_term, PNormSchedule};
use crate::scene::{Camera, ImageBuffer, MirrorPrimitive, PrimitiveKind, PRIM_PARAMS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Ray {
    pub camera: usize,
    pub pixel: [f64; 2],
    pub target: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Batch {
    pub rays: Vec<Stage2Ray>,
}

impl Stage2Batch {
    /// Uniform pixel centers over all views.
    pub fn sample(cameras: &[Camera], images: &[ImageBuffer], n: usize, rng: &mut impl Rng) -> Self {
        let rays = (0..n)
            .map(|_| {
                let v = rng.random_range(0..cameras.len());
                let (x, y) = (rng.random_range(0..cameras[v].width), rng.random_range(0..cameras[v].height));
                Stage2Ray {
                    camera: v,
                    pixel: [x as f64 + 0.5, y as f64 + 0.5],
                    target: images[v].pixel(x, y),
                }
            })
            .collect();
        Self { rays }
    }

    /// Uniform pixel centers of an edge band.
    pub fn sample_band(band: &EdgeBand, images: &[ImageBuffer], n: usize, rng: &mut impl Rng) -> Self {
        let rays = (0..n)
            .map(|_| {
                let (v, x, y) = band.pixels[rng.random_range(0..band.pixels.len())];
                Stage2Ray {
                    camera: v,
                    pixel: [x as f64 + 0.5, y as f64 + 0.5],
                    target: images[v].pixel(x, y),
                }
            })
            .collect();
        Self { rays }
    }
}

/// Pixels where some primitive has fractional coverage, grown by one pixel.
/// Outside of it the coverage gradient is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeBand {
    /// `(view, x, y)` in view order, then row-major.
    pub pixels: Vec<(usize, usize, usize)>,
    /// Pixel count over all views.
    pub total: usize,
}

impl EdgeBand {
    pub fn build(cameras: &[Camera], prims: &[MirrorPrimitive], single_sided: bool) -> Self {
        let per_view: Vec<Vec<(usize, usize, usize)>> = cameras
            .par_iter()
            .enumerate()
            .map(|(v, cam)| {
                let (w, h) = (cam.width, cam.height);
                let mut edge = vec![false; w * h];
                for p in prims {
                    let [x0, x1, y0, y1] = screen_window(cam, p);
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let m = pixel_coverage(cam, [x as f64 + 0.5, y as f64 + 0.5], p, single_sided);
                            edge[y * w + x] |= m > 0.0 && m < 1.0;
                        }
                    }
                }
                let mut out = Vec::new();
                for y in 0..h {
                    for x in 0..w {
                        let near = (y.saturating_sub(1)..(y + 2).min(h)).any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| edge[yy * w + xx]));
                        if near {
                            out.push((v, x, y));
                        }
                    }
                }
                out
            })
            .collect();
        Self {
            pixels: per_view.into_iter().flatten().collect(),
            total: cameras.iter().map(|c| c.width * c.height).sum(),
        }
    }
}

/// Pixel window `[x0, x1, y0, y1]` holding a rect's projection with a few
/// pixels of margin; the whole image for other primitives or when a corner is
/// behind the camera.
fn screen_window(cam: &Camera, p: &MirrorPrimitive) -> [usize; 4] {
    const MARGIN: f64 = 3.0;
    let full = [0, cam.width, 0, cam.height];
    if p.kind != PrimitiveKind::Rect {
        return full;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for (a, b) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
        let corner = p.center + p.u * (a * p.half_extents[0]) + p.v * (b * p.half_extents[1]);
        let Some((px, _)) = cam.reproject(&corner) else {
            return full;
        };
        for i in 0..2 {
            lo[i] = lo[i].min(px[i]);
            hi[i] = hi[i].max(px[i]);
        }
    }
    let clamp = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
    [
        clamp((lo[0] - MARGIN).floor(), cam.width),
        clamp((hi[0] + MARGIN).ceil(), cam.width),
        clamp((lo[1] - MARGIN).floor(), cam.height),
        clamp((hi[1] + MARGIN).ceil(), cam.height),
    ]
}

/// Frozen per-ray geometry and samples of one batch.
pub struct Stage2Plan {
    pub branches: Vec<PixelBranches>,
    pub primary: Vec<Option<RaySamples>>,
    pub reflected: Vec<Option<RaySamples>>,
}

pub fn build_stage2_plan(
    field: &RadianceField,
    prims: &[MirrorPrimitive],
    cameras: &[Camera],
    batch: &Stage2Batch,
    cfg: &BlendConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Stage2Plan> {
    let branches: Vec<PixelBranches> = batch
        .rays
        .par_iter()
        .map(|r| pixel_branches(&cameras[r.camera], r.pixel, prims, cfg))
        .collect();
    let mut paths = Vec::new();
    for b in &branches {
        if let Some((p, n)) = &b.primary {
            paths.push((p, *n));
        }
        if let Some((p, n)) = &b.reflected {
            paths.push((p, *n));
        }
    }
    let mut samples = plan_paths(field, &paths, cfg.coarse, cfg.fine, Jitter::Random(rng))?.into_iter();
    let mut primary = Vec::with_capacity(branches.len());
    let mut reflected = Vec::with_capacity(branches.len());
    for b in &branches {
        primary.push(b.primary.as_ref().map(|_| samples.next().expect("primary samples")));
        reflected.push(b.reflected.as_ref().map(|_| samples.next().expect("reflected samples")));
    }
    Ok(Stage2Plan { branches, primary, reflected })
}

/// Branch colors and coverage of one evaluated ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayEval {
    pub coverage: f64,
    pub primary: [f64; 3],
    pub reflected: [f64; 3],
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Gradients {
    pub loss: f64,
    pub field: Vec<f64>,
    pub primitives: Vec<[f64; PRIM_PARAMS]>,
    pub evals: Vec<RayEval>,
}

/// Loss `mean_r sum_c |M C_r + (1 - M) C_p - C*|^p` and its gradients.
pub fn stage2_loss_gradients(
    field: &RadianceField,
    prims: &[MirrorPrimitive],
    cameras: &[Camera],
    batch: &Stage2Batch,
    plan: &Stage2Plan,
    cfg: &BlendConfig,
    p: f64,
    chunk_rays: usize,
) -> Result<Stage2Gradients> {
    loss_gradients(field, prims, cameras, batch, plan, cfg, p, chunk_rays, true)
}

#[allow(clippy::too_many_arguments)]
fn loss_gradients(
    field: &RadianceField,
    prims: &[MirrorPrimitive],
    cameras: &[Camera],
    batch: &Stage2Batch,
    plan: &Stage2Plan,
    cfg: &BlendConfig,
    p: f64,
    chunk_rays: usize,
    field_grad: bool,
) -> Result<Stage2Gradients> {
    let n = batch.rays.len();
    if n == 0 {
        return Err(Error::InvalidInput("stage-2 step over an empty batch".into()));
    }
    let chunk = chunk_rays.max(1);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts: Vec<Result<Stage2Gradients>> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + chunk).min(n);
            chunk_gradients(field, prims, cameras, batch, plan, cfg, p, s..e, n as f64, field_grad)
        })
        .collect();
    let mut total = Stage2Gradients {
        loss: 0.0,
        field: vec![0.0; field.parameter_count()],
        primitives: vec![[0.0; PRIM_PARAMS]; prims.len()],
        evals: Vec::with_capacity(n),
    };
    for part in parts {
        let part = part?;
        total.loss += part.loss;
        for (g, v) in total.field.iter_mut().zip(&part.field) {
            *g += v;
        }
        for (g, v) in total.primitives.iter_mut().zip(&part.primitives) {
            for k in 0..PRIM_PARAMS {
                g[k] += v[k];
            }
        }
        total.evals.extend(part.evals);
    }
    total.loss /= n as f64;
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn chunk_gradients(
    field: &RadianceField,
    prims: &[MirrorPrimitive],
    cameras: &[Camera],
    batch: &Stage2Batch,
    plan: &Stage2Plan,
    cfg: &BlendConfig,
    p: f64,
    range: std::ops::Range<usize>,
    n_rays: f64,
    field_grad: bool,
) -> Result<Stage2Gradients> {
    let mut paths = Vec::new();
    let mut samples = Vec::new();
    // Path slot of each branch, per ray.
    let mut slots = Vec::with_capacity(range.len());
    for i in range.clone() {
        let b = &plan.branches[i];
        let mut slot = (None, None);
        if let (Some((path, near)), Some(s)) = (&b.primary, &plan.primary[i]) {
            slot.0 = Some(paths.len());
            paths.push((path, *near));
            samples.push(s.clone());
        }
        if let (Some((path, near)), Some(s)) = (&b.reflected, &plan.reflected[i]) {
            slot.1 = Some(paths.len());
            paths.push((path, *near));
            samples.push(s.clone());
        }
        slots.push(slot);
    }
    let (out, results, offsets) = composite_paths(field, &paths, &samples, cfg.background)?;
    let mut d_color = vec![[0.0; 3]; paths.len()];
    let mut sums = Stage2Gradients {
        loss: 0.0,
        field: vec![0.0; field.parameter_count()],
        primitives: vec![[0.0; PRIM_PARAMS]; prims.len()],
        evals: Vec::with_capacity(range.len()),
    };
    for (k, i) in range.enumerate() {
        let r = &batch.rays[i];
        let b = &plan.branches[i];
        let m = b.coverage;
        let cp = slots[k].0.map_or([0.0; 3], |s| results[s].color);
        let cr = slots[k].1.map_or([0.0; 3], |s| results[s].color);
        let color: [f64; 3] = std::array::from_fn(|c| m * cr[c] + (1.0 - m) * cp[c]);
        let mut dm = 0.0;
        for c in 0..3 {
            let e = color[c] - r.target[c];
            sums.loss += pnorm_term(e, p);
            let g = pnorm_grad(e, p) / n_rays;
            if let Some(s) = slots[k].0 {
                d_color[s][c] = (1.0 - m) * g;
            }
            if let Some(s) = slots[k].1 {
                d_color[s][c] = m * g;
            }
            dm += g * (cr[c] - cp[c]);
        }
        if let Some(j) = b.argmax {
            let md = pixel_coverage_dual(&cameras[r.camera], r.pixel, &prims[j], cfg.single_sided);
            for q in 0..PRIM_PARAMS {
                sums.primitives[j][q] += dm * md.g[q];
            }
        }
        sums.evals.push(RayEval {
            coverage: m,
            primary: cp,
            reflected: cr,
            color,
        });
    }
    if !field_grad {
        return Ok(sums);
    }
    let mut dsig = Vec::with_capacity(out.len());
    let mut dcol = Vec::with_capacity(out.len());
    for (s, res) in results.iter().enumerate() {
        let (a, b) = (offsets[s], offsets[s + 1]);
        let (ds, dc) = composite_backward(res, &out.color[a..b], &samples[s].t, &samples[s].deltas, cfg.background, d_color[s], 0.0);
        dsig.extend(ds);
        dcol.extend(dc);
    }
    if !out.is_empty() {
        field.backward(&out, &dsig, Some(&dcol), &mut sums.field, false);
    }
    Ok(sums)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Report {
    pub iteration: u64,
    pub loss: f64,
    pub p: f64,
    pub accepted: bool,
    /// Mean coverage over the batch.
    pub mean_coverage: f64,
}

/// Learning-rate and step settings of the joint optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Settings {
    pub lr: LrSchedule,
    pub primitive_lr_scale: f64,
    pub min_half_extent: f64,
    pub batch_rays: usize,
    /// Edge-band rays per step for the primitive gradient; 0 uses the batch.
    pub edge_rays: usize,
    pub chunk_rays: usize,
}

/// Steps between edge-band rebuilds.
pub const EDGE_REFRESH: u64 = 10;

pub struct Stage2State {
    pub field: RadianceField,
    pub primitives: Vec<MirrorPrimitive>,
    pub iteration: u64,
    pub schedule: PNormSchedule,
    /// Multiplier on both learning rates, halved on every rejected step.
    pub lr_factor: f64,
    field_adam: Adam,
    prim_adam: Vec<Adam>,
    band: Option<EdgeBand>,
    rng: ChaCha8Rng,
}

impl Stage2State {
    pub fn new(field: RadianceField, primitives: Vec<MirrorPrimitive>, schedule: PNormSchedule, seed: u64) -> Self {
        Self {
            field_adam: Adam::new(field.parameter_count()),
            prim_adam: primitives.iter().map(|_| Adam::new(PRIM_PARAMS)).collect(),
            field,
            primitives,
            iteration: 0,
            schedule,
            lr_factor: 1.0,
            band: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng_state(&self) -> ([u8; 32], u64, u128) {
        (self.rng.get_seed(), self.rng.get_stream(), self.rng.get_word_pos())
    }
}

/// One joint step on a freshly sampled batch.
pub fn stage2_train_step(
    state: &mut Stage2State,
    cameras: &[Camera],
    images: &[ImageBuffer],
    cfg: &BlendConfig,
    s: &Stage2Settings,
) -> Result<Stage2Report> {
    let batch = Stage2Batch::sample(cameras, images, s.batch_rays, &mut state.rng);
    if s.edge_rays == 0 || state.primitives.is_empty() {
        return stage2_step_on(state, cameras, &batch, None, cfg, s);
    }
    if state.band.is_none() || state.iteration % EDGE_REFRESH == 0 {
        state.band = Some(EdgeBand::build(cameras, &state.primitives, cfg.single_sided));
    }
    let band = state.band.as_ref().expect("edge band");
    let edge = if band.pixels.is_empty() {
        Stage2Batch { rays: Vec::new() }
    } else {
        Stage2Batch::sample_band(band, images, s.edge_rays, &mut state.rng)
    };
    let weight = band.pixels.len() as f64 / band.total as f64;
    stage2_step_on(state, cameras, &batch, Some((&edge, weight)), cfg, s)
}

/// One joint step on a given batch. With an edge batch and its band
/// fraction, the primitive gradient comes from the edge batch alone. A
/// non-finite loss or gradient rejects the step and halves the learning rates.
pub fn stage2_step_on(
    state: &mut Stage2State,
    cameras: &[Camera],
    batch: &Stage2Batch,
    edge: Option<(&Stage2Batch, f64)>,
    cfg: &BlendConfig,
    s: &Stage2Settings,
) -> Result<Stage2Report> {
    let p = state.schedule.p(state.iteration);
    let plan = build_stage2_plan(&state.field, &state.primitives, cameras, batch, cfg, &mut state.rng)?;
    let mean_coverage = plan.branches.iter().map(|b| b.coverage).sum::<f64>() / batch.rays.len().max(1) as f64;
    let mut grads = match stage2_loss_gradients(&state.field, &state.primitives, cameras, batch, &plan, cfg, p, s.chunk_rays) {
        Ok(g) => Some(g),
        Err(Error::NonFinite { .. }) => None,
        Err(e) => return Err(e),
    };
    if let (Some(g), Some((edge, weight))) = (grads.as_mut(), edge) {
        g.primitives = if edge.rays.is_empty() {
            vec![[0.0; PRIM_PARAMS]; state.primitives.len()]
        } else {
            let eplan = build_stage2_plan(&state.field, &state.primitives, cameras, edge, cfg, &mut state.rng)?;
            match loss_gradients(&state.field, &state.primitives, cameras, edge, &eplan, cfg, p, s.chunk_rays, false) {
                Ok(e) => e.primitives.iter().map(|q| q.map(|x| x * weight)).collect(),
                Err(Error::NonFinite { .. }) => vec![[f64::NAN; PRIM_PARAMS]; state.primitives.len()],
                Err(e) => return Err(e),
            }
        };
    }
    let finite = grads.as_ref().is_some_and(|g| {
        g.loss.is_finite() && g.field.iter().all(|x| x.is_finite()) && g.primitives.iter().flatten().all(|x| x.is_finite())
    });
    let iteration = state.iteration;
    state.iteration += 1;
    let Some(grads) = grads.filter(|_| finite) else {
        state.lr_factor *= 0.5;
        log::warn!("stage 2 iteration {iteration}: non-finite loss, step rejected, lr factor {}", state.lr_factor);
        return Ok(Stage2Report {
            iteration,
            loss: f64::NAN,
            p,
            accepted: false,
            mean_coverage,
        });
    };
    let lr = s.lr.at(iteration) * state.lr_factor;
    let before = state.field.params.clone();
    state.field_adam.step(&mut state.field.params, &grads.field, lr);
    if state.field.check_finite().is_err() {
        state.field.params = before;
        state.lr_factor *= 0.5;
        return Ok(Stage2Report {
            iteration,
            loss: grads.loss,
            p,
            accepted: false,
            mean_coverage,
        });
    }
    let plr = lr * s.primitive_lr_scale;
    for (k, prim) in state.primitives.iter_mut().enumerate() {
        let mut delta = [0.0; PRIM_PARAMS];
        state.prim_adam[k].step(&mut delta, &grads.primitives[k], plr);
        *prim = prim.stepped(&delta, s.min_half_extent);
    }
    Ok(Stage2Report {
        iteration,
        loss: grads.loss,
        p,
        accepted: true,
        mean_coverage,
    })
}
