//! Photometric training with depth-reprojection regularization, and
//! deterministic full-view rendering of color, depth and depth variance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::PipelineConfig;
use crate::error::Result;
use crate::field::optim::{Adam, LrSchedule};
use crate::field::render::{check_outputs, composite};
use crate::field::sampling::{sample_hierarchical, stratified_midpoints};
use crate::field::train::{build_sample_plan, loss_gradients, LossConfig, Partner, TrainRay};
use crate::field::RadianceField;
use crate::losses::{camera_weight_with, max_camera_weight, LossLog, LossReport};
use crate::scene::{Camera, ImageBuffer, Ray};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainView {
    pub camera: Camera,
    pub image: ImageBuffer,
}

pub fn loss_config(cfg: &PipelineConfig, p: f64, lambda_d: f64) -> LossConfig {
    LossConfig {
        p,
        lambda_d,
        background: cfg.sampling.background,
        coarse_samples: cfg.sampling.coarse,
        fine_samples: cfg.sampling.fine,
        partner_samples: cfg.sampling.partner,
        chunk_rays: cfg.sampling.chunk_rays,
    }
}

/// Draws `n` training rays uniformly over all pixels of all views. A
/// `depth_fraction` share gets a uniformly chosen partner camera.
pub fn sample_batch(
    views: &[TrainView],
    cameras: &[Camera],
    n: usize,
    depth_fraction: f64,
    w_max: f64,
    invert_weight: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<TrainRay> {
    (0..n)
        .map(|_| {
            let vi = rng.random_range(0..views.len());
            let v = &views[vi];
            let (x, y) = (rng.random_range(0..v.camera.width), rng.random_range(0..v.camera.height));
            let partner = (views.len() > 1 && rng.random::<f64>() < depth_fraction).then(|| {
                let mut j = rng.random_range(0..views.len() - 1);
                if j >= vi {
                    j += 1;
                }
                let weight = if w_max > 0.0 {
                    camera_weight_with(&cameras[vi], &cameras[j], w_max, invert_weight)
                } else {
                    0.0
                };
                Partner { camera: j, weight }
            });
            TrainRay {
                ray: v.camera.pixel_center_ray(x, y),
                target: v.image.pixel(x, y),
                partner,
            }
        })
        .collect()
}

pub struct Stage1Trainer {
    pub field: RadianceField,
    pub iteration: u64,
    adam: Adam,
    rng: ChaCha8Rng,
    cameras: Vec<Camera>,
    w_max: f64,
}

impl Stage1Trainer {
    pub fn new(field: RadianceField, views: &[TrainView], seed: u64) -> Self {
        let cameras: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
        let w_max = max_camera_weight(&cameras);
        Self {
            adam: Adam::new(field.parameter_count()),
            field,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cameras,
            w_max,
        }
    }

    /// Seed, stream and word position of the batch generator.
    pub fn rng_state(&self) -> ([u8; 32], u64, u128) {
        (self.rng.get_seed(), self.rng.get_stream(), self.rng.get_word_pos())
    }

    pub fn step(&mut self, views: &[TrainView], cfg: &PipelineConfig) -> Result<LossReport> {
        let s1 = &cfg.stage1;
        let batch = sample_batch(
            views,
            &self.cameras,
            s1.batch_rays,
            if s1.lambda_d > 0.0 { s1.depth_fraction } else { 0.0 },
            self.w_max,
            s1.invert_weight,
            &mut self.rng,
        );
        let lc = loss_config(cfg, 2.0, s1.lambda_d);
        let plan = build_sample_plan(&self.field, &batch, &self.cameras, &lc, &mut self.rng)?;
        let (report, grad) = loss_gradients(&self.field, &batch, &self.cameras, &lc, &plan)?;
        let lr = LrSchedule {
            start: s1.lr_start,
            end: s1.lr_end,
            steps: s1.iterations,
        }
        .at(self.iteration);
        self.adam.step(&mut self.field.params, &grad, lr);
        self.field.check_finite()?;
        self.iteration += 1;
        Ok(report)
    }

    /// Runs the configured budget, logging every `log_every` iterations.
    pub fn run(&mut self, views: &[TrainView], cfg: &PipelineConfig, mut log: Option<&mut LossLog>) -> Result<LossReport> {
        let mut last = None;
        while self.iteration < cfg.stage1.iterations {
            let it = self.iteration;
            let r = self.step(views, cfg)?;
            if let Some(log) = log.as_deref_mut() {
                if cfg.stage1.log_every > 0 && it % cfg.stage1.log_every == 0 {
                    log.append(it, &r)?;
                }
            }
            last = Some(r);
        }
        if let Some(log) = log {
            log.flush()?;
        }
        self.field.quantize_to_f32();
        Ok(last.unwrap_or(LossReport {
            image_loss: 0.0,
            depth_loss: 0.0,
            p_used: 2.0,
            total: 0.0,
        }))
    }
}

/// Color, expected depth and depth variance of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRender {
    pub color: ImageBuffer,
    pub depth: ImageBuffer,
    pub variance: ImageBuffer,
}

/// Deterministic per-ray render: midpoint coarse samples, fine samples from
/// a generator seeded by the pixel index.
pub fn render_rays(field: &RadianceField, rays: &[(Ray, f64, f64)], cfg: &PipelineConfig) -> Result<Vec<([f64; 3], f64, f64)>> {
    use rayon::prelude::*;
    let chunk = cfg.sampling.chunk_rays.max(1);
    let parts: Vec<Result<Vec<([f64; 3], f64, f64)>>> = rays
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, rs)| {
            let coarse: Vec<_> = rs.iter().map(|(_, n, f)| stratified_midpoints(*n, *f, cfg.sampling.coarse)).collect();
            let pos: Vec<[f64; 3]> = rs
                .iter()
                .zip(&coarse)
                .flat_map(|((r, _, _), s)| s.t.iter().map(move |&t| r.at(t).into()))
                .collect();
            let sig = field.forward(&pos, None).sigma;
            check_outputs(&sig, &[])?;
            let zero = vec![[0.0; 3]; cfg.sampling.coarse];
            let mut samples = Vec::with_capacity(rs.len());
            for (k, s) in coarse.iter().enumerate() {
                let w = composite(&sig[k * s.len()..(k + 1) * s.len()], &zero, &s.t, &s.deltas, [0.0; 3]).weights;
                let mut rng = ChaCha8Rng::seed_from_u64((ci * chunk + k) as u64);
                samples.push(if cfg.sampling.fine > 0 { sample_hierarchical(s, &w, cfg.sampling.fine, &mut rng) } else { s.clone() });
            }
            let mut pos = Vec::new();
            let mut dirs = Vec::new();
            for ((r, _, _), s) in rs.iter().zip(&samples) {
                for &t in &s.t {
                    pos.push(r.at(t).into());
                    dirs.push(r.direction.into());
                }
            }
            let out = field.forward(&pos, Some(&dirs));
            check_outputs(&out.sigma, &out.color)?;
            let mut a = 0;
            Ok(samples
                .iter()
                .map(|s| {
                    let b = a + s.len();
                    let res = composite(&out.sigma[a..b], &out.color[a..b], &s.t, &s.deltas, cfg.sampling.background);
                    a = b;
                    (res.color, res.depth, res.depth_variance)
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(rays.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn render_view(field: &RadianceField, cam: &Camera, cfg: &PipelineConfig) -> Result<ViewRender> {
    let rays: Vec<(Ray, f64, f64)> = (0..cam.height)
        .flat_map(|j| {
            (0..cam.width).map(move |i| {
                let r = cam.pixel_center_ray(i, j);
                (r, cam.near, r.clip_far(cam.near, cam.far, Some(&field.bounds())))
            })
        })
        .collect();
    let res = render_rays(field, &rays, cfg)?;
    let mut color = ImageBuffer::new(cam.width, cam.height, 3);
    let mut depth = ImageBuffer::new(cam.width, cam.height, 1);
    let mut variance = ImageBuffer::new(cam.width, cam.height, 1);
    for (k, (c, d, v)) in res.into_iter().enumerate() {
        let (i, j) = (k % cam.width, k / cam.width);
        color.set_pixel(i, j, c.map(|x| x.clamp(0.0, 1.0)));
        depth.set(i, j, 0, d);
        variance.set(i, j, 0, v);
    }
    Ok(ViewRender { color, depth, variance })
}

pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
    psnr_from_mse(mse)
}

/// `-10 log10(mse)`, capped at 99 dB.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        99.0
    } else {
        (-10.0 * mse.log10()).min(99.0)
    }
}
