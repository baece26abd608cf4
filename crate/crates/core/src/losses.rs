//! Photometric p-norm loss and its schedule, camera-pair weights, and the
//! depth-reprojection consistency loss.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::field::render::composite;
use crate::field::sampling::{sample_stratified, RaySamples};
use crate::field::DensityQuery;
use crate::scene::{optical_axis_angle, Camera, Ray};

/// Smoothing of `|e|` used when differentiating the p-norm.
pub const ABS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PNormSchedule {
    pub tau_init: u64,
    pub tau_inc: u64,
    pub tau_std: u64,
}

impl PNormSchedule {
    pub fn new(tau_init: u64, tau_inc: u64, tau_std: u64) -> Result<Self> {
        let s = Self { tau_init, tau_inc, tau_std };
        s.validate()?;
        Ok(s)
    }

    /// Defaults at 20%, 50% and 80% of an iteration budget.
    pub fn for_budget(iterations: u64) -> Result<Self> {
        let at = |f: u64| (iterations * f / 100).max(1);
        Self::new(at(20), at(50), at(80).max(at(50) + 1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.tau_init && self.tau_init <= self.tau_inc && self.tau_inc < self.tau_std) {
            return Err(Error::Config(format!(
                "p-norm schedule needs 0 < tau_init <= tau_inc < tau_std, got {} / {} / {}",
                self.tau_init, self.tau_inc, self.tau_std
            )));
        }
        Ok(())
    }

    pub fn p(&self, tau: u64) -> f64 {
        p_schedule(tau, self)
    }
}

/// Loss exponent at iteration `tau`: 2 down to 1, a plateau, back up to 2.
pub fn p_schedule(tau: u64, s: &PNormSchedule) -> f64 {
    let t = tau as f64;
    let (a, b, c) = (s.tau_init as f64, s.tau_inc as f64, s.tau_std as f64);
    if t <= a {
        2.0 - t / a
    } else if t <= b {
        1.0
    } else if t <= c {
        1.0 + (t - b) / (c - b)
    } else {
        2.0
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(1.0..=2.0).contains(&p) {
        return Err(Error::InvalidInput(format!("loss exponent must be in [1, 2], got {p}")));
    }
    Ok(())
}

/// Mean over rays of the per-channel sum of `|C - C*|^p`.
pub fn image_loss(rendered: &[[f64; 3]], target: &[[f64; 3]], p: f64) -> Result<f64> {
    check_p(p)?;
    if rendered.is_empty() {
        return Err(Error::InvalidInput("image loss over an empty batch".into()));
    }
    if rendered.len() != target.len() {
        return Err(Error::InvalidInput(format!(
            "rendered batch has {} rays, target has {}",
            rendered.len(),
            target.len()
        )));
    }
    let sum: f64 = rendered
        .iter()
        .zip(target)
        .map(|(r, t)| (0..3).map(|c| pnorm_term(r[c] - t[c], p)).sum::<f64>())
        .sum();
    Ok(sum / rendered.len() as f64)
}

pub fn pnorm_term(e: f64, p: f64) -> f64 {
    if p == 2.0 {
        e * e
    } else {
        e.abs().powf(p)
    }
}

/// `d/de` of the smoothed `(e^2 + eps^2)^(p/2)`; exactly `2e` at `p = 2`.
pub fn pnorm_grad(e: f64, p: f64) -> f64 {
    if p == 2.0 {
        2.0 * e
    } else {
        p * (e * e + ABS_EPS * ABS_EPS).powf(0.5 * p - 1.0) * e
    }
}

/// Unnormalized pair weight `|phi_ij| * |o_i - o_j|`.
pub fn raw_camera_weight(a: &Camera, b: &Camera) -> f64 {
    optical_axis_angle(a, b).abs() * (a.origin - b.origin).norm()
}

/// Largest raw pair weight over all distinct pairs.
pub fn max_camera_weight(cameras: &[Camera]) -> f64 {
    let mut best = 0.0_f64;
    for i in 0..cameras.len() {
        for j in i + 1..cameras.len() {
            best = best.max(raw_camera_weight(&cameras[i], &cameras[j]));
        }
    }
    best
}

pub fn camera_weight(a: &Camera, b: &Camera, w_max: f64) -> f64 {
    (raw_camera_weight(a, b) / w_max).clamp(0.0, 1.0)
}

/// [`camera_weight`], optionally flipped to `1 - w` so similar cameras dominate.
pub fn camera_weight_with(a: &Camera, b: &Camera, w_max: f64, invert: bool) -> f64 {
    let w = camera_weight(a, b, w_max);
    if invert {
        1.0 - w
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub image_loss: f64,
    pub depth_loss: f64,
    pub p_used: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(image_loss: f64, depth_loss: f64, p_used: f64, lambda_d: f64) -> Result<Self> {
        let r = Self {
            image_loss,
            depth_loss,
            p_used,
            total: image_loss + lambda_d * depth_loss,
        };
        if ![r.image_loss, r.depth_loss, r.total].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { what: "loss", index: 0 });
        }
        Ok(r)
    }
}

/// Where the partner ray of a depth-reprojection term lands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reprojection {
    pub point: Vector3<f64>,
    pub ray: Ray,
    pub z: f64,
}

/// The absorption point `o + D d` seen from `cam_j`, or `None` when it lies
/// behind that camera.
pub fn reproject_depth(ray: &Ray, depth: f64, cam_j: &Camera) -> Option<Reprojection> {
    let point = ray.at(depth);
    let (pixel, z) = cam_j.reproject(&point)?;
    let mut partner = Ray::new(cam_j.origin, point - cam_j.origin);
    partner.pixel = pixel;
    partner.camera_id = cam_j.id;
    Some(Reprojection { point, ray: partner, z })
}

/// Expected depth along `ray` at `samples` for a density-only field.
pub fn expected_depth(field: &impl DensityQuery, ray: &Ray, samples: &RaySamples) -> f64 {
    let positions: Vec<[f64; 3]> = samples.t.iter().map(|&t| ray.at(t).into()).collect();
    let sigma = field.density(&positions);
    let colors = vec![[0.0; 3]; sigma.len()];
    composite(&sigma, &colors, &samples.t, &samples.deltas, [0.0; 3]).depth
}

/// Mean over `rays` of `w_ij * (D(r_j) - z_j)^2`. Primary depths use
/// `primary[i]`; partner rays are sampled with `partner_count` stratified
/// samples in `cam_j`'s range.
pub fn depth_reprojection_loss(
    field: &impl DensityQuery,
    rays: &[Ray],
    primary: &[RaySamples],
    cam_j: &Camera,
    w_ij: f64,
    partner_count: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if rays.is_empty() {
        return Err(Error::InvalidInput("depth reprojection loss over an empty batch".into()));
    }
    assert_eq!(rays.len(), primary.len());
    let mut sum = 0.0;
    for (ray, samples) in rays.iter().zip(primary) {
        let d = expected_depth(field, ray, samples);
        let partner = sample_stratified(cam_j.near, cam_j.far, partner_count, rng);
        if let Some(rep) = reproject_depth(ray, d, cam_j) {
            let dj = expected_depth(field, &rep.ray, &partner);
            sum += w_ij * (dj - rep.z).powi(2);
        }
    }
    Ok(sum / rays.len() as f64)
}

/// Appends `iter,p,image_loss,depth_loss,total` rows.
pub struct LossLog {
    out: BufWriter<File>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).truncate(true).write(true).open(path).at(path)?;
        let mut out = BufWriter::new(file);
        writeln!(out, "iter,p,image_loss,depth_loss,total").at(path)?;
        Ok(Self { out })
    }

    pub fn append(&mut self, iter: u64, r: &LossReport) -> Result<()> {
        writeln!(
            self.out,
            "{iter},{},{:e},{:e},{:e}",
            r.p_used, r.image_loss, r.depth_loss, r.total
        )
        .map_err(|e| Error::Io { path: "loss log".into(), source: e })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::Io { path: "loss log".into(), source: e })
    }
}
