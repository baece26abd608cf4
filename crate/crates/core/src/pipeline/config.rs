//! Pipeline configuration: every tunable with its default, loaded from TOML
//! with unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::field::optim::LrSchedule;
use crate::field::FieldArch;
use crate::losses::PNormSchedule;
use crate::mirror_detect::{DetectSettings, RansacConfig};
use crate::reflect_render::train::Stage2Settings;
use crate::reflect_render::BlendConfig;
use crate::scene::IntersectOptions;
use crate::scoring::SsimWindow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub field: FieldConfig,
    pub sampling: SamplingConfig,
    pub stage1: Stage1Config,
    pub scoring: ScoringConfig,
    pub detect: DetectConfig,
    pub stage2: Stage2Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub pos_levels: usize,
    pub dir_levels: usize,
    pub trunk: Vec<usize>,
    pub color_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub coarse: usize,
    pub fine: usize,
    /// Stratified samples along depth-reprojection partner rays.
    pub partner: usize,
    pub background: [f64; 3],
    pub chunk_rays: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub iterations: u64,
    pub batch_rays: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lambda_d: f64,
    /// Fraction of batch rays that carry a depth-reprojection partner.
    pub depth_fraction: f64,
    pub invert_weight: bool,
    pub log_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    /// Slope of the variance term; `None` means `10 / diameter^2`.
    pub c: Option<f64>,
    pub threshold: f64,
    pub window: usize,
    pub sigma: f64,
    pub luminance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub kind: crate::scene::PrimitiveKind,
    pub k: usize,
    /// Normal-estimation radius as a fraction of the scene diameter.
    pub normal_radius: f64,
    pub normal_knn: usize,
    pub kmeans_with_normals: bool,
    pub kmeans_max_iter: usize,
    pub ransac_iters: usize,
    /// Inlier distance as a fraction of the scene diameter.
    pub inlier_distance: f64,
    pub min_inlier_ratio: f64,
    pub min_normal_similarity: f64,
    /// Bitmap cell as a fraction of the cluster's planar extent.
    pub bitmap_cell: f64,
    pub bitmap_rho: f64,
    pub min_cluster_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub iterations: u64,
    pub batch_rays: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Primitive learning rate relative to the field learning rate.
    pub primitive_lr_scale: f64,
    pub bounce_limit: usize,
    pub tau_init: f64,
    pub tau_inc: f64,
    pub tau_std: f64,
    pub keep_depth_loss: bool,
    pub single_sided: bool,
    /// Smallest half extent a primitive may shrink to, as a fraction of the diameter.
    pub min_half_extent: f64,
    /// Extra rays per step drawn near primitive boundaries for the primitive
    /// gradient. 0 takes it from the main batch.
    pub edge_rays: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            field: FieldConfig::default(),
            sampling: SamplingConfig::default(),
            stage1: Stage1Config::default(),
            scoring: ScoringConfig::default(),
            detect: DetectConfig::default(),
            stage2: Stage2Config::default(),
        }
    }
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            pos_levels: 6,
            dir_levels: 2,
            trunk: vec![64; 4],
            color_width: 64,
        }
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            coarse: 32,
            fine: 32,
            partner: 64,
            background: [0.0; 3],
            chunk_rays: 64,
        }
    }
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_rays: 1024,
            lr_start: 5e-4,
            lr_end: 5e-5,
            lambda_d: 0.05,
            depth_fraction: 0.25,
            invert_weight: false,
            log_every: 1,
        }
    }
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            c: None,
            threshold: 0.3,
            window: 11,
            sigma: 1.5,
            luminance: true,
        }
    }
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            kind: crate::scene::PrimitiveKind::Rect,
            k: 1,
            normal_radius: 0.02,
            normal_knn: 10,
            kmeans_with_normals: false,
            kmeans_max_iter: 100,
            ransac_iters: 1000,
            inlier_distance: 0.005,
            min_inlier_ratio: 0.6,
            min_normal_similarity: 0.8,
            bitmap_cell: 0.02,
            bitmap_rho: 0.25,
            min_cluster_points: 30,
        }
    }
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            batch_rays: 1024,
            lr_start: 5e-4,
            lr_end: 5e-5,
            primitive_lr_scale: 0.1,
            bounce_limit: 2,
            tau_init: 0.2,
            tau_inc: 0.5,
            tau_std: 0.8,
            keep_depth_loss: false,
            single_sided: false,
            min_half_extent: 1e-3,
            edge_rays: 0,
        }
    }
}

impl PipelineConfig {
    /// Small network and batch that train a 64x64 scene in minutes on one core.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.field.trunk = vec![32; 4];
        c.field.color_width = 32;
        c.sampling.coarse = 16;
        c.sampling.fine = 16;
        c.sampling.partner = 16;
        c.stage1.iterations = 6000;
        c.stage1.batch_rays = 128;
        c.stage1.lr_start = 5e-3;
        c.stage1.lr_end = 5e-4;
        c.stage2.iterations = 2000;
        c.stage2.batch_rays = 128;
        c.stage2.lr_start = 2e-3;
        c.stage2.lr_end = 2e-4;
        c.stage2.primitive_lr_scale = 1.0;
        c.stage2.edge_rays = 128;
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn arch(&self, bounds_min: [f64; 3], bounds_max: [f64; 3]) -> FieldArch {
        FieldArch {
            pos_levels: self.field.pos_levels,
            dir_levels: self.field.dir_levels,
            trunk: self.field.trunk.clone(),
            color_width: self.field.color_width,
            bounds_min,
            bounds_max,
        }
    }

    pub fn schedule(&self) -> Result<PNormSchedule> {
        let s = &self.stage2;
        let n = s.iterations as f64;
        let at = |f: f64| (f * n).round().max(1.0) as u64;
        PNormSchedule::new(at(s.tau_init), at(s.tau_inc), at(s.tau_std).max(at(s.tau_inc) + 1))
    }

    /// Score slope `c`, defaulting to `10 / diameter^2`.
    pub fn score_c(&self, diameter: f64) -> f64 {
        self.scoring.c.unwrap_or(10.0 / (diameter * diameter))
    }

    pub fn ssim_window(&self) -> SsimWindow {
        SsimWindow {
            size: self.scoring.window,
            sigma: self.scoring.sigma,
            luminance: self.scoring.luminance,
        }
    }

    pub fn detect_settings(&self, diameter: f64) -> DetectSettings {
        let d = &self.detect;
        DetectSettings {
            k: d.k,
            normal_radius: d.normal_radius * diameter,
            normal_knn: d.normal_knn,
            kmeans_with_normals: d.kmeans_with_normals,
            kmeans_max_iter: d.kmeans_max_iter,
            min_cluster_points: d.min_cluster_points,
            ransac: RansacConfig {
                kind: d.kind,
                iterations: d.ransac_iters,
                inlier_distance: d.inlier_distance * diameter,
                min_inlier_ratio: d.min_inlier_ratio,
                min_normal_similarity: d.min_normal_similarity,
                bitmap_cell: d.bitmap_cell,
                bitmap_rho: d.bitmap_rho,
                seed: self.seed,
            },
        }
    }

    /// Blend settings; `bounds` is the field box that open segments stop at.
    pub fn blend_config(&self, diameter: f64, bounds: Option<[[f64; 3]; 2]>) -> BlendConfig {
        BlendConfig {
            coarse: self.sampling.coarse,
            fine: self.sampling.fine,
            background: self.sampling.background,
            bounce_limit: self.stage2.bounce_limit,
            single_sided: self.stage2.single_sided,
            eps_t: IntersectOptions::for_scene(diameter).eps_t,
            segment_far: diameter,
            bounds,
        }
    }

    pub fn stage2_settings(&self, diameter: f64) -> Stage2Settings {
        let s = &self.stage2;
        Stage2Settings {
            lr: LrSchedule {
                start: s.lr_start,
                end: s.lr_end,
                steps: s.iterations,
            },
            primitive_lr_scale: s.primitive_lr_scale,
            min_half_extent: s.min_half_extent * diameter,
            edge_rays: s.edge_rays,
            batch_rays: s.batch_rays,
            chunk_rays: self.sampling.chunk_rays,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.field.trunk.is_empty() || self.field.trunk.contains(&0) || self.field.color_width == 0 {
            return bad("field widths must be positive and the trunk non-empty".into());
        }
        if self.sampling.coarse < 2 || self.sampling.partner < 2 {
            return bad("coarse and partner sample counts must be at least 2".into());
        }
        if self.sampling.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background color must be in [0, 1]".into());
        }
        for (name, s) in [("stage1", (self.stage1.batch_rays, self.stage1.lr_start, self.stage1.lr_end)), ("stage2", (self.stage2.batch_rays, self.stage2.lr_start, self.stage2.lr_end))] {
            if s.0 == 0 || !(s.1 > 0.0) || !(s.2 > 0.0) {
                return bad(format!("{name}: batch size and learning rates must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.stage1.depth_fraction) || self.stage1.lambda_d < 0.0 {
            return bad("stage1: depth_fraction in [0, 1] and lambda_d >= 0 required".into());
        }
        let sc = &self.scoring;
        if !(0.0..=1.0).contains(&sc.threshold) || sc.window % 2 == 0 || !(sc.sigma > 0.0) || sc.c.is_some_and(|c| c < 0.0) {
            return bad("scoring: need S in [0, 1], an odd window, sigma > 0, c >= 0".into());
        }
        let d = &self.detect;
        if d.k == 0 || d.normal_knn < 3 || !(d.normal_radius > 0.0) || d.ransac_iters == 0 || !(d.inlier_distance > 0.0) || !(d.bitmap_cell > 0.0) {
            return bad("detect: k >= 1, knn >= 3, and positive radius, iterations, inlier distance and cell required".into());
        }
        if !(0.0..=1.0).contains(&d.min_inlier_ratio) || !(-1.0..=1.0).contains(&d.min_normal_similarity) {
            return bad("detect: acceptance thresholds out of range".into());
        }
        if !(self.stage2.primitive_lr_scale >= 0.0) || !(self.stage2.min_half_extent > 0.0) {
            return bad("stage2: primitive_lr_scale >= 0 and min_half_extent > 0 required".into());
        }
        if self.stage2.iterations > 0 {
            let s = &self.stage2;
            if !(0.0 < s.tau_init && s.tau_init <= s.tau_inc && s.tau_inc < s.tau_std) {
                return bad("stage2: schedule fractions need 0 < tau_init <= tau_inc < tau_std".into());
            }
        }
        Ok(())
    }
}
