//! The staged pipeline over a run directory.
//!
//! ```text
//! RUN/config.toml            effective configuration
//! RUN/run.json               dataset location and config hash
//! RUN/stage1/                field.ckpt, loss.csv, scores.json, maps/
//! RUN/detect/                primitives.json, candidates.ply
//! RUN/stage2/                field.ckpt, primitives.json, loss.csv
//! RUN/eval/stage{N}_{split}/ report.csv, report.json, panels/
//! RUN/timings/               wall-clock seconds per subcommand
//! ```
//!
//! Everything except `timings/` is a pure function of the inputs and seeds.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, RngState, CHECKPOINT_VERSION};
use super::config::PipelineConfig;
use super::dataset::{Dataset, Split};
use super::stage1::{render_view, Stage1Trainer, TrainView};
use crate::error::{Error, IoContext, Result};
use crate::field::RadianceField;
use crate::losses::LossLog;
use crate::mirror_detect::{build_candidate_cloud, detect_primitives, ManifestEntry, PrimitiveManifest};
use crate::reflect_render::{render_blended_rays, stage2_train_step, Stage2State};
use crate::scene::{Camera, ImageBuffer, MirrorPrimitive};
use crate::scoring::{ScoreMaps, ScoreSidecar};

pub const LOCK_NAME: &str = ".lock";

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e).at(&path),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub data: PathBuf,
    pub config_hash: String,
}

/// Paths inside a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn info(&self) -> PathBuf {
        self.root.join("run.json")
    }
    pub fn stage1(&self) -> PathBuf {
        self.root.join("stage1")
    }
    pub fn maps(&self) -> PathBuf {
        self.stage1().join("maps")
    }
    pub fn detect(&self) -> PathBuf {
        self.root.join("detect")
    }
    pub fn manifest(&self) -> PathBuf {
        self.detect().join("primitives.json")
    }
    pub fn stage2(&self) -> PathBuf {
        self.root.join("stage2")
    }
    pub fn checkpoint(&self, stage: u32) -> PathBuf {
        self.root.join(format!("stage{stage}")).join("field.ckpt")
    }
    pub fn refined(&self) -> PathBuf {
        self.stage2().join("primitives.json")
    }
    pub fn eval(&self, stage: u32, split: Split) -> PathBuf {
        let s = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        self.root.join("eval").join(format!("stage{stage}_{s}"))
    }

    pub fn load_config(&self) -> Result<PipelineConfig> {
        PipelineConfig::load(&self.config())
    }

    pub fn load_info(&self) -> Result<RunInfo> {
        let p = self.info();
        Ok(serde_json::from_str(&std::fs::read_to_string(&p).at(&p)?)?)
    }

    /// Latest stage with a checkpoint.
    pub fn latest_stage(&self) -> Result<u32> {
        [2, 1]
            .into_iter()
            .find(|&s| self.checkpoint(s).exists())
            .ok_or_else(|| Error::InvalidInput(format!("{}: no checkpoint; run stage1 first", self.root.display())))
    }

    /// Field and mirror primitives of a stage. Stage 1 has no primitives.
    pub fn load_stage(&self, stage: u32) -> Result<(RadianceField, Vec<MirrorPrimitive>)> {
        let (field, _) = load_checkpoint(&self.checkpoint(stage))?;
        let prims = if stage == 2 { PrimitiveManifest::load(&self.refined())?.accepted()? } else { Vec::new() };
        Ok((field, prims))
    }

    fn write_timing(&self, name: &str, seconds: f64) -> Result<()> {
        let dir = self.root.join("timings");
        mkdir(&dir)?;
        let path = dir.join(format!("{name}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&serde_json::json!({ "seconds": seconds }))?).at(&path)
    }
}

pub(crate) fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).at(p)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).at(path)
}

/// File stem of a frame's image, `r_000` for `train/r_000.png`.
pub fn frame_stem(image: &Path) -> String {
    image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Score maps of every training view under `field`.
pub fn compute_score_maps(field: &RadianceField, views: &[TrainView], cfg: &PipelineConfig, diameter: f64) -> Result<Vec<(ScoreMaps, ImageBuffer)>> {
    let window = cfg.ssim_window();
    let c = cfg.score_c(diameter);
    views
        .iter()
        .map(|v| {
            let r = render_view(field, &v.camera, cfg)?;
            let maps = ScoreMaps::compute(&r.color, &v.image, r.depth, r.variance, &window, c)?;
            Ok((maps, r.color))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Summary {
    pub final_loss: f64,
    pub train_psnr: f64,
}

/// Trains the first-stage field on the training split of `data` and writes
/// its checkpoint and per-view score maps.
/// Per-side padding of the field box, as a fraction of the scene extent.
/// Surfaces on the scene boundary then lie inside the field, where rays that
/// stop at the box exit can still build up their density.
pub const BOUNDS_MARGIN: f64 = 0.02;

pub fn padded_bounds(lo: [f64; 3], hi: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let pad = |k: usize| BOUNDS_MARGIN * (hi[k] - lo[k]);
    (std::array::from_fn(|k| lo[k] - pad(k)), std::array::from_fn(|k| hi[k] + pad(k)))
}

pub fn run_stage1(data: &Path, out: &Path, cfg: &PipelineConfig) -> Result<Stage1Summary> {
    cfg.validate()?;
    mkdir(out)?;
    let run = RunDir::new(out);
    let _lock = RunLock::acquire(out)?;
    let start = Instant::now();
    let ds = Dataset::load(data)?;
    let views = ds.views(Split::Train)?;
    if views.is_empty() {
        return Err(Error::InvalidInput("dataset has no training views".into()));
    }
    let hash = cfg.hash();
    write_text(&run.config(), &cfg.to_toml_string())?;
    let info = RunInfo {
        data: std::fs::canonicalize(data).at(data)?,
        config_hash: hash.clone(),
    };
    write_text(&run.info(), &(serde_json::to_string_pretty(&info)? + "\n"))?;
    for dir in [run.stage1(), run.maps()] {
        mkdir(&dir)?;
    }

    let (lo, hi) = padded_bounds(ds.bounds_min, ds.bounds_max);
    let field = RadianceField::new(cfg.arch(lo, hi), cfg.seed)?;
    let mut trainer = Stage1Trainer::new(field, &views, cfg.seed.wrapping_add(1));
    let mut log = LossLog::create(&run.stage1().join("loss.csv"))?;
    let report = trainer.run(&views, cfg, Some(&mut log))?;
    log::info!("stage 1: {} iterations, final loss {:.5}", trainer.iteration, report.total);
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        stage: 1,
        arch: trainer.field.arch.clone(),
        iteration: trainer.iteration,
        rng: RngState::new(trainer.rng_state()),
        config_hash: hash,
        param_count: trainer.field.parameter_count(),
    };
    save_checkpoint(&run.checkpoint(1), &trainer.field, &header)?;

    let (field, _) = load_checkpoint(&run.checkpoint(1))?;
    let maps = compute_score_maps(&field, &views, cfg, ds.diameter())?;
    let mut psnr_sum = 0.0;
    let (mut smin, mut smax, mut qmin, mut qmax, mut vmax, mut dmax) = (f64::INFINITY, 0.0f64, f64::INFINITY, f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for ((m, color), (frame, view)) in maps.iter().zip(ds.split(Split::Train).zip(&views)) {
        let stem = frame_stem(&frame.image);
        m.save(&run.maps(), &stem)?;
        color.save_png(&run.maps().join(format!("{stem}_color.png")))?;
        psnr_sum += super::stage1::psnr(color, &view.image);
        for &s in &m.ssim.data {
            qmin = qmin.min(s);
            qmax = qmax.max(s);
        }
        for &s in &m.score.data {
            smin = smin.min(s);
            smax = smax.max(s);
        }
        vmax = m.depth_variance.data.iter().copied().fold(vmax, f64::max);
        dmax = m.depth.data.iter().copied().fold(dmax, f64::max);
    }
    ScoreSidecar {
        c: cfg.score_c(ds.diameter()),
        threshold: cfg.scoring.threshold,
        window: cfg.ssim_window(),
        ssim_range: [qmin, qmax],
        score_range: [smin, smax],
        variance_max: vmax,
        depth_max: dmax,
    }
    .write(&run.stage1().join("scores.json"))?;
    run.write_timing("stage1", start.elapsed().as_secs_f64())?;
    Ok(Stage1Summary {
        final_loss: report.total,
        train_psnr: psnr_sum / views.len() as f64,
    })
}

/// Loads the score maps written by stage 1, in training-split order.
pub fn load_score_maps(run: &RunDir, ds: &Dataset) -> Result<Vec<(Camera, ScoreMaps)>> {
    ds.split(Split::Train)
        .map(|f| {
            let maps = ScoreMaps::load(&run.maps(), &frame_stem(&f.image), f.camera.width, f.camera.height)?;
            Ok((f.camera.clone(), maps))
        })
        .collect()
}

/// Candidate cloud, normals, clustering and fitting over the stage-1 maps.
pub fn run_detect(out: &Path) -> Result<PrimitiveManifest> {
    let run = RunDir::new(out);
    let _lock = RunLock::acquire(out)?;
    let start = Instant::now();
    let cfg = run.load_config()?;
    let info = run.load_info()?;
    check_hash(&info.config_hash, &cfg, "run.json")?;
    let ds = Dataset::load(&info.data)?;
    let maps = load_score_maps(&run, &ds)?;
    let cloud = build_candidate_cloud(&maps, cfg.scoring.threshold)?;
    mkdir(&run.detect())?;
    let manifest = if cloud.is_empty() {
        log::warn!("empty candidate cloud; no primitives");
        cloud.write_ply(&run.detect().join("candidates.ply"))?;
        PrimitiveManifest {
            config_hash: Some(info.config_hash.clone()),
            primitives: Vec::new(),
        }
    } else {
        let (with_normals, fits) = detect_primitives(&cloud, &cfg.detect_settings(ds.diameter()), cfg.seed)?;
        with_normals.write_ply(&run.detect().join("candidates.ply"))?;
        for f in &fits {
            log::info!("primitive accepted={} metrics={:?}", f.accepted, f.metrics);
        }
        PrimitiveManifest::from_fits(&fits, Some(info.config_hash.clone()))
    };
    manifest.save(&run.manifest())?;
    run.write_timing("detect", start.elapsed().as_secs_f64())?;
    Ok(manifest)
}

fn check_hash(found: &str, cfg: &PipelineConfig, what: &str) -> Result<()> {
    if found != cfg.hash() {
        return Err(Error::Config(format!("{what} was produced under config hash {found}, but the run config hashes to {}", cfg.hash())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Summary {
    pub primitives: Vec<MirrorPrimitive>,
    pub rejected_steps: u64,
    pub final_loss: f64,
}

/// Joint refinement of the stage-1 field and the manifest's accepted
/// primitives. With no primitives this is plain continued training.
pub fn run_stage2(out: &Path) -> Result<Stage2Summary> {
    let run = RunDir::new(out);
    let _lock = RunLock::acquire(out)?;
    let start = Instant::now();
    let cfg = run.load_config()?;
    let info = run.load_info()?;
    check_hash(&info.config_hash, &cfg, "run.json")?;
    let manifest = PrimitiveManifest::load(&run.manifest())?;
    check_hash(manifest.config_hash.as_deref().unwrap_or("none"), &cfg, "primitive manifest")?;
    let (field, header) = load_checkpoint(&run.checkpoint(1))?;
    check_hash(&header.config_hash, &cfg, "stage-1 checkpoint")?;
    let ds = Dataset::load(&info.data)?;
    let views = ds.views(Split::Train)?;
    let cameras: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
    let images: Vec<ImageBuffer> = views.into_iter().map(|v| v.image).collect();

    let accepted: Vec<&ManifestEntry> = manifest.primitives.iter().filter(|e| e.accepted).collect();
    let prims = manifest.accepted()?;
    let blend = cfg.blend_config(ds.diameter(), Some(field.bounds()));
    let settings = cfg.stage2_settings(ds.diameter());
    let mut state = Stage2State::new(field, prims, cfg.schedule()?, cfg.seed.wrapping_add(2));
    mkdir(&run.stage2())?;
    let log_path = run.stage2().join("loss.csv");
    let mut log = std::io::BufWriter::new(File::create(&log_path).at(&log_path)?);
    writeln!(log, "iter,p,loss,accepted,mean_coverage,lr_factor").at(&log_path)?;
    let mut rejected = 0;
    let mut last = 0.0;
    while state.iteration < cfg.stage2.iterations {
        let r = stage2_train_step(&mut state, &cameras, &images, &blend, &settings)?;
        if !r.accepted {
            rejected += 1;
        } else {
            last = r.loss;
        }
        if cfg.stage1.log_every > 0 && r.iteration % cfg.stage1.log_every == 0 {
            writeln!(log, "{},{},{:e},{},{:e},{:e}", r.iteration, r.p, r.loss, r.accepted as u8, r.mean_coverage, state.lr_factor).at(&log_path)?;
        }
    }
    log.flush().at(&log_path)?;
    if rejected > 0 {
        log::warn!("stage 2: {rejected} steps rejected by the divergence guard");
    }
    state.field.quantize_to_f32();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        stage: 2,
        arch: state.field.arch.clone(),
        iteration: header.iteration + state.iteration,
        rng: RngState::new(state.rng_state()),
        config_hash: cfg.hash(),
        param_count: state.field.parameter_count(),
    };
    save_checkpoint(&run.checkpoint(2), &state.field, &header)?;
    let refined = PrimitiveManifest {
        config_hash: Some(cfg.hash()),
        primitives: accepted
            .iter()
            .zip(&state.primitives)
            .map(|(e, p)| ManifestEntry {
                record: p.to_record(),
                metrics: e.metrics,
                accepted: true,
            })
            .collect(),
    };
    refined.save(&run.refined())?;
    run.write_timing("stage2", start.elapsed().as_secs_f64())?;
    Ok(Stage2Summary {
        primitives: state.primitives,
        rejected_steps: rejected,
        final_loss: last,
    })
}

/// Deterministic full render of one camera through the blended renderer.
pub fn render_camera(field: &RadianceField, prims: &[MirrorPrimitive], cam: &Camera, cfg: &PipelineConfig, diameter: f64) -> Result<(ImageBuffer, ImageBuffer)> {
    let pixels: Vec<[f64; 2]> = (0..cam.height)
        .flat_map(|j| (0..cam.width).map(move |i| [i as f64 + 0.5, j as f64 + 0.5]))
        .collect();
    let samples = render_blended_rays(field, prims, cam, &pixels, &cfg.blend_config(diameter, Some(field.bounds())))?;
    let mut color = ImageBuffer::new(cam.width, cam.height, 3);
    let mut coverage = ImageBuffer::new(cam.width, cam.height, 1);
    for (k, s) in samples.iter().enumerate() {
        let (i, j) = (k % cam.width, k / cam.width);
        color.set_pixel(i, j, s.color.map(|x| x.clamp(0.0, 1.0)));
        coverage.set(i, j, 0, s.coverage.clamp(0.0, 1.0));
    }
    Ok((color, coverage))
}

/// Renders dataset camera `id` with the latest stage to a PNG.
pub fn render_to_png(out: &Path, camera_id: usize, png: &Path) -> Result<()> {
    let run = RunDir::new(out);
    let _lock = RunLock::acquire(out)?;
    let cfg = run.load_config()?;
    let ds = Dataset::load(&run.load_info()?.data)?;
    let frame = ds
        .frames
        .iter()
        .find(|f| f.camera.id == camera_id)
        .ok_or_else(|| Error::InvalidInput(format!("no camera with id {camera_id}")))?;
    let (field, prims) = run.load_stage(run.latest_stage()?)?;
    let (color, _) = render_camera(&field, &prims, &frame.camera, &cfg, ds.diameter())?;
    color.save_png(png)
}

pub use super::eval::{evaluate, EvalReport};
