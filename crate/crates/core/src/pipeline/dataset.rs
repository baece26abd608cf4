//! On-disk datasets: a `transforms.json` manifest of cameras and relative
//! image paths, 8-bit PNG colors and masks, raw f32 depths, and an optional
//! ground-truth primitive manifest.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stage1::TrainView;
use super::synth::{SceneConfig, SyntheticScene};
use crate::error::{Error, IoContext, Result};
use crate::mirror_detect::{ManifestEntry, PrimitiveManifest};
use crate::scene::image::{load_f32_raw, save_f32_raw};
use crate::scene::{Camera, CameraRecord, ImageBuffer, MirrorPrimitive};

pub const MANIFEST_NAME: &str = "transforms.json";
pub const GT_PRIMITIVES_NAME: &str = "gt_primitives.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub file: String,
    pub split: Split,
    pub camera: CameraRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub frames: Vec<FrameRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_primitives: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub split: Split,
    pub camera: Camera,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub depth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub frames: Vec<Frame>,
    pub gt_primitives: Option<Vec<MirrorPrimitive>>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).at(&path)?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if (0..3).any(|i| !(m.bounds_max[i] > m.bounds_min[i])) {
            return Err(Error::InvalidInput("dataset bounds must be non-empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut frames = Vec::with_capacity(m.frames.len());
        for f in &m.frames {
            if !seen.insert(f.file.clone()) {
                return Err(Error::InvalidInput(format!("frame {} listed twice", f.file)));
            }
            frames.push(Frame {
                split: f.split,
                camera: Camera::from_record(&f.camera)?,
                image: root.join(&f.file),
                mask: f.mask.as_ref().map(|p| root.join(p)),
                depth: f.depth.as_ref().map(|p| root.join(p)),
            });
        }
        let gt_primitives = match &m.gt_primitives {
            Some(p) => Some(PrimitiveManifest::load(&root.join(p))?.accepted()?),
            None => None,
        };
        Ok(Self {
            root: root.to_path_buf(),
            bounds_min: m.bounds_min,
            bounds_max: m.bounds_max,
            frames,
            gt_primitives,
        })
    }

    pub fn diameter(&self) -> f64 {
        (0..3).map(|i| (self.bounds_max[i] - self.bounds_min[i]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(move |f| f.split == split)
    }

    pub fn cameras(&self, split: Split) -> Vec<Camera> {
        self.split(split).map(|f| f.camera.clone()).collect()
    }

    /// Color images of a split, checked against their cameras.
    pub fn views(&self, split: Split) -> Result<Vec<TrainView>> {
        self.split(split)
            .map(|f| {
                let image = ImageBuffer::load_png(&f.image)?;
                check_shape(&image, &f.camera, &f.image)?;
                Ok(TrainView {
                    camera: f.camera.clone(),
                    image,
                })
            })
            .collect()
    }

    /// Binary mirror masks of a split; `None` when any frame lacks one.
    pub fn masks(&self, split: Split) -> Result<Option<Vec<Vec<bool>>>> {
        let mut out = Vec::new();
        for f in self.split(split) {
            let Some(path) = &f.mask else { return Ok(None) };
            let m = ImageBuffer::load_png(path)?;
            check_shape(&m, &f.camera, path)?;
            out.push((0..m.width * m.height).map(|i| m.data[i * m.channels] > 0.5).collect());
        }
        Ok(Some(out))
    }

    pub fn depth(&self, frame: &Frame) -> Result<Option<Vec<f64>>> {
        frame.depth.as_deref().map(load_f32_raw).transpose()
    }
}

fn check_shape(img: &ImageBuffer, cam: &Camera, path: &Path) -> Result<()> {
    if img.width != cam.width || img.height != cam.height {
        return Err(Error::InvalidInput(format!(
            "{}: image is {}x{} but its camera is {}x{}",
            path.display(),
            img.width,
            img.height,
            cam.width,
            cam.height
        )));
    }
    Ok(())
}

/// Builds a random room from `cfg` and writes its train and test views, GT
/// masks, GT depths and GT primitives below `out`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = SyntheticScene::random(cfg, &mut rng)?;
    let mut cameras = Vec::new();
    for id in 0..cfg.train_views + cfg.test_views {
        cameras.push(scene.random_camera(id, cfg, &mut rng)?);
    }
    for dir in ["train", "test"] {
        std::fs::create_dir_all(out.join(dir)).at(out.join(dir))?;
    }
    let mut frames = Vec::new();
    for cam in &cameras {
        let (split, name) = if cam.id < cfg.train_views {
            (Split::Train, format!("train/r_{:03}", cam.id))
        } else {
            (Split::Test, format!("test/r_{:03}", cam.id - cfg.train_views))
        };
        let colors = scene.render_color(cam, cfg.supersample);
        let mut image = ImageBuffer::new(cam.width, cam.height, 3);
        let mut mask = ImageBuffer::new(cam.width, cam.height, 1);
        let mut depth = Vec::with_capacity(cam.width * cam.height);
        for j in 0..cam.height {
            for i in 0..cam.width {
                image.set_pixel(i, j, colors[j * cam.width + i]);
                let hit = scene.primary(&cam.pixel_center_ray(i, j));
                mask.set(i, j, 0, if hit.mirror.is_some() { 1.0 } else { 0.0 });
                depth.push(hit.depth);
            }
        }
        let file = format!("{name}.png");
        let mask_file = format!("{name}_mask.png");
        let depth_file = format!("{name}_depth.f32");
        image.save_png(&out.join(&file))?;
        mask.save_png(&out.join(&mask_file))?;
        save_f32_raw(&out.join(&depth_file), &depth)?;
        frames.push(FrameRecord {
            file,
            split,
            camera: cam.to_record(),
            mask: Some(mask_file),
            depth: Some(depth_file),
        });
    }
    let gt = PrimitiveManifest {
        config_hash: None,
        primitives: scene
            .mirrors
            .iter()
            .map(|m| ManifestEntry {
                record: m.to_record(),
                metrics: None,
                accepted: true,
            })
            .collect(),
    };
    gt.save(&out.join(GT_PRIMITIVES_NAME))?;
    let (bounds_min, bounds_max) = scene.bounds();
    let manifest = DatasetManifest {
        bounds_min,
        bounds_max,
        frames,
        gt_primitives: Some(GT_PRIMITIVES_NAME.into()),
    };
    let path = out.join(MANIFEST_NAME);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").at(&path)?;
    let echo = out.join("scene.toml");
    std::fs::write(&echo, format!("# seed = {seed}\n{}", toml::to_string(cfg).expect("scene config serializes"))).at(&echo)?;
    Dataset::load(out)
}
