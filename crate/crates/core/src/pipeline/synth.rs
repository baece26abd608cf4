//! Procedural box rooms with textured diffuse walls, a few solid blocks, and
//! wall-mounted perfect mirrors, rendered by an analytic recursive tracer.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::scene::{reflect_direction, Camera, IntersectOptions, MirrorPrimitive, Ray};

/// Generator settings, read from the scene TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub train_views: usize,
    pub test_views: usize,
    pub mirrors: usize,
    pub bounce_limit: usize,
    pub fov_deg: f64,
    /// Per-axis supersampling factor for color images.
    pub supersample: usize,
    /// Fraction of views aimed at a mirror.
    pub mirror_view_fraction: f64,
    pub blocks: usize,
    pub room_half: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            train_views: 40,
            test_views: 10,
            mirrors: 1,
            bounce_limit: 2,
            fov_deg: 70.0,
            supersample: 3,
            mirror_view_fraction: 0.5,
            blocks: 2,
            room_half: 2.0,
        }
    }
}

impl SceneConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if self.train_views == 0 || self.test_views == 0 {
            return bad("train and test splits must be non-empty");
        }
        if self.mirrors > 2 {
            return bad("at most two mirrors are supported");
        }
        if !(1.0..=150.0).contains(&self.fov_deg) {
            return bad("fov_deg must be in [1, 150]");
        }
        if self.supersample == 0 {
            return bad("supersample must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.mirror_view_fraction) {
            return bad("mirror_view_fraction must be in [0, 1]");
        }
        if !(self.room_half > 0.0) {
            return bad("room_half must be positive");
        }
        Ok(())
    }
}

/// Smooth two-tone pattern on a wall or block face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f64; 3],
    pub accent: [f64; 3],
    pub freq: [f64; 2],
    pub phase: [f64; 2],
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut color = || std::array::from_fn(|_| rng.random_range(0.1..0.9));
        let base = color();
        let accent = color();
        Self {
            base,
            accent,
            freq: [rng.random_range(1.0..3.0), rng.random_range(1.0..3.0)],
            phase: [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)],
        }
    }

    pub fn eval(&self, a: f64, b: f64) -> [f64; 3] {
        let s = 0.5 + 0.5 * (self.freq[0] * a + self.phase[0]).sin() * (self.freq[1] * b + self.phase[1]).cos();
        std::array::from_fn(|c| self.base[c] * (1.0 - s) + self.accent[c] * s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub half: f64,
    /// Faces ordered `-x, +x, -y, +y, -z, +z`.
    pub walls: [Texture; 6],
    pub blocks: Vec<Block>,
    pub mirrors: Vec<MirrorPrimitive>,
    pub bounce_limit: usize,
    pub opts: IntersectOptions,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Surface {
    Wall(usize),
    Block(usize, usize),
    Mirror(usize),
}

/// What the center ray of a pixel sees first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimaryHit {
    pub depth: f64,
    pub mirror: Option<usize>,
}

/// Exit distance and face of a ray leaving the axis-aligned box from inside.
fn box_exit(o: &Vector3<f64>, d: &Vector3<f64>, lo: [f64; 3], hi: [f64; 3]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for a in 0..3 {
        let (t, face) = if d[a] > 0.0 {
            ((hi[a] - o[a]) / d[a], 2 * a + 1)
        } else if d[a] < 0.0 {
            ((lo[a] - o[a]) / d[a], 2 * a)
        } else {
            continue;
        };
        if t < best.0 {
            best = (t, face);
        }
    }
    best
}

/// Entry distance and face of a ray hitting the box from outside.
fn box_entry(o: &Vector3<f64>, d: &Vector3<f64>, lo: [f64; 3], hi: [f64; 3], eps: f64) -> Option<(f64, usize)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut face = 0;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
        let mut fa = 2 * a;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
            fa = 2 * a + 1;
        }
        if ta > t0 {
            t0 = ta;
            face = fa;
        }
        t1 = t1.min(tb);
    }
    (t0 <= t1 && t0 > eps).then_some((t0, face))
}

/// In-face texture coordinates for a point on the face `face` of an axis-aligned box.
fn face_coords(p: &Vector3<f64>, face: usize) -> (f64, f64) {
    match face / 2 {
        0 => (p.y, p.z),
        1 => (p.x, p.z),
        _ => (p.x, p.y),
    }
}

impl SyntheticScene {
    pub fn diameter(&self) -> f64 {
        2.0 * self.half * 3f64.sqrt()
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        ([-self.half; 3], [self.half; 3])
    }

    pub fn random(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.room_half;
        let walls = std::array::from_fn(|_| Texture::random(rng));
        let mut blocks = Vec::new();
        for _ in 0..cfg.blocks {
            let size = [rng.random_range(0.25..0.5) * h, rng.random_range(0.2..0.45) * h, rng.random_range(0.25..0.5) * h];
            let cx = rng.random_range(-0.45..0.45) * h;
            let cz = rng.random_range(-0.45..0.45) * h;
            let min = [cx - 0.5 * size[0], -h, cz - 0.5 * size[2]];
            let max = [cx + 0.5 * size[0], -h + size[1], cz + 0.5 * size[2]];
            blocks.push(Block { min, max, texture: Texture::random(rng) });
        }
        // Mirrors on distinct vertical walls, slightly in front of them.
        let mut faces = vec![0usize, 1, 4, 5];
        let mut mirrors = Vec::new();
        for _ in 0..cfg.mirrors {
            let face = faces.remove(rng.random_range(0..faces.len()));
            let axis = face / 2;
            let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
            let inset = 1e-3 * h;
            let mut center = Vector3::zeros();
            center[axis] = sign * (h - inset);
            let n = -Vector3::ith(axis, sign);
            let v = Vector3::y();
            let u = v.cross(&n);
            let half_extents = [rng.random_range(0.3..0.45) * h, rng.random_range(0.25..0.4) * h];
            let lateral = rng.random_range(-0.25..0.25) * h;
            center += u * lateral;
            center.y = rng.random_range(-0.1..0.3) * h;
            mirrors.push(MirrorPrimitive::rect(center, u, v, half_extents)?);
        }
        Ok(Self {
            half: h,
            walls,
            blocks,
            mirrors,
            bounce_limit: cfg.bounce_limit,
            opts: IntersectOptions::for_scene(2.0 * h * 3f64.sqrt()),
        })
    }

    fn hit(&self, ray: &Ray) -> (f64, Surface) {
        let (lo, hi) = self.bounds();
        let (mut t, face) = box_exit(&ray.origin, &ray.direction, lo, hi);
        let mut surf = Surface::Wall(face);
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some((tb, f)) = box_entry(&ray.origin, &ray.direction, b.min, b.max, self.opts.eps_t) {
                if tb < t {
                    t = tb;
                    surf = Surface::Block(i, f);
                }
            }
        }
        for (i, m) in self.mirrors.iter().enumerate() {
            if let Some(h) = m.intersect(ray, &self.opts) {
                if h.t < t {
                    t = h.t;
                    surf = Surface::Mirror(i);
                }
            }
        }
        (t, surf)
    }

    pub fn primary(&self, ray: &Ray) -> PrimaryHit {
        let (depth, surf) = self.hit(ray);
        PrimaryHit {
            depth,
            mirror: match surf {
                Surface::Mirror(i) => Some(i),
                _ => None,
            },
        }
    }

    /// Color seen along `ray`, following up to `bounce_limit` mirror bounces.
    /// A mirror reached with no bounces left is black.
    pub fn trace(&self, ray: &Ray) -> [f64; 3] {
        self.trace_depth(ray, self.bounce_limit)
    }

    fn trace_depth(&self, ray: &Ray, bounces: usize) -> [f64; 3] {
        let (t, surf) = self.hit(ray);
        let p = ray.at(t);
        match surf {
            Surface::Wall(face) => {
                let (a, b) = face_coords(&p, face);
                self.walls[face].eval(a, b)
            }
            Surface::Block(i, face) => {
                let (a, b) = face_coords(&p, face);
                self.blocks[i].texture.eval(a, b)
            }
            Surface::Mirror(i) => {
                if bounces == 0 {
                    return [0.0; 3];
                }
                let n = self.mirrors[i].n;
                let reflected = Ray::new(p, reflect_direction(&ray.direction, &n));
                self.trace_depth(&reflected, bounces - 1)
            }
        }
    }

    pub fn inside_block(&self, p: &Vector3<f64>, margin: f64) -> bool {
        self.blocks
            .iter()
            .any(|b| (0..3).all(|a| p[a] > b.min[a] - margin && p[a] < b.max[a] + margin))
    }

    /// Camera inside the room, aimed at a mirror with probability
    /// `mirror_view_fraction`, otherwise at a random wall point.
    pub fn random_camera(&self, id: usize, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Camera> {
        let h = self.half;
        let eye = loop {
            let e = Vector3::new(
                rng.random_range(-0.6..0.6) * h,
                rng.random_range(-0.3..0.5) * h,
                rng.random_range(-0.6..0.6) * h,
            );
            if !self.inside_block(&e, 0.1 * h) && self.mirrors.iter().all(|m| m.unbounded_distance(&e).abs() > 0.4 * h) {
                break e;
            }
        };
        let aim_mirror = !self.mirrors.is_empty() && rng.random::<f64>() < cfg.mirror_view_fraction;
        let target = if aim_mirror {
            let m = &self.mirrors[rng.random_range(0..self.mirrors.len())];
            let a = rng.random_range(-0.5..0.5) * m.half_extents[0];
            let b = rng.random_range(-0.5..0.5) * m.half_extents[1];
            m.center + m.u * a + m.v * b
        } else {
            Vector3::new(rng.random_range(-1.0..1.0) * h, rng.random_range(-0.8..0.4) * h, rng.random_range(-1.0..1.0) * h)
        };
        let target = if (target - eye).norm() < 0.2 * h { eye + Vector3::new(0.0, 0.0, -h) } else { target };
        let far = (0..8)
            .map(|c| {
                let corner = Vector3::new(
                    if c & 1 == 0 { -h } else { h },
                    if c & 2 == 0 { -h } else { h },
                    if c & 4 == 0 { -h } else { h },
                );
                (corner - eye).norm()
            })
            .fold(0.0, f64::max);
        Camera::look_at(
            id,
            cfg.width,
            cfg.height,
            cfg.fov_deg.to_radians(),
            eye,
            target,
            Vector3::y(),
            0.02 * h,
            far,
        )
    }

    /// Box-filtered color image with `ss x ss` stratified subpixel rays.
    pub fn render_color(&self, cam: &Camera, ss: usize) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(cam.width * cam.height);
        for j in 0..cam.height {
            for i in 0..cam.width {
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let x = i as f64 + (sx as f64 + 0.5) / ss as f64;
                        let y = j as f64 + (sy as f64 + 0.5) / ss as f64;
                        let c = self.trace(&cam.camera_ray(x, y).expect("in bounds"));
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                let n = (ss * ss) as f64;
                out.push(acc.map(|v| v / n));
            }
        }
        out
    }
}
