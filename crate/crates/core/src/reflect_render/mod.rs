//! Second-stage rendering: reflection paths through mirror primitives,
//! antialiased mirror masks, blending of primary and reflected branches, and
//! joint optimization of the field and the primitives.

pub mod blend;
pub mod coverage;
pub mod train;

use nalgebra::Vector3;

use crate::scene::{reflect_direction, Hit, IntersectOptions, MirrorPrimitive, Ray};

pub use blend::{render_blended_rays, render_pixel_blended, BlendConfig, BlendedSample};
pub use coverage::{first_bounce_coverage, pixel_coverage, pixel_coverage_dual, render_mask, supersampled_mask};
pub use train::{stage2_train_step, Stage2Batch, Stage2Report, Stage2State};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSegment {
    pub ray: Ray,
    /// Primitive index and hit that end this segment.
    pub hit: Option<(usize, Hit)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectedPath {
    pub segments: Vec<PathSegment>,
    pub bounce_count: usize,
}

/// Closest hit over active primitives.
pub fn nearest_hit(ray: &Ray, primitives: &[MirrorPrimitive], opts: &IntersectOptions) -> Option<(usize, Hit)> {
    primitives
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.intersect(ray, opts).map(|h| (i, h)))
        .min_by(|a, b| a.1.t.total_cmp(&b.1.t))
}

fn reflected(ray: &Ray, hit: &Hit) -> Ray {
    Ray {
        origin: hit.point,
        direction: reflect_direction(&ray.direction, &hit.normal).normalize(),
        ..*ray
    }
}

/// Follows `ray` through mirror reflections, at most `bounce_limit` times.
/// A hit found after the last allowed bounce ends the final segment.
pub fn trace_with_reflections(ray: &Ray, primitives: &[MirrorPrimitive], bounce_limit: usize, opts: &IntersectOptions) -> ReflectedPath {
    continue_path(Vec::new(), *ray, primitives, bounce_limit, 0, opts)
}

fn continue_path(
    mut segments: Vec<PathSegment>,
    mut ray: Ray,
    primitives: &[MirrorPrimitive],
    bounce_limit: usize,
    mut bounces: usize,
    opts: &IntersectOptions,
) -> ReflectedPath {
    loop {
        let hit = nearest_hit(&ray, primitives, opts);
        segments.push(PathSegment { ray, hit });
        match hit {
            Some((_, h)) if bounces < bounce_limit => {
                ray = reflected(&ray, &h);
                bounces += 1;
            }
            _ => break,
        }
    }
    ReflectedPath {
        segments,
        bounce_count: bounces,
    }
}

/// Path whose first bounce is forced onto the unbounded plane of
/// `primitives[index]`; later bounces use bounded hits. `None` when the plane
/// is not in front of the ray.
pub fn path_via_plane(
    ray: &Ray,
    primitives: &[MirrorPrimitive],
    index: usize,
    bounce_limit: usize,
    opts: &IntersectOptions,
) -> Option<ReflectedPath> {
    if bounce_limit == 0 {
        return None;
    }
    let prim = &primitives[index];
    let t = prim.intersect_plane(ray, opts)?;
    let point = ray.at(t);
    let hit = Hit {
        t,
        point,
        normal: prim.normal_at(&point),
    };
    let seg = PathSegment {
        ray: *ray,
        hit: Some((index, hit)),
    };
    Some(continue_path(vec![seg], reflected(ray, &hit), primitives, bounce_limit, 1, opts))
}

/// A path flattened onto one cumulative length parameter `s`, so that the
/// one-dimensional sampling and compositing apply unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedPath {
    /// `(start point, direction, s at start)` per segment.
    pieces: Vec<(Vector3<f64>, Vector3<f64>, f64)>,
    pub end: f64,
}

impl UnfoldedPath {
    /// The first segment runs to its hit or `first_far`; later segments to
    /// their hit or `segment_far` beyond their start. Open segments also stop
    /// where they leave `bounds`.
    pub fn new(path: &ReflectedPath, first_far: f64, segment_far: f64, bounds: Option<&[[f64; 3]; 2]>) -> Self {
        let mut pieces = Vec::with_capacity(path.segments.len());
        let mut s = 0.0;
        for (k, seg) in path.segments.iter().enumerate() {
            pieces.push((seg.ray.origin, seg.ray.direction, s));
            s += match seg.hit {
                Some((_, h)) => h.t,
                None if k == 0 => seg.ray.clip_far(0.0, first_far, bounds),
                None => seg.ray.clip_far(0.0, segment_far, bounds),
            };
        }
        Self { pieces, end: s }
    }

    pub fn straight(ray: &Ray, near: f64, far: f64, bounds: Option<&[[f64; 3]; 2]>) -> Self {
        Self {
            pieces: vec![(ray.origin, ray.direction, 0.0)],
            end: ray.clip_far(near, far, bounds),
        }
    }

    fn piece(&self, s: f64) -> usize {
        self.pieces.partition_point(|p| p.2 <= s).saturating_sub(1)
    }

    pub fn position(&self, s: f64) -> Vector3<f64> {
        let (o, d, s0) = self.pieces[self.piece(s)];
        o + d * (s - s0)
    }

    pub fn direction(&self, s: f64) -> Vector3<f64> {
        self.pieces[self.piece(s)].1
    }

    /// Path length at which the first bounce happens.
    pub fn first_bounce(&self) -> Option<f64> {
        self.pieces.get(1).map(|p| p.2)
    }
}
