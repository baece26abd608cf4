//! Python bindings: cameras, mirror primitives, the radiance field, a few
//! loss and rendering kernels, and the pipeline stages.

use std::path::PathBuf;

use nalgebra::Vector3;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use nerfmd::field::render::render_ray;
use nerfmd::field::sampling::stratified_midpoints;
use nerfmd::field::{FieldArch, RadianceField};
use nerfmd::losses;
use nerfmd::pipeline::checkpoint::load_checkpoint;
use nerfmd::pipeline::config::PipelineConfig;
use nerfmd::pipeline::dataset::{generate_scene, Split};
use nerfmd::pipeline::run;
use nerfmd::pipeline::synth::SceneConfig;
use nerfmd::reflect_render::pixel_coverage;
use nerfmd::scene::{Camera, IntersectOptions, MirrorPrimitive, Ray};

fn py_err(e: nerfmd::Error) -> PyErr {
    match e {
        nerfmd::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "Camera", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyCamera(pub Camera);

#[pymethods]
impl PyCamera {
    /// Pinhole camera at `eye` looking at `target`; `fov_x` in radians.
    #[staticmethod]
    #[pyo3(signature = (width, height, fov_x, eye, target, up = [0.0, 1.0, 0.0], near = 0.05, far = 10.0, id = 0))]
    #[allow(clippy::too_many_arguments)]
    fn look_at(width: usize, height: usize, fov_x: f64, eye: [f64; 3], target: [f64; 3], up: [f64; 3], near: f64, far: f64, id: usize) -> PyResult<Self> {
        Camera::look_at(id, width, height, fov_x, eye.into(), target.into(), up.into(), near, far)
            .map(Self)
            .map_err(py_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    #[getter]
    fn focal(&self) -> f64 {
        self.0.focal
    }

    #[getter]
    fn origin(&self) -> [f64; 3] {
        self.0.origin.into()
    }

    /// `(origin, direction)` of the ray through continuous pixel `(x, y)`.
    fn ray(&self, x: f64, y: f64) -> PyResult<([f64; 3], [f64; 3])> {
        let r = self.0.camera_ray(x, y).map_err(py_err)?;
        Ok((r.origin.into(), r.direction.into()))
    }

    fn unproject(&self, x: f64, y: f64, depth: f64) -> PyResult<[f64; 3]> {
        self.0.unproject(x, y, depth).map(Into::into).map_err(py_err)
    }

    /// `((x, y), depth)`, or `None` behind the camera.
    fn reproject(&self, point: [f64; 3]) -> Option<([f64; 2], f64)> {
        self.0.reproject(&point.into())
    }
}

#[pyclass(name = "MirrorPrimitive", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyPrimitive(pub MirrorPrimitive);

#[pymethods]
impl PyPrimitive {
    #[staticmethod]
    fn rect(center: [f64; 3], u: [f64; 3], v: [f64; 3], half_extents: [f64; 2]) -> PyResult<Self> {
        MirrorPrimitive::rect(center.into(), u.into(), v.into(), half_extents).map(Self).map_err(py_err)
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.0.center.into()
    }

    #[getter]
    fn normal(&self) -> [f64; 3] {
        self.0.n.into()
    }

    #[getter]
    fn half_extents(&self) -> [f64; 2] {
        self.0.half_extents
    }

    /// `(t, point, normal)` of the hit, or `None`.
    #[pyo3(signature = (origin, direction, eps_t = 1e-6))]
    fn intersect(&self, origin: [f64; 3], direction: [f64; 3], eps_t: f64) -> Option<(f64, [f64; 3], [f64; 3])> {
        let ray = Ray::new(origin.into(), direction.into());
        let opts = IntersectOptions { eps_t, single_sided: false };
        self.0.intersect(&ray, &opts).map(|h| (h.t, h.point.into(), h.normal.into()))
    }

    /// Antialiased coverage of pixel `(x, y)` of `camera` (continuous coordinates).
    fn coverage(&self, camera: &PyCamera, x: f64, y: f64) -> f64 {
        pixel_coverage(&camera.0, [x, y], &self.0, false)
    }
}

#[pyclass(name = "RadianceField", from_py_object)]
#[derive(Clone)]
pub struct PyField(pub RadianceField);

#[pymethods]
impl PyField {
    #[new]
    #[pyo3(signature = (bounds_min, bounds_max, trunk = vec![64, 64, 64, 64], color_width = 64, pos_levels = 6, dir_levels = 2, seed = 0))]
    fn new(bounds_min: [f64; 3], bounds_max: [f64; 3], trunk: Vec<usize>, color_width: usize, pos_levels: usize, dir_levels: usize, seed: u64) -> PyResult<Self> {
        let arch = FieldArch {
            pos_levels,
            dir_levels,
            trunk,
            color_width,
            bounds_min,
            bounds_max,
        };
        RadianceField::new(arch, seed).map(Self).map_err(py_err)
    }

    /// Field stored in a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(&path).map(|(f, _)| Self(f)).map_err(py_err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    /// `(sigma, rgb)` at position `x` seen from direction `d`.
    fn query(&self, x: [f64; 3], d: [f64; 3]) -> PyResult<(f64, [f64; 3])> {
        self.0.query(x, d).map_err(py_err)
    }

    /// `(rgb, depth, variance)` with `samples` evenly spaced midpoints.
    #[pyo3(signature = (origin, direction, near, far, samples = 64))]
    fn render_ray(&self, origin: [f64; 3], direction: [f64; 3], near: f64, far: f64, samples: usize) -> PyResult<([f64; 3], f64, f64)> {
        if !(near < far) || samples < 2 {
            return Err(PyValueError::new_err("need near < far and at least two samples"));
        }
        let d = Vector3::from(direction);
        if !(d.norm() > 0.0) {
            return Err(PyValueError::new_err("direction must be non-zero"));
        }
        let ray = Ray::new(origin.into(), d);
        let r = render_ray(&self.0, &ray, &stratified_midpoints(near, far, samples), [0.0; 3]).map_err(py_err)?;
        Ok((r.color, r.depth, r.depth_variance))
    }
}

#[pyfunction]
fn reflect_direction(d: [f64; 3], n: [f64; 3]) -> [f64; 3] {
    nerfmd::scene::reflect_direction(&d.into(), &n.into()).into()
}

#[pyfunction]
fn p_schedule(tau: u64, tau_init: u64, tau_inc: u64, tau_std: u64) -> PyResult<f64> {
    let s = losses::PNormSchedule::new(tau_init, tau_inc, tau_std).map_err(py_err)?;
    Ok(s.p(tau))
}

#[pyfunction]
fn image_loss(rendered: Vec<[f64; 3]>, target: Vec<[f64; 3]>, p: f64) -> PyResult<f64> {
    losses::image_loss(&rendered, &target, p).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (out, seed = 0, config = None))]
fn generate(out: PathBuf, seed: u64, config: Option<PathBuf>) -> PyResult<usize> {
    let cfg = match config {
        Some(p) => SceneConfig::load(&p).map_err(py_err)?,
        None => SceneConfig::default(),
    };
    generate_scene(&cfg, seed, &out).map(|d| d.frames.len()).map_err(py_err)
}

/// Runs stage 1 and returns the training PSNR.
#[pyfunction]
#[pyo3(signature = (data, out, config = None))]
fn stage1(py: Python<'_>, data: PathBuf, out: PathBuf, config: Option<PathBuf>) -> PyResult<f64> {
    let cfg = match config {
        Some(p) => PipelineConfig::load(&p).map_err(py_err)?,
        None => PipelineConfig::default(),
    };
    py.detach(|| run::run_stage1(&data, &out, &cfg)).map(|s| s.train_psnr).map_err(py_err)
}

/// Runs detection and returns the primitive manifest as JSON.
#[pyfunction]
fn detect(py: Python<'_>, run_dir: PathBuf) -> PyResult<String> {
    let m = py.detach(|| run::run_detect(&run_dir)).map_err(py_err)?;
    json(&m)
}

/// Runs stage 2 and returns the number of refined primitives.
#[pyfunction]
fn stage2(py: Python<'_>, run_dir: PathBuf) -> PyResult<usize> {
    py.detach(|| run::run_stage2(&run_dir)).map(|s| s.primitives.len()).map_err(py_err)
}

/// Evaluates a stage on a split and returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (run_dir, split = "test", stage = None))]
fn evaluate(py: Python<'_>, run_dir: PathBuf, split: &str, stage: Option<u32>) -> PyResult<String> {
    let split: Split = split.parse().map_err(py_err)?;
    let r = py.detach(|| run::evaluate(&run_dir, split, stage)).map_err(py_err)?;
    json(&r)
}

#[pymodule(name = "nerfmd")]
mod nerfmd_module {
    #[pymodule_export]
    use super::{detect, evaluate, generate, image_loss, p_schedule, reflect_direction, stage1, stage2, PyCamera, PyField, PyPrimitive};
}
