//! Test-view evaluation: PSNR and SSIM over full images and mirror masks,
//! primitive errors against ground truth, CSV and JSON reports, and panels.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Split};
use super::run::{frame_stem, mkdir, render_camera, RunDir, RunLock};
use super::stage1::psnr_from_mse;
use crate::error::{IoContext, Result};
use crate::scene::{ImageBuffer, MirrorPrimitive};
use crate::scoring::{ssim_map, SsimWindow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: String,
    pub camera_id: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mirror_psnr: Option<f64>,
    pub mirror_ssim: Option<f64>,
    pub mirror_pixels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub psnr: f64,
    pub ssim: f64,
    /// Over views with at least one mirror pixel.
    pub mirror_psnr: Option<f64>,
    pub mirror_ssim: Option<f64>,
}

/// Geometric error of the predicted primitive matched to one GT mirror.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveMatch {
    pub predicted: usize,
    pub normal_angle_deg: f64,
    /// Distance of the GT center to the predicted plane, over the diameter.
    pub plane_distance: f64,
    /// Distance between the centers, over the diameter.
    pub center_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveError {
    pub gt_index: usize,
    pub matched: Option<PrimitiveMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: u32,
    pub split: Split,
    pub views: Vec<ViewMetrics>,
    pub mean: MeanMetrics,
    pub primitive_errors: Vec<PrimitiveError>,
}

/// Evaluation SSIM: an 11-tap Gaussian window averaged over color channels.
pub fn eval_window() -> SsimWindow {
    SsimWindow {
        luminance: false,
        ..SsimWindow::default()
    }
}

/// PSNR and mean SSIM of `rendered` against `target`, over all pixels and
/// over the pixels where `mask` is set.
pub fn view_metrics(rendered: &ImageBuffer, target: &ImageBuffer, mask: Option<&[bool]>) -> Result<(f64, f64, Option<(f64, f64, usize)>)> {
    let ssim = ssim_map(rendered, target, &eval_window())?;
    let ch = target.channels;
    let n = target.width * target.height;
    let sq = |k: usize| (0..ch).map(|c| (rendered.data[k * ch + c] - target.data[k * ch + c]).powi(2)).sum::<f64>();
    let full_mse = (0..n).map(sq).sum::<f64>() / (n * ch) as f64;
    let full = (psnr_from_mse(full_mse), ssim.data.iter().sum::<f64>() / n as f64);
    let masked = mask.and_then(|m| {
        let idx: Vec<usize> = (0..n).filter(|&k| m[k]).collect();
        (!idx.is_empty()).then(|| {
            let mse = idx.iter().map(|&k| sq(k)).sum::<f64>() / (idx.len() * ch) as f64;
            let s = idx.iter().map(|&k| ssim.data[k]).sum::<f64>() / idx.len() as f64;
            (psnr_from_mse(mse), s, idx.len())
        })
    });
    Ok((full.0, full.1, masked))
}

/// Matches each GT mirror to the predicted primitive with the nearest center.
pub fn primitive_errors(predicted: &[MirrorPrimitive], gt: &[MirrorPrimitive], diameter: f64) -> Vec<PrimitiveError> {
    gt.iter()
        .enumerate()
        .map(|(gi, g)| {
            let best = predicted
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1.center - g.center).norm().total_cmp(&(b.1.center - g.center).norm()));
            PrimitiveError {
                gt_index: gi,
                matched: best.map(|(pi, p)| PrimitiveMatch {
                    predicted: pi,
                    normal_angle_deg: p.n.dot(&g.n).abs().min(1.0).acos().to_degrees(),
                    plane_distance: p.unbounded_distance(&g.center).abs() / diameter,
                    center_distance: (p.center - g.center).norm() / diameter,
                }),
            }
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut s = String::from("view,camera_id,psnr,ssim,mirror_psnr,mirror_ssim,mirror_pixels\n");
    for v in &report.views {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", v.view, v.camera_id, v.psnr, v.ssim, cell(v.mirror_psnr), cell(v.mirror_ssim), v.mirror_pixels);
    }
    s
}

/// Ground truth, render, and tenfold absolute error side by side.
fn panel(target: &ImageBuffer, rendered: &ImageBuffer) -> ImageBuffer {
    let (w, h) = (target.width, target.height);
    let mut out = ImageBuffer::new(3 * w, h, 3);
    for j in 0..h {
        for i in 0..w {
            let a = target.pixel(i, j);
            let b = rendered.pixel(i, j);
            out.set_pixel(i, j, a);
            out.set_pixel(w + i, j, b);
            out.set_pixel(2 * w + i, j, std::array::from_fn(|c| (10.0 * (a[c] - b[c]).abs()).min(1.0)));
        }
    }
    out
}

/// Renders every view of `split` with `stage` (the latest when `None`) and
/// writes `report.csv`, `report.json` and `panels/` under `eval/`.
pub fn evaluate(out: &Path, split: Split, stage: Option<u32>) -> Result<EvalReport> {
    let run = RunDir::new(out);
    let _lock = RunLock::acquire(out)?;
    let start = Instant::now();
    let cfg = run.load_config()?;
    let ds = Dataset::load(&run.load_info()?.data)?;
    let stage = match stage {
        Some(s) => s,
        None => run.latest_stage()?,
    };
    let (field, prims) = run.load_stage(stage)?;
    let views = ds.views(split)?;
    let masks = ds.masks(split)?;
    if masks.is_none() {
        log::warn!("no mirror masks for the {split:?} split; mirror-region metrics omitted");
    }
    let dir = run.eval(stage, split);
    mkdir(&dir.join("panels"))?;
    let mut rows = Vec::with_capacity(views.len());
    for (k, (v, f)) in views.iter().zip(ds.split(split)).enumerate() {
        let (color, _) = render_camera(&field, &prims, &v.camera, &cfg, ds.diameter())?;
        let mask = masks.as_ref().map(|m| m[k].as_slice());
        let (psnr, ssim, masked) = view_metrics(&color, &v.image, mask)?;
        let stem = frame_stem(&f.image);
        panel(&v.image, &color).save_png(&dir.join("panels").join(format!("{stem}.png")))?;
        rows.push(ViewMetrics {
            view: stem,
            camera_id: v.camera.id,
            psnr,
            ssim,
            mirror_psnr: masked.map(|m| m.0),
            mirror_ssim: masked.map(|m| m.1),
            mirror_pixels: masked.map_or(0, |m| m.2),
        });
    }
    let report = EvalReport {
        stage,
        split,
        mean: MeanMetrics {
            psnr: mean(rows.iter().map(|r| r.psnr)).unwrap_or(f64::NAN),
            ssim: mean(rows.iter().map(|r| r.ssim)).unwrap_or(f64::NAN),
            mirror_psnr: mean(rows.iter().filter_map(|r| r.mirror_psnr)),
            mirror_ssim: mean(rows.iter().filter_map(|r| r.mirror_ssim)),
        },
        views: rows,
        primitive_errors: ds.gt_primitives.as_ref().map_or_else(Vec::new, |gt| primitive_errors(&prims, gt, ds.diameter())),
    };
    let csv = dir.join("report.csv");
    std::fs::write(&csv, report_csv(&report)).at(&csv)?;
    let json = dir.join("report.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report)? + "\n").at(&json)?;
    let tdir = run.root.join("timings");
    mkdir(&tdir)?;
    let tpath = tdir.join(format!("eval_stage{stage}.json"));
    std::fs::write(&tpath, serde_json::json!({ "seconds": start.elapsed().as_secs_f64(), "views": views.len() }).to_string()).at(&tpath)?;
    Ok(report)
}
