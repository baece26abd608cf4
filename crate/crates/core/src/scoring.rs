//! Windowed structural similarity between renders and targets, and the
//! mirror-candidacy score combining it with depth variance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::scene::image::{load_f32_raw, save_f32_raw};
use crate::scene::ImageBuffer;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimWindow {
    pub size: usize,
    pub sigma: f64,
    /// Compare Rec. 709 luminance; otherwise average per-channel SSIM.
    pub luminance: bool,
}

impl Default for SsimWindow {
    fn default() -> Self {
        Self {
            size: 11,
            sigma: 1.5,
            luminance: true,
        }
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Index reflected back into `[0, n)` about the border (`-1 -> 0`, `n -> n-1`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur of a single-channel plane.
fn blur(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * plane[y * w + reflect(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * tmp[reflect(y as isize + k as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = blur(a, w, h, taps);
    let mu_b = blur(b, w, h, taps);
    let aa = blur(&prod(a, a), w, h, taps);
    let bb = blur(&prod(b, b), w, h, taps);
    let ab = blur(&prod(a, b), w, h, taps);
    (0..w * h)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = (aa[i] - ma * ma).max(0.0);
            let vb = (bb[i] - mb * mb).max(0.0);
            let cov = ab[i] - ma * mb;
            let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            s.clamp(-1.0, 1.0)
        })
        .collect()
}

fn plane(img: &ImageBuffer, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

pub fn ssim_map(rendered: &ImageBuffer, target: &ImageBuffer, window: &SsimWindow) -> Result<ImageBuffer> {
    if !rendered.same_shape(target) {
        return Err(Error::InvalidInput(format!(
            "ssim needs equal shapes, got {}x{}x{} and {}x{}x{}",
            rendered.width, rendered.height, rendered.channels, target.width, target.height, target.channels
        )));
    }
    if window.size % 2 == 0 || !(window.sigma > 0.0) {
        return Err(Error::InvalidInput("ssim window must be odd with sigma > 0".into()));
    }
    let (w, h) = (rendered.width, rendered.height);
    let taps = gaussian_taps(window.size, window.sigma);
    let data = if window.luminance || rendered.channels == 1 {
        let (a, b) = if rendered.channels == 1 {
            (rendered.data.clone(), target.data.clone())
        } else {
            (rendered.luminance().data, target.luminance().data)
        };
        ssim_plane(&a, &b, w, h, &taps)
    } else {
        let mut acc = vec![0.0; w * h];
        for c in 0..rendered.channels {
            let s = ssim_plane(&plane(rendered, c), &plane(target, c), w, h, &taps);
            acc.iter_mut().zip(s).for_each(|(a, v)| *a += v / rendered.channels as f64);
        }
        acc
    };
    ImageBuffer::from_data(w, h, 1, data)
}

/// `(1 - ssim) / 2 * exp(-c * variance)` per pixel.
pub fn score_map(ssim: &ImageBuffer, variance: &ImageBuffer, c: f64) -> Result<ImageBuffer> {
    if !ssim.same_shape(variance) || ssim.channels != 1 {
        return Err(Error::InvalidInput("score map needs equal single-channel maps".into()));
    }
    if !(c >= 0.0) {
        return Err(Error::InvalidInput(format!("score slope must be non-negative, got {c}")));
    }
    let data = ssim
        .data
        .iter()
        .zip(&variance.data)
        .map(|(s, v)| (0.5 * (1.0 - s) * (-c * v.max(0.0)).exp()).clamp(0.0, 1.0))
        .collect();
    ImageBuffer::from_data(ssim.width, ssim.height, 1, data)
}

/// Pixels `(x, y)` with score strictly above `threshold`.
pub fn threshold_scores(score: &ImageBuffer, threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..score.height {
        for x in 0..score.width {
            if score.get(x, y, 0) > threshold {
                out.push((x, y));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMaps {
    pub ssim: ImageBuffer,
    pub depth: ImageBuffer,
    pub depth_variance: ImageBuffer,
    pub score: ImageBuffer,
}

impl ScoreMaps {
    pub fn compute(
        rendered: &ImageBuffer,
        target: &ImageBuffer,
        depth: ImageBuffer,
        depth_variance: ImageBuffer,
        window: &SsimWindow,
        c: f64,
    ) -> Result<Self> {
        let ssim = ssim_map(rendered, target, window)?;
        let score = score_map(&ssim, &depth_variance, c)?;
        Ok(Self {
            ssim,
            depth,
            depth_variance,
            score,
        })
    }

    /// 16-bit previews plus exact little-endian f32 planes, prefixed by `stem`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let vmax = self.depth_variance.data.iter().copied().fold(0.0, f64::max).max(1e-12);
        let dmax = self.depth.data.iter().copied().fold(0.0, f64::max).max(1e-12);
        self.ssim.save_png16(&dir.join(format!("{stem}_ssim.png")), -1.0, 1.0)?;
        self.score.save_png16(&dir.join(format!("{stem}_score.png")), 0.0, 1.0)?;
        self.depth_variance.save_png16(&dir.join(format!("{stem}_variance.png")), 0.0, vmax)?;
        self.depth.save_png16(&dir.join(format!("{stem}_depth.png")), 0.0, dmax)?;
        for (name, img) in [("ssim", &self.ssim), ("score", &self.score), ("variance", &self.depth_variance), ("depth", &self.depth)] {
            save_f32_raw(&dir.join(format!("{stem}_{name}.f32")), &img.data)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str, width: usize, height: usize) -> Result<Self> {
        let get = |name: &str| -> Result<ImageBuffer> {
            let data = load_f32_raw(&dir.join(format!("{stem}_{name}.f32")))?;
            ImageBuffer::from_data(width, height, 1, data)
        };
        Ok(Self {
            ssim: get("ssim")?,
            depth: get("depth")?,
            depth_variance: get("variance")?,
            score: get("score")?,
        })
    }
}

/// Parameters recorded next to score maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSidecar {
    pub c: f64,
    pub threshold: f64,
    pub window: SsimWindow,
    pub ssim_range: [f64; 2],
    pub score_range: [f64; 2],
    pub variance_max: f64,
    pub depth_max: f64,
}

impl ScoreSidecar {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).at(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize, c: usize) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_data(w, h, c, (0..w * h * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn identical_images_score_one() {
        let a = random_image(1, 20, 16, 3);
        let s = ssim_map(&a, &a, &SsimWindow::default()).unwrap();
        assert!(s.data.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let per_channel = SsimWindow { luminance: false, ..Default::default() };
        let s = ssim_map(&a, &a, &per_channel).unwrap();
        assert!(s.data.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn constant_pairs_score_one() {
        let a = ImageBuffer::from_data(12, 12, 1, vec![0.4; 144]).unwrap();
        let s = ssim_map(&a, &a, &SsimWindow::default()).unwrap();
        assert!(s.data.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = random_image(1, 8, 8, 1);
        let b = random_image(2, 8, 9, 1);
        assert!(ssim_map(&a, &b, &SsimWindow::default()).is_err());
    }

    #[test]
    fn inverted_checker_matches_direct_formula() {
        // 11x11 checker of 0.1 / 0.9 and its complement: the center window
        // sees the whole patch, so the statistics can be written out directly.
        let n = 11;
        let checker: Vec<f64> = (0..n * n).map(|i| if (i % n + i / n) % 2 == 0 { 0.9 } else { 0.1 }).collect();
        let inverse: Vec<f64> = checker.iter().map(|v| 1.0 - v).collect();
        let a = ImageBuffer::from_data(n, n, 1, checker.clone()).unwrap();
        let b = ImageBuffer::from_data(n, n, 1, inverse.clone()).unwrap();
        let s = ssim_map(&a, &b, &SsimWindow::default()).unwrap();
        let center = s.get(5, 5, 0);

        let mut w2 = vec![0.0; n * n];
        let mut total = 0.0;
        for y in 0..n {
            for x in 0..n {
                let r2 = ((x as f64 - 5.0).powi(2) + (y as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
                w2[y * n + x] = (-r2).exp();
                total += w2[y * n + x];
            }
        }
        let (mut ma, mut mb) = (0.0, 0.0);
        for i in 0..n * n {
            ma += w2[i] / total * checker[i];
            mb += w2[i] / total * inverse[i];
        }
        let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
        for i in 0..n * n {
            let w = w2[i] / total;
            va += w * (checker[i] - ma).powi(2);
            vb += w * (inverse[i] - mb).powi(2);
            cov += w * (checker[i] - ma) * (inverse[i] - mb);
        }
        let expect = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        assert!(expect < 0.0);
        assert!((center - expect).abs() < 1e-9, "{center} vs {expect}");
    }

    #[test]
    fn score_examples() {
        let one = |v: f64| ImageBuffer::from_data(1, 1, 1, vec![v]).unwrap();
        assert_eq!(score_map(&one(1.0), &one(0.3), 2.0).unwrap().data[0], 0.0);
        assert_eq!(score_map(&one(-1.0), &one(0.0), 2.0).unwrap().data[0], 1.0);
        let s = score_map(&one(0.0), &one(std::f64::consts::LN_2), 1.0).unwrap().data[0];
        assert!((s - 0.25).abs() < 1e-15);
        assert!(score_map(&one(0.0), &one(0.0), -1.0).is_err());
    }

    #[test]
    fn threshold_examples() {
        let img = ImageBuffer::from_data(3, 1, 1, vec![0.0, 0.5, 1.0]).unwrap();
        assert!(threshold_scores(&img, 1.0).is_empty());
        assert_eq!(threshold_scores(&img, 0.0), vec![(1, 0), (2, 0)]);
    }

    #[test]
    fn maps_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let r = random_image(3, 9, 7, 3);
        let t = random_image(4, 9, 7, 3);
        let depth = random_image(5, 9, 7, 1);
        let var = random_image(6, 9, 7, 1);
        let maps = ScoreMaps::compute(&r, &t, depth, var, &SsimWindow::default(), 0.5).unwrap();
        maps.save(dir.path(), "v000").unwrap();
        let back = ScoreMaps::load(dir.path(), "v000", 9, 7).unwrap();
        for (a, b) in maps.score.data.iter().zip(&back.score.data) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(dir.path().join("v000_score.png").exists());
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric_and_bounded(seed in 0u64..1000) {
            let a = random_image(seed, 13, 10, 3);
            let b = random_image(seed + 7919, 13, 10, 3);
            let ab = ssim_map(&a, &b, &SsimWindow::default()).unwrap();
            let ba = ssim_map(&b, &a, &SsimWindow::default()).unwrap();
            for (x, y) in ab.data.iter().zip(&ba.data) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(x));
            }
        }

        #[test]
        fn score_decreases_in_ssim_and_variance(s in -1.0f64..1.0, ds in 0.0f64..0.5, v in 0.0f64..5.0, dv in 0.0f64..5.0, c in 0.0f64..3.0) {
            let one = |x: f64| ImageBuffer::from_data(1, 1, 1, vec![x]).unwrap();
            let base = score_map(&one(s), &one(v), c).unwrap().data[0];
            let higher_ssim = score_map(&one((s + ds).min(1.0)), &one(v), c).unwrap().data[0];
            let higher_var = score_map(&one(s), &one(v + dv), c).unwrap().data[0];
            prop_assert!(higher_ssim <= base + 1e-15);
            prop_assert!(higher_var <= base + 1e-15);
            prop_assert!((0.0..=1.0).contains(&base));
        }
    }
}
