//! The radiance field network: frequency-encoded position through a ReLU
//! trunk into a softplus density head and a view-conditioned sigmoid color
//! branch. Forward and backward passes run on whole batches of samples.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoding::{encode_backward, encode_into, encoded_len};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldArch {
    pub pos_levels: usize,
    pub dir_levels: usize,
    pub trunk: Vec<usize>,
    pub color_width: usize,
    /// Scene box; positions are clamped into it and normalized to `[-1, 1]`.
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
}

impl FieldArch {
    pub fn validate(&self) -> Result<()> {
        if self.trunk.is_empty() || self.trunk.contains(&0) || self.color_width == 0 {
            return Err(Error::Config("field layers must be non-empty with positive widths".into()));
        }
        if (0..3).any(|i| !(self.bounds_max[i] > self.bounds_min[i])) {
            return Err(Error::Config("field bounds must have positive extent".into()));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Slot {
    inp: usize,
    out: usize,
    w: usize,
    b: usize,
}

impl Slot {
    fn len(&self) -> usize {
        self.inp * self.out + self.out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    trunk: Vec<Slot>,
    density: Slot,
    color_hidden: Slot,
    color_out: Slot,
    total: usize,
}

impl Layout {
    fn new(arch: &FieldArch) -> Self {
        let mut offset = 0;
        let mut slot = |inp: usize, out: usize| {
            let s = Slot {
                inp,
                out,
                w: offset,
                b: offset + inp * out,
            };
            offset += s.len();
            s
        };
        let mut trunk = Vec::with_capacity(arch.trunk.len());
        let mut inp = encoded_len(arch.pos_levels);
        for &w in &arch.trunk {
            trunk.push(slot(inp, w));
            inp = w;
        }
        let density = slot(inp, 1);
        let color_hidden = slot(inp + encoded_len(arch.dir_levels), arch.color_width);
        let color_out = slot(arch.color_width, 3);
        Self {
            trunk,
            density,
            color_hidden,
            color_out,
            total: offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField {
    pub arch: FieldArch,
    layout: Layout,
    pub params: Vec<f64>,
}

/// Activations cached by [`RadianceField::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct FieldBatch {
    pub sigma: Vec<f64>,
    /// Empty for density-only evaluations.
    pub color: Vec<[f64; 3]>,
    enc_pos: Array2<f64>,
    enc_dir: Option<Array2<f64>>,
    clamped: Vec<[bool; 3]>,
    acts: Vec<Array2<f64>>,
    density_raw: Array1<f64>,
    color_hidden: Option<Array2<f64>>,
}

impl FieldBatch {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

impl RadianceField {
    /// He-uniform weights from a seeded generator, zero biases.
    pub fn new(arch: FieldArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |slot: &Slot, gain: f64| {
            let bound = gain * (6.0 / slot.inp as f64).sqrt();
            for p in &mut params[slot.w..slot.b] {
                *p = rng.random_range(-bound..bound);
            }
        };
        for slot in &layout.trunk {
            fill(slot, 1.0);
        }
        fill(&layout.density, 0.5);
        fill(&layout.color_hidden, 1.0);
        fill(&layout.color_out, 0.5);
        Ok(Self { arch, layout, params })
    }

    pub fn from_params(arch: FieldArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.total {
            return Err(Error::InvalidInput(format!(
                "expected {} field parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        let field = Self { arch, layout, params };
        field.check_finite()?;
        Ok(field)
    }

    pub fn parameter_count(&self) -> usize {
        self.layout.total
    }

    /// `[bounds_min, bounds_max]` of the architecture.
    pub fn bounds(&self) -> [[f64; 3]; 2] {
        [self.arch.bounds_min, self.arch.bounds_max]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.iter().position(|p| !p.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                what: "field parameter",
                index,
            }),
            None => Ok(()),
        }
    }

    /// Zeroes the density head so that every position has the same density.
    pub fn zero_density_head(&mut self) {
        let d = self.layout.density;
        self.params[d.w..d.w + d.len()].fill(0.0);
    }

    pub fn density_bias_mut(&mut self) -> &mut f64 {
        &mut self.params[self.layout.density.b]
    }

    /// Rounds parameters to single precision, the checkpoint storage format.
    pub fn quantize_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    fn weight(&self, s: &Slot) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((s.inp, s.out), &self.params[s.w..s.b]).expect("layout")
    }

    fn bias(&self, s: &Slot) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[s.b..s.b + s.out])
    }

    fn normalize(&self, x: [f64; 3]) -> ([f64; 3], [bool; 3]) {
        let mut out = [0.0; 3];
        let mut clamped = [false; 3];
        for i in 0..3 {
            let (lo, hi) = (self.arch.bounds_min[i], self.arch.bounds_max[i]);
            let xc = x[i].clamp(lo, hi);
            clamped[i] = xc != x[i];
            out[i] = 2.0 * (xc - lo) / (hi - lo) - 1.0;
        }
        (out, clamped)
    }

    /// Density and (optionally) color for a batch of samples. `dirs = None`
    /// skips the color branch.
    pub fn forward(&self, positions: &[[f64; 3]], dirs: Option<&[[f64; 3]]>) -> FieldBatch {
        let n = positions.len();
        let plen = encoded_len(self.arch.pos_levels);
        let mut enc_pos = Array2::<f64>::zeros((n, plen));
        let mut clamped = Vec::with_capacity(n);
        for (row, x) in enc_pos.outer_iter_mut().zip(positions) {
            let (xn, cl) = self.normalize(*x);
            clamped.push(cl);
            encode_into(xn, self.arch.pos_levels, row.into_slice().expect("contiguous"));
        }

        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.layout.trunk.len());
        for (i, slot) in self.layout.trunk.iter().enumerate() {
            let input = if i == 0 { enc_pos.view() } else { acts[i - 1].view() };
            let mut z = Array2::<f64>::zeros((n, slot.out));
            z += &self.bias(slot);
            general_mat_mul(1.0, &input, &self.weight(slot), 1.0, &mut z);
            relu_inplace(&mut z);
            acts.push(z);
        }
        let top = acts.last().expect("trunk non-empty");

        let d = &self.layout.density;
        let w_sigma = self.weight(d).column(0).to_owned();
        let density_raw = top.dot(&w_sigma) + self.params[d.b];
        let sigma: Vec<f64> = density_raw.iter().map(|&s| softplus(s)).collect();

        let (enc_dir, color_hidden, color) = match dirs {
            None => (None, None, Vec::new()),
            Some(dirs) => {
                assert_eq!(dirs.len(), n);
                let dlen = encoded_len(self.arch.dir_levels);
                let mut enc_dir = Array2::<f64>::zeros((n, dlen));
                for (row, d) in enc_dir.outer_iter_mut().zip(dirs) {
                    encode_into(*d, self.arch.dir_levels, row.into_slice().expect("contiguous"));
                }
                let ch = &self.layout.color_hidden;
                let w = self.weight(ch);
                let top_w = top.ncols();
                let mut hc = Array2::<f64>::zeros((n, ch.out));
                hc += &self.bias(ch);
                general_mat_mul(1.0, &top.view(), &w.slice(s![..top_w, ..]), 1.0, &mut hc);
                general_mat_mul(1.0, &enc_dir.view(), &w.slice(s![top_w.., ..]), 1.0, &mut hc);
                relu_inplace(&mut hc);
                let co = &self.layout.color_out;
                let mut raw = Array2::<f64>::zeros((n, 3));
                raw += &self.bias(co);
                general_mat_mul(1.0, &hc.view(), &self.weight(co), 1.0, &mut raw);
                let color = raw
                    .outer_iter()
                    .map(|r| [sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2])])
                    .collect();
                (Some(enc_dir), Some(hc), color)
            }
        };

        FieldBatch {
            sigma,
            color,
            enc_pos,
            enc_dir,
            clamped,
            acts,
            density_raw,
            color_hidden,
        }
    }

    /// Accumulates parameter gradients into `grad` given loss gradients with
    /// respect to the batch outputs. Returns position gradients when asked.
    pub fn backward(
        &self,
        batch: &FieldBatch,
        dsigma: &[f64],
        dcolor: Option<&[[f64; 3]]>,
        grad: &mut [f64],
        want_position_grad: bool,
    ) -> Option<Vec<[f64; 3]>> {
        let n = batch.len();
        assert_eq!(dsigma.len(), n);
        assert_eq!(grad.len(), self.layout.total);
        let top = batch.acts.last().expect("trunk non-empty");
        let top_w = top.ncols();
        let mut d_top = Array2::<f64>::zeros((n, top_w));

        if let (Some(dcolor), Some(hc), Some(enc_dir)) = (dcolor, &batch.color_hidden, &batch.enc_dir) {
            let co = self.layout.color_out;
            let mut draw = Array2::<f64>::zeros((n, 3));
            for (i, (mut row, dc)) in draw.outer_iter_mut().zip(dcolor).enumerate() {
                let c = batch.color[i];
                for k in 0..3 {
                    row[k] = dc[k] * c[k] * (1.0 - c[k]);
                }
            }
            accumulate_layer(grad, &co, &hc.view(), &draw);
            let mut dhc = Array2::<f64>::zeros((n, co.inp));
            general_mat_mul(1.0, &draw, &self.weight(&co).t(), 0.0, &mut dhc);
            dhc.zip_mut_with(hc, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            });

            let ch = self.layout.color_hidden;
            let w = self.weight(&ch);
            {
                let (gw, gb) = grad[ch.w..ch.w + ch.len()].split_at_mut(ch.inp * ch.out);
                let mut gw = ArrayViewMut2::from_shape((ch.inp, ch.out), gw).expect("layout");
                general_mat_mul(1.0, &top.t(), &dhc, 1.0, &mut gw.slice_mut(s![..top_w, ..]));
                general_mat_mul(1.0, &enc_dir.t(), &dhc, 1.0, &mut gw.slice_mut(s![top_w.., ..]));
                let mut gb = ArrayViewMut1::from(gb);
                gb += &dhc.sum_axis(Axis(0));
            }
            general_mat_mul(1.0, &dhc, &w.slice(s![..top_w, ..]).t(), 1.0, &mut d_top);
        }

        let d = self.layout.density;
        let ds: Array1<f64> = batch
            .density_raw
            .iter()
            .zip(dsigma)
            .map(|(&raw, &g)| g * sigmoid(raw))
            .collect();
        {
            let mut gw = ArrayViewMut1::from(&mut grad[d.w..d.b]);
            gw += &top.t().dot(&ds);
            grad[d.b] += ds.sum();
        }
        let w_sigma = self.weight(&d).column(0).to_owned();
        for (mut row, &g) in d_top.outer_iter_mut().zip(ds.iter()) {
            row.scaled_add(g, &w_sigma);
        }

        let mut delta = d_top;
        for i in (0..self.layout.trunk.len()).rev() {
            let slot = self.layout.trunk[i];
            delta.zip_mut_with(&batch.acts[i], |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            });
            let input = if i == 0 { batch.enc_pos.view() } else { batch.acts[i - 1].view() };
            accumulate_layer(grad, &slot, &input, &delta);
            if i > 0 || want_position_grad {
                let mut prev = Array2::<f64>::zeros((n, slot.inp));
                general_mat_mul(1.0, &delta, &self.weight(&slot).t(), 0.0, &mut prev);
                delta = prev;
            }
        }

        if !want_position_grad {
            return None;
        }
        let levels = self.arch.pos_levels;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let feats = batch.enc_pos.row(i);
            let g = delta.row(i);
            let dn = encode_backward(
                feats.as_slice().expect("contiguous"),
                g.as_slice().expect("contiguous"),
                levels,
            );
            let mut dx = [0.0; 3];
            for k in 0..3 {
                if !batch.clamped[i][k] {
                    dx[k] = dn[k] * 2.0 / (self.arch.bounds_max[k] - self.arch.bounds_min[k]);
                }
            }
            out.push(dx);
        }
        Some(out)
    }

    /// Density and color at a single point.
    pub fn query(&self, x: [f64; 3], d: [f64; 3]) -> Result<(f64, [f64; 3])> {
        self.check_finite()?;
        let b = self.forward(&[x], Some(&[d]));
        let (sigma, color) = (b.sigma[0], b.color[0]);
        if !sigma.is_finite() || color.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                what: "field output",
                index: 0,
            });
        }
        Ok((sigma, color))
    }
}

fn accumulate_layer(grad: &mut [f64], slot: &Slot, input: &ArrayView2<'_, f64>, delta: &Array2<f64>) {
    let (gw, gb) = grad[slot.w..slot.w + slot.len()].split_at_mut(slot.inp * slot.out);
    let mut gw = ArrayViewMut2::from_shape((slot.inp, slot.out), gw).expect("layout");
    general_mat_mul(1.0, &input.t(), delta, 1.0, &mut gw);
    let mut gb = ArrayViewMut1::from(gb);
    gb += &delta.sum_axis(Axis(0));
}
