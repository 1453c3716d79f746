//! Raw numeric kernels behind the graph operations. Everything here works on
//! plain slices; shape bookkeeping lives in the graph.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::gemm;

/// Output size and leading padding for "same"-style windows: the output has
/// `ceil(input / stride)` positions and the missing border is split with the
/// smaller half before the data.
pub fn same_padding(input: usize, window: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + window).saturating_sub(input);
    (out, total / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn same(
        batch: usize,
        in_ch: usize,
        in_h: usize,
        in_w: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let (out_h, pad_top) = same_padding(in_h, kernel, stride);
        let (out_w, pad_left) = same_padding(in_w, kernel, stride);
        ConvGeom {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kernel,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        }
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_ch, self.in_h, self.in_w]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_ch * self.out_plane()
    }

    /// Source offset inside one sample for patch row `r` and output position
    /// `(oy, ox)`, or `None` when it falls in the padding.
    #[inline]
    fn source(&self, r: usize, oy: usize, ox: usize) -> Option<usize> {
        let kk = self.kernel * self.kernel;
        let c = r / kk;
        let ky = (r % kk) / self.kernel;
        let kx = r % self.kernel;
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        if iy >= self.in_h || ix >= self.in_w {
            return None;
        }
        Some((c * self.in_h + iy) * self.in_w + ix)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let plane = self.out_plane();
        for r in 0..self.patch_len() {
            let row = &mut cols[r * plane..(r + 1) * plane];
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    row[oy * self.out_w + ox] = match self.source(r, oy, ox) {
                        Some(i) => x[i],
                        None => 0.0,
                    };
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let plane = self.out_plane();
        for r in 0..self.patch_len() {
            let row = &cols[r * plane..(r + 1) * plane];
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    if let Some(i) = self.source(r, oy, ox) {
                        x[i] += row[oy * self.out_w + ox];
                    }
                }
            }
        }
    }
}

/// Samples per shard for batch-parallel kernels. Fixed so that reductions
/// happen in the same order regardless of thread count.
const SHARD: usize = 8;

pub fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let mut y = vec![0.0; g.batch * out_len];
    y.par_chunks_mut(out_len * SHARD)
        .zip(x.par_chunks(in_len * SHARD))
        .for_each(|(ys, xs)| {
            let mut cols = vec![0.0; g.patch_len() * g.out_plane()];
            for (yn, xn) in ys.chunks_mut(out_len).zip(xs.chunks(in_len)) {
                g.im2col(xn, &mut cols);
                gemm(
                    g.out_ch,
                    g.patch_len(),
                    g.out_plane(),
                    w,
                    false,
                    &cols,
                    false,
                    0.0,
                    yn,
                );
            }
        });
    y
}

/// Adjoint of `conv2d` in its input: maps an output-shaped tensor to an
/// input-shaped one.
pub fn conv2d_back_input(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let mut gx = vec![0.0; g.batch * in_len];
    gx.par_chunks_mut(in_len * SHARD)
        .zip(gy.par_chunks(out_len * SHARD))
        .for_each(|(gxs, gys)| {
            let mut cols = vec![0.0; g.patch_len() * g.out_plane()];
            for (gxn, gyn) in gxs.chunks_mut(in_len).zip(gys.chunks(out_len)) {
                gemm(
                    g.patch_len(),
                    g.out_ch,
                    g.out_plane(),
                    w,
                    true,
                    gyn,
                    false,
                    0.0,
                    &mut cols,
                );
                g.col2im(&cols, gxn);
            }
        });
    gx
}

/// Adjoint of `conv2d` in its weights: summed over the batch.
pub fn conv2d_back_weight(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let wlen = g.out_ch * g.patch_len();
    let partials: Vec<Vec<f64>> = x
        .par_chunks(in_len * SHARD)
        .zip(gy.par_chunks(out_len * SHARD))
        .map(|(xs, gys)| {
            let mut acc = vec![0.0; wlen];
            let mut cols = vec![0.0; g.patch_len() * g.out_plane()];
            for (xn, gyn) in xs.chunks(in_len).zip(gys.chunks(out_len)) {
                g.im2col(xn, &mut cols);
                gemm(
                    g.out_ch,
                    g.out_plane(),
                    g.patch_len(),
                    gyn,
                    false,
                    &cols,
                    true,
                    1.0,
                    &mut acc,
                );
            }
            acc
        })
        .collect();
    let mut gw = vec![0.0; wlen];
    for p in &partials {
        for (a, b) in gw.iter_mut().zip(p) {
            *a += b;
        }
    }
    gw
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeom {
    pub batch: usize,
    pub ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub size: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn same(batch: usize, ch: usize, in_h: usize, in_w: usize, size: usize, stride: usize) -> Self {
        let (out_h, pad_top) = same_padding(in_h, size, stride);
        let (out_w, pad_left) = same_padding(in_w, size, stride);
        PoolGeom {
            batch,
            ch,
            in_h,
            in_w,
            size,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        }
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.ch, self.out_h, self.out_w]
    }
}

/// Flat source index of the maximum in every pooling window. Ties go to the
/// first maximal element in row-major window order; padding never wins.
/// Input indices covered by output position `(oy, ox)` of one plane.
fn pool_window(g: &PoolGeom, base: usize, oy: usize, ox: usize, out: &mut Vec<usize>) {
    out.clear();
    for ky in 0..g.size {
        let Some(iy) = (oy * g.stride + ky).checked_sub(g.pad_top) else {
            continue;
        };
        if iy >= g.in_h {
            continue;
        }
        for kx in 0..g.size {
            let Some(ix) = (ox * g.stride + kx).checked_sub(g.pad_left) else {
                continue;
            };
            if ix < g.in_w {
                out.push(base + iy * g.in_w + ix);
            }
        }
    }
}

fn for_each_pool_window(g: &PoolGeom, mut f: impl FnMut(&[usize])) {
    let mut win = Vec::with_capacity(g.size * g.size);
    for plane in 0..g.batch * g.ch {
        let base = plane * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                pool_window(g, base, oy, ox, &mut win);
                f(&win);
            }
        }
    }
}

pub fn max_pool_indices(x: &[f64], g: &PoolGeom) -> Vec<usize> {
    let mut idx = Vec::with_capacity(g.batch * g.ch * g.out_h * g.out_w);
    for_each_pool_window(g, |win| {
        let mut best: Option<(usize, f64)> = None;
        for &i in win {
            if best.is_none_or(|(_, v)| x[i] > v) {
                best = Some((i, x[i]));
            }
        }
        idx.push(best.expect("pooling window overlaps the input").0);
    });
    idx
}

/// Smallest gap between the largest and second-largest value of any
/// pooling window; infinite when every window holds one element. With
/// `rectified`, windows whose maximum is zero are skipped: their inputs are
/// clamped ReLU outputs and the pooled value stays zero nearby.
pub fn max_pool_gap(x: &[f64], g: &PoolGeom, rectified: bool) -> f64 {
    let mut gap = f64::INFINITY;
    for_each_pool_window(g, |win| {
        let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &i in win {
            if x[i] > a {
                b = a;
                a = x[i];
            } else if x[i] > b {
                b = x[i];
            }
        }
        if win.len() > 1 && !(rectified && a == 0.0) {
            gap = gap.min(a - b);
        }
    });
    gap
}

pub fn softmax_row(s: &[f64], p: &mut [f64]) {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (pi, &si) in p.iter_mut().zip(s) {
        *pi = (si - m).exp();
        z += *pi;
    }
    p.iter_mut().for_each(|v| *v /= z);
}

/// `log Σ exp(s_j) − s_y` with max subtraction.
pub fn softmax_ce_row(s: &[f64], y: usize) -> f64 {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = s.iter().map(|&v| (v - m).exp()).sum();
    m + z.ln() - s[y]
}

/// `(diag(p) − p pᵀ) u` for one row.
pub fn softmax_hvp_row(p: &[f64], u: &[f64], out: &mut [f64]) {
    let pu: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
    for ((o, &pi), &ui) in out.iter_mut().zip(p).zip(u) {
        *o = pi * (ui - pu);
    }
}
