//! Per-pillar detection head: fixed neighborhood pooling followed by a
//! three-layer MLP.
//!
//! A per-pillar MLP alone cannot tell where inside an object a pillar sits,
//! so each row is augmented with the mean feature over a few fixed,
//! parameter-free BEV windows (center, ahead, behind, left, right). Missing
//! pillars count as zero and every window mean divides by its full area.

use std::collections::HashMap;

use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;

use crate::detection::loss::HeadGrad;
use crate::error::{Error, Result};
use crate::nn::{Activation, Matrix, Mlp, MlpCache, Parameters};
use crate::voxel::{BevFeatureGrid, BevKey};

/// Regression columns before the heading bins: dx, dy, dz, ln l, ln w, ln h.
pub const REG_BASE: usize = 6;

/// Heatmap logit bias at init, `−ln((1 − π)/π)` for a 0.1 foreground prior.
pub const HEATMAP_PRIOR_BIAS: f64 = -2.1972245773362196;

/// Inclusive cell-offset rectangle relative to a pillar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub x0: i32,
    pub x1: i32,
    pub y0: i32,
    pub y1: i32,
}

impl Window {
    pub fn new(x0: i32, x1: i32, y0: i32, y1: i32) -> Self {
        Self { x0, x1, y0, y1 }
    }

    pub fn area(&self) -> usize {
        ((self.x1 - self.x0 + 1).max(0) * (self.y1 - self.y0 + 1).max(0)) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextConfig {
    pub windows: Vec<Window>,
}

impl ContextConfig {
    pub fn none() -> Self {
        Self { windows: Vec::new() }
    }

    /// Center block of half-size `inner` plus four side blocks reaching out
    /// to `outer` cells.
    pub fn cross(inner: i32, outer: i32) -> Self {
        let (a, b) = (inner + 1, outer);
        Self {
            windows: vec![
                Window::new(-inner, inner, -inner, inner),
                Window::new(a, b, -inner, inner),
                Window::new(-b, -a, -inner, inner),
                Window::new(-inner, inner, a, b),
                Window::new(-inner, inner, -b, -a),
            ],
        }
    }

    pub fn expansion(&self) -> usize {
        1 + self.windows.len()
    }
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self::cross(1, 5)
    }
}

/// Neighbor lists per window in compressed-row form.
#[derive(Debug, Clone)]
pub struct Neighborhoods {
    offsets: Vec<Vec<usize>>,
    indices: Vec<Vec<usize>>,
    inv_area: Vec<f64>,
}

impl Neighborhoods {
    pub fn build(keys: &[BevKey], cfg: &ContextConfig) -> Self {
        let rows: HashMap<BevKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let mut offsets = Vec::with_capacity(cfg.windows.len());
        let mut indices = Vec::with_capacity(cfg.windows.len());
        for w in &cfg.windows {
            let mut off = Vec::with_capacity(keys.len() + 1);
            let mut idx = Vec::new();
            off.push(0);
            for k in keys {
                for dx in w.x0..=w.x1 {
                    for dy in w.y0..=w.y1 {
                        if let Some(&j) = rows.get(&k.offset(dx, dy)) {
                            idx.push(j);
                        }
                    }
                }
                off.push(idx.len());
            }
            offsets.push(off);
            indices.push(idx);
        }
        let inv_area = cfg.windows.iter().map(|w| 1.0 / w.area().max(1) as f64).collect();
        Self { offsets, indices, inv_area }
    }

    /// `[x | mean_w1(x) | … | mean_wk(x)]`.
    pub fn pool(&self, x: &Matrix) -> Matrix {
        let (n, f) = x.dim();
        let mut out = Array2::zeros((n, f * (1 + self.offsets.len())));
        out.slice_mut(s![.., ..f]).assign(x);
        for (w, (off, idx)) in self.offsets.iter().zip(&self.indices).enumerate() {
            let scale = self.inv_area[w];
            let base = f * (w + 1);
            for r in 0..n {
                let mut dst = out.slice_mut(s![r, base..base + f]);
                for &j in &idx[off[r]..off[r + 1]] {
                    dst.scaled_add(scale, &x.row(j));
                }
            }
        }
        out
    }

    pub fn pool_backward(&self, grad: &Matrix, f: usize) -> Matrix {
        let n = grad.nrows();
        let mut gx = grad.slice(s![.., ..f]).to_owned();
        for (w, (off, idx)) in self.offsets.iter().zip(&self.indices).enumerate() {
            let scale = self.inv_area[w];
            let base = f * (w + 1);
            for r in 0..n {
                let g = grad.slice(s![r, base..base + f]);
                for &j in &idx[off[r]..off[r + 1]] {
                    gx.row_mut(j).scaled_add(scale, &g);
                }
            }
        }
        gx
    }
}

/// Raw head outputs, row-aligned with `keys`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub voxel_size: f64,
    pub keys: Vec<BevKey>,
    /// N × classes heatmap logits.
    pub heatmap: Matrix,
    /// N × classes segmentation logits.
    pub seg: Matrix,
    /// N × (6 + bins + 1): dx, dy, dz, ln l, ln w, ln h, bin logits, residual.
    pub regression: Matrix,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    neighborhoods: Neighborhoods,
    mlp: MlpCache,
    in_width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead {
    pub context: ContextConfig,
    pub mlp: Mlp,
    pub num_classes: usize,
    pub n_bins: usize,
    pub z_ref: f64,
}

impl DetectionHead {
    pub fn output_dim(num_classes: usize, n_bins: usize) -> usize {
        2 * num_classes + REG_BASE + n_bins + 1
    }

    pub fn init(
        in_width: usize,
        hidden: usize,
        num_classes: usize,
        n_bins: usize,
        context: ContextConfig,
        z_ref: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dims = [in_width * context.expansion(), hidden, hidden, Self::output_dim(num_classes, n_bins)];
        let mut mlp = Mlp::init(&dims, true, Activation::Identity, rng);
        if let Some(b) = mlp.layers.last_mut().and_then(|l| l.bias.as_mut()) {
            b.slice_mut(s![..num_classes]).fill(HEATMAP_PRIOR_BIAS);
        }
        Self { context, mlp, num_classes, n_bins, z_ref }
    }

    pub fn in_width(&self) -> usize {
        self.mlp.in_dim() / self.context.expansion()
    }

    pub fn validate(&self) -> Result<()> {
        let out = Self::output_dim(self.num_classes, self.n_bins);
        if self.mlp.out_dim() != out {
            return Err(Error::Dimension { expected: out, actual: self.mlp.out_dim() });
        }
        if !self.mlp.in_dim().is_multiple_of(self.context.expansion()) {
            return Err(Error::Config("head input width is not a multiple of the context expansion".into()));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self { mlp: self.mlp.zeros_like(), context: self.context.clone(), ..*self }
    }

    pub fn forward(&self, grid: &BevFeatureGrid) -> Result<HeadOutput> {
        self.forward_cached(grid).map(|(o, _)| o)
    }

    pub fn forward_cached(&self, grid: &BevFeatureGrid) -> Result<(HeadOutput, HeadCache)> {
        let f = self.in_width();
        if grid.dim() != f {
            return Err(Error::Dimension { expected: f, actual: grid.dim() });
        }
        let neighborhoods = Neighborhoods::build(&grid.keys, &self.context);
        let pooled = neighborhoods.pool(&grid.features);
        let (raw, mlp) = self.mlp.forward_cached(&pooled)?;
        let c = self.num_classes;
        let out = HeadOutput {
            voxel_size: grid.voxel_size,
            keys: grid.keys.clone(),
            heatmap: raw.slice(s![.., ..c]).to_owned(),
            seg: raw.slice(s![.., c..2 * c]).to_owned(),
            regression: raw.slice(s![.., 2 * c..]).to_owned(),
        };
        Ok((out, HeadCache { neighborhoods, mlp, in_width: f }))
    }

    /// Accumulates MLP gradients and returns the gradient of the input grid.
    pub fn backward(&self, cache: &HeadCache, grad: &HeadGrad, grads: &mut DetectionHead) -> Matrix {
        let c = self.num_classes;
        let n = grad.heatmap.nrows();
        let mut raw = Array2::zeros((n, self.mlp.out_dim()));
        raw.slice_mut(s![.., ..c]).assign(&grad.heatmap);
        raw.slice_mut(s![.., c..2 * c]).assign(&grad.seg);
        raw.slice_mut(s![.., 2 * c..]).assign(&grad.regression);
        let g_pooled = self.mlp.backward(&cache.mlp, &raw, &mut grads.mlp);
        cache.neighborhoods.pool_backward(&g_pooled, cache.in_width)
    }
}

impl Parameters for DetectionHead {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.mlp.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.mlp.visit_mut(f);
    }
}
