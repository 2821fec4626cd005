//! Heatmap, box and segmentation losses with analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! its raw (pre-activation) inputs.

use std::f64::consts::PI;

use ndarray::Array2;

use crate::detection::head::{HeadOutput, REG_BASE};
use crate::detection::iou::iou_bev_aligned;
use crate::detection::targets::Targets;
use crate::error::{Error, Result};
use crate::geom::normalize_angle;
use crate::nn::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_hm: f64,
    pub lambda_bbox: f64,
    pub lambda_seg: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub seg_gamma: f64,
    pub n_bins: usize,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_hm: 1.0,
            lambda_bbox: 2.0,
            lambda_seg: 1.0,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            seg_gamma: 2.0,
            n_bins: 12,
            smooth_l1_beta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_hm, self.lambda_bbox, self.lambda_seg];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {lambdas:?}")));
        }
        if self.n_bins == 0 || !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config("n_bins must be ≥ 1 and smooth_l1_beta > 0".into()));
        }
        Ok(())
    }
}

/// ln(1 + eˣ) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// (p, 1 − p, ln p, ln(1 − p)) for p = sigmoid(x), each computed stably.
fn probs(x: f64) -> (f64, f64, f64, f64) {
    let p = crate::nn::sigmoid(x);
    let q = crate::nn::sigmoid(-x);
    (p, q, -softplus(-x), -softplus(x))
}

/// Positive-example focal term `−(1−p)^α ln p` and its derivative in x.
fn focal_pos(x: f64, alpha: f64) -> (f64, f64) {
    let (p, q, lp, _) = probs(x);
    let qa = q.powf(alpha);
    (-qa * lp, alpha * p * qa * lp - qa * q)
}

/// Negative-example focal term `−p^α ln(1−p)` and its derivative in x.
fn focal_neg(x: f64, alpha: f64) -> (f64, f64) {
    let (p, q, _, lq) = probs(x);
    let pa = p.powf(alpha);
    (-pa * lq, -(alpha * pa * q * lq) + pa * p)
}

/// Penalty-reduced focal loss for one heatmap column. Entries equal to 1
/// are peaks; the sum is divided by the number of peaks (at least 1).
pub fn focal_heatmap_loss(logits: &[f64], target: &[f64], alpha: f64, beta: f64) -> (f64, Vec<f64>) {
    let peaks = target.iter().filter(|&&t| t == 1.0).count().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for ((g, &x), &t) in grad.iter_mut().zip(logits).zip(target) {
        let (l, d) = if t == 1.0 {
            focal_pos(x, alpha)
        } else {
            let w = (1.0 - t).powf(beta);
            let (l, d) = focal_neg(x, alpha);
            (w * l, w * d)
        };
        loss += l;
        *g = d / peaks;
    }
    (loss / peaks, grad)
}

/// Binary focal loss averaged over entries.
pub fn seg_focal_loss(logits: &[f64], target: &[f64], gamma: f64) -> (f64, Vec<f64>) {
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for ((g, &x), &t) in grad.iter_mut().zip(logits).zip(target) {
        let (l, d) = if t >= 0.5 { focal_pos(x, gamma) } else { focal_neg(x, gamma) };
        loss += l;
        *g = d / n;
    }
    (loss / n, grad)
}

/// Summed smooth-L1 and its gradient in `pred`.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let x = p - t;
            if x.abs() < beta {
                loss += 0.5 * x * x / beta;
                x / beta
            } else {
                loss += x.abs() - 0.5 * beta;
                x.signum()
            }
        })
        .collect();
    (loss, grad)
}

pub fn bin_width(n_bins: usize) -> f64 {
    2.0 * PI / n_bins as f64
}

/// Bin `k` is centered at `k·2π/n`; the residual lies in [−w/2, w/2].
pub fn encode_heading(theta: f64, n_bins: usize) -> (usize, f64) {
    let w = bin_width(n_bins);
    let t = normalize_angle(theta);
    let k = (t / w).round().rem_euclid(n_bins as f64) as usize;
    (k, normalize_angle(t - k as f64 * w))
}

pub fn decode_heading(bin: usize, residual: f64, n_bins: usize) -> f64 {
    normalize_angle(bin as f64 * bin_width(n_bins) + residual)
}

/// Cross-entropy over bins plus smooth-L1 on the true bin's residual.
/// Returns (loss, d_logits, d_residual).
pub fn heading_bin_loss(logits: &[f64], residual: f64, theta_gt: f64, beta: f64) -> (f64, Vec<f64>, f64) {
    let (k, r_gt) = encode_heading(theta_gt, logits.len());
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let lse = m + z.ln();
    let mut d_logits: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    d_logits[k] -= 1.0;
    let (rl, rg) = smooth_l1(&[residual], &[r_gt], beta);
    (lse - logits[k] + rl, d_logits, rg[0])
}

/// `1 − IoU` of axis-aligned `[cx, cy, l, w]` rectangles, yaw ignored.
pub fn iou_loss(pred: [f64; 4], gt: [f64; 4]) -> (f64, [f64; 4]) {
    let clamp = |v: f64| v.max(1e-3);
    let p = [pred[0], pred[1], clamp(pred[2]), clamp(pred[3])];
    let (iou, g) = iou_bev_aligned(p, gt);
    let mut grad = g.map(|v| -v);
    for i in 2..4 {
        if pred[i] < 1e-3 {
            grad[i] = 0.0;
        }
    }
    (1.0 - iou, grad)
}

/// Unweighted per-term sums over classes, and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub hm: f64,
    pub bbox: f64,
    pub seg: f64,
}

/// Gradient of the total loss with respect to each head output block.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub heatmap: Matrix,
    pub seg: Matrix,
    pub regression: Matrix,
}

/// Box loss at one positive voxel: smooth-L1 on (dx, dy, dz, ln l, ln w,
/// ln h), heading bins, and the IoU surrogate.
pub fn box_loss(pred: &[f64], target: &crate::detection::targets::PositiveTarget, cfg: &LossConfig) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; pred.len()];
    let (l1, g1) = smooth_l1(&pred[..REG_BASE], &target.reg, cfg.smooth_l1_beta);
    grad[..REG_BASE].copy_from_slice(&g1);
    let bins = REG_BASE..REG_BASE + cfg.n_bins;
    let res = REG_BASE + cfg.n_bins;
    let (lh, gb, gr) = heading_bin_loss(&pred[bins.clone()], pred[res], target.yaw, cfg.smooth_l1_beta);
    grad[bins].copy_from_slice(&gb);
    grad[res] = gr;
    let (l, w) = (pred[3].exp(), pred[4].exp());
    let t = &target.reg;
    let (li, gi) = iou_loss([pred[0], pred[1], l, w], [t[0], t[1], t[3].exp(), t[4].exp()]);
    grad[0] += gi[0];
    grad[1] += gi[1];
    grad[3] += gi[2] * l;
    grad[4] += gi[3] * w;
    (l1 + lh + li, grad)
}

/// `Σ_c (λ_hm·L_hm,c + λ_bbox·L_bbox,c + λ_seg·L_seg,c)`. Box terms are
/// averaged over each class's positive voxels.
pub fn total_loss(head: &HeadOutput, targets: &Targets, cfg: &LossConfig) -> Result<(LossBreakdown, HeadGrad)> {
    if head.heatmap.dim() != targets.heatmap.dim() || head.seg.dim() != targets.seg.dim() {
        return Err(Error::Alignment(format!(
            "head {:?} vs targets {:?}",
            head.heatmap.dim(),
            targets.heatmap.dim()
        )));
    }
    let (n, c) = head.heatmap.dim();
    let mut out = LossBreakdown::default();
    let mut g_hm = Array2::zeros((n, c));
    let mut g_seg = Array2::zeros((n, c));
    let mut g_reg = Array2::zeros(head.regression.dim());
    for class in 0..c {
        let col = |m: &Matrix| m.column(class).to_vec();
        let (hm, ghm) = focal_heatmap_loss(&col(&head.heatmap), &col(&targets.heatmap), cfg.focal_alpha, cfg.focal_beta);
        let (seg, gseg) = seg_focal_loss(&col(&head.seg), &col(&targets.seg), cfg.seg_gamma);
        for r in 0..n {
            g_hm[[r, class]] = cfg.lambda_hm * ghm[r];
            g_seg[[r, class]] = cfg.lambda_seg * gseg[r];
        }
        let pos: Vec<_> = targets.positives.iter().filter(|p| p.class == class).collect();
        let mut bbox = 0.0;
        let scale = 1.0 / pos.len().max(1) as f64;
        for p in &pos {
            let pred = head.regression.row(p.row).to_vec();
            let (l, g) = box_loss(&pred, p, cfg);
            bbox += l * scale;
            for (j, gj) in g.into_iter().enumerate() {
                g_reg[[p.row, j]] += cfg.lambda_bbox * scale * gj;
            }
        }
        out.hm += hm;
        out.seg += seg;
        out.bbox += bbox;
        out.total += cfg.lambda_hm * hm + cfg.lambda_bbox * bbox + cfg.lambda_seg * seg;
    }
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {:?}", out)));
    }
    Ok((out, HeadGrad { heatmap: g_hm, seg: g_seg, regression: g_reg }))
}
