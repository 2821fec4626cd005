//! Central finite-difference checks of the hand-written gradients: every
//! fusion mixer, each loss term, and the full per-sample detector loss.

use nalgebra::Vector3;
use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::detection::loss::{
    box_loss, focal_heatmap_loss, heading_bin_loss, iou_loss, seg_focal_loss, smooth_l1, total_loss, LossConfig,
};
use crate::detection::targets::{make_targets, TargetConfig};
use crate::detection::head::HEATMAP_PRIOR_BIAS;
use crate::detection::{DetectionHead, HeadOutput, LabeledBox};
use crate::error::{Error, Result};
use crate::fusion::{seeded_rng, FusionStrategy, Mixer};
use crate::geom::Box3D;
use crate::nn::{finite_diff_check, Matrix, Mlp, Parameters};
use crate::trainer::dataset::{build_sample, BenchmarkConfig};
use crate::trainer::model::{Model, ModelConfig};
use crate::voxel::{BevKey, GridConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn check<F: FnMut(&[f64]) -> f64>(
    name: String,
    loss: F,
    x: &[f64],
    analytic: &[f64],
    indices: Option<&[usize]>,
) -> Result<CheckResult> {
    let r = finite_diff_check(loss, x, analytic, STEP, indices)?;
    Ok(CheckResult { name, max_rel_err: r.max_rel_err, checked: r.checked })
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, sigma).expect("valid sigma");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn mlps_flat(mlps: &[&Mlp]) -> Vec<f64> {
    mlps.iter().flat_map(|m| m.to_flat()).collect()
}

fn mlps_load(mut mlps: Vec<&mut Mlp>, flat: &[f64]) {
    let mut at = 0;
    for m in mlps.iter_mut() {
        let n = m.num_params();
        m.load_flat(&flat[at..at + n]);
        at += n;
    }
}

/// Mixer parameters and its three inputs against `Σ W ⊙ fused`. Some
/// prior rows are zero to cover the default path.
pub fn fusion_check(strategy: FusionStrategy, seed: u64) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed);
    let (n, d) = (5, 4);
    let mixer = Mixer::init(strategy, d, &mut rng);
    let theta = mlps_flat(&mixer.mlps());
    let mut inputs: Vec<Vec<f64>> = (0..3).map(|_| normal_vec(&mut rng, n * d, 1.0)).collect();
    for row in [1, 3] {
        inputs[1][row * d..(row + 1) * d].fill(0.0);
    }
    inputs[2][2 * d..3 * d].fill(0.0);
    let w = Array2::from_shape_vec((n, d), normal_vec(&mut rng, n * d, 1.0)).expect("shape");

    let x: Vec<f64> = theta.iter().chain(inputs.iter().flatten()).copied().collect();
    let split = |x: &[f64]| -> (Mixer, [Matrix; 3]) {
        let mut m = mixer.clone();
        mlps_load(m.mlps_mut(), &x[..theta.len()]);
        let mats = std::array::from_fn(|k| {
            let at = theta.len() + k * n * d;
            Array2::from_shape_vec((n, d), x[at..at + n * d].to_vec()).expect("shape")
        });
        (m, mats)
    };
    let eval = |x: &[f64]| -> f64 {
        let (m, [l, s, g]) = split(x);
        let (fused, _) = m.forward_cached(&l, &s, &g).expect("aligned inputs");
        (&fused * &w).sum()
    };

    let (m, [l, s, g]) = split(&x);
    let (_, cache) = m.forward_cached(&l, &s, &g)?;
    let mut grads = m.clone();
    grads.mlps_mut().into_iter().for_each(|mlp| *mlp = mlp.zeros_like());
    let (dl, ds, dg) = m.backward(&cache, &w, &mut grads);
    let analytic: Vec<f64> =
        mlps_flat(&grads.mlps()).into_iter().chain(dl.iter().chain(ds.iter()).chain(dg.iter()).copied()).collect();
    check(format!("fusion/{strategy:?}"), eval, &x, &analytic, None)
}

/// Offsets whose magnitude stays clear of the smooth-L1 switch at `beta`.
fn offsets_off_kink(rng: &mut ChaCha8Rng, n: usize, beta: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = if rng.random_bool(0.5) {
                rng.random_range(0.1..0.9) * beta
            } else {
                rng.random_range(1.1..3.0) * beta
            };
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect()
}

/// Each loss term separately, then the total over a small head output.
pub fn loss_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = seeded_rng(seed);
    let cfg = LossConfig::default();
    let mut out = Vec::new();

    let n = 24;
    let logits = normal_vec(&mut rng, n, 2.0);
    let soft = Uniform::new(0.0, 0.99).expect("range");
    let target: Vec<f64> = (0..n).map(|i| if i % 7 == 3 { 1.0 } else { soft.sample(&mut rng) }).collect();
    let (_, g) = focal_heatmap_loss(&logits, &target, cfg.focal_alpha, cfg.focal_beta);
    out.push(check(
        "loss/heatmap_focal".into(),
        |x| focal_heatmap_loss(x, &target, cfg.focal_alpha, cfg.focal_beta).0,
        &logits,
        &g,
        None,
    )?);

    let binary: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let (_, g) = seg_focal_loss(&logits, &binary, cfg.seg_gamma);
    out.push(check("loss/seg_focal".into(), |x| seg_focal_loss(x, &binary, cfg.seg_gamma).0, &logits, &g, None)?);

    let t = normal_vec(&mut rng, 6, 1.0);
    let p: Vec<f64> = t.iter().zip(offsets_off_kink(&mut rng, 6, cfg.smooth_l1_beta)).map(|(a, b)| a + b).collect();
    let (_, g) = smooth_l1(&p, &t, cfg.smooth_l1_beta);
    out.push(check("loss/smooth_l1".into(), |x| smooth_l1(x, &t, cfg.smooth_l1_beta).0, &p, &g, None)?);

    let theta = rng.random_range(-3.1..3.1);
    let mut x = normal_vec(&mut rng, cfg.n_bins, 1.0);
    let (_, r_gt) = crate::detection::loss::encode_heading(theta, cfg.n_bins);
    x.push(r_gt + offsets_off_kink(&mut rng, 1, cfg.smooth_l1_beta)[0]);
    let (_, mut g, gr) = heading_bin_loss(&x[..cfg.n_bins], x[cfg.n_bins], theta, cfg.smooth_l1_beta);
    g.push(gr);
    out.push(check(
        "loss/heading_bins".into(),
        |x| heading_bin_loss(&x[..cfg.n_bins], x[cfg.n_bins], theta, cfg.smooth_l1_beta).0,
        &x,
        &g,
        None,
    )?);

    let gt = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 4.0, 2.0];
    let pred = [gt[0] + rng.random_range(0.2..0.6), gt[1] - rng.random_range(0.1..0.4), 3.3, 2.5];
    let (_, g) = iou_loss(pred, gt);
    out.push(check(
        "loss/iou".into(),
        |x| iou_loss([x[0], x[1], x[2], x[3]], gt).0,
        &pred,
        &g,
        None,
    )?);

    let (head, targets) = toy_head_and_targets(&mut rng)?;
    let pos = &targets.positives[0];
    let mut pred: Vec<f64> = head.regression.row(pos.row).to_vec();
    for (p, (t, o)) in pred.iter_mut().zip(pos.reg.iter().zip(offsets_off_kink(&mut rng, 6, cfg.smooth_l1_beta))) {
        *p = t + o;
    }
    let (_, g) = box_loss(&pred, pos, &cfg);
    out.push(check("loss/box".into(), |x| box_loss(x, pos, &cfg).0, &pred, &g, None)?);

    let (_, hg) = total_loss(&head, &targets, &cfg)?;
    let flat = |h: &HeadOutput| -> Vec<f64> { h.heatmap.iter().chain(h.seg.iter()).chain(h.regression.iter()).copied().collect() };
    let rebuild = |x: &[f64]| -> HeadOutput {
        let mut h = head.clone();
        let (a, b) = (h.heatmap.len(), h.seg.len());
        h.heatmap.iter_mut().zip(&x[..a]).for_each(|(d, s)| *d = *s);
        h.seg.iter_mut().zip(&x[a..a + b]).for_each(|(d, s)| *d = *s);
        h.regression.iter_mut().zip(&x[a + b..]).for_each(|(d, s)| *d = *s);
        h
    };
    let analytic: Vec<f64> = hg.heatmap.iter().chain(hg.seg.iter()).chain(hg.regression.iter()).copied().collect();
    out.push(check(
        "loss/total".into(),
        |x| total_loss(&rebuild(x), &targets, &cfg).map(|(b, _)| b.total).unwrap_or(f64::NAN),
        &flat(&head),
        &analytic,
        None,
    )?);
    Ok(out)
}

/// An 8×8 patch of pillars with one vehicle and one pedestrian.
fn toy_head_and_targets(rng: &mut ChaCha8Rng) -> Result<(HeadOutput, crate::detection::targets::Targets)> {
    let vs = 0.4;
    let keys: Vec<BevKey> = (-4..4).flat_map(|x| (-4..4).map(move |y| BevKey::new(x, y))).collect();
    let boxes = [
        LabeledBox { bbox: Box3D::new(Vector3::new(0.1, -0.05, 0.8), Vector3::new(2.4, 1.2, 1.5), rng.random_range(-3.0..3.0))?, class: 0 },
        LabeledBox { bbox: Box3D::new(Vector3::new(-1.0, 1.0, 0.9), Vector3::new(0.6, 0.6, 1.7), 0.3)?, class: 1 },
    ];
    let points: Vec<Vector3<f64>> = boxes
        .iter()
        .flat_map(|b| {
            let c = b.bbox.center;
            (0..8).map(move |i| c + Vector3::new(0.02 * i as f64, -0.01 * i as f64, 0.03 * i as f64 - 0.1))
        })
        .collect();
    let cfg = TargetConfig { num_classes: 2, ..TargetConfig::default() };
    let targets = make_targets(&boxes, &keys, vs, &points, &cfg)?;
    if targets.positives.len() != 2 {
        return Err(Error::Input(format!("toy scene produced {} positives", targets.positives.len())));
    }
    let n = keys.len();
    let reg_w = DetectionHead::output_dim(2, cfg.n_bins) - 4;
    let m = |rng: &mut ChaCha8Rng, c: usize| Array2::from_shape_vec((n, c), normal_vec(rng, n * c, 1.0)).expect("shape");
    let head = HeadOutput {
        voxel_size: vs,
        keys,
        heatmap: m(rng, 2) + HEATMAP_PRIOR_BIAS,
        seg: m(rng, 2),
        regression: m(rng, reg_w) * 0.5,
    };
    Ok((head, targets))
}

/// Full sample loss of a small detector on a cropped benchmark scene, for
/// every prior-dropout combination. Checks a few coordinates per tensor.
pub fn sample_loss_check(strategy: FusionStrategy, seed: u64) -> Result<Vec<CheckResult>> {
    let mut bc = BenchmarkConfig::default();
    bc.d = 4;
    bc.grid = GridConfig { range: 8.0, ..bc.grid };
    let sample = build_sample(1 + seed % 1000, &bc)?;
    let mcfg = ModelConfig { d: 4, hidden: 6, strategy, grid: bc.grid, ..ModelConfig::default() };
    let model = Model::init(&mcfg, seed);
    let tcfg = TargetConfig { num_classes: 2, ..TargetConfig::default() };
    let lcfg = LossConfig::default();

    let mut rng = seeded_rng(seed ^ 0x5eed);
    let mut indices = Vec::new();
    let mut offset = 0;
    model.visit(&mut |t| {
        let k = t.len().min(2);
        indices.extend(sample_indices(&mut rng, t.len(), k).into_iter().map(|i| offset + i));
        offset += t.len();
    });
    let x = model.to_flat();
    let mut out = Vec::new();
    for dropped in [(false, false), (true, false), (false, true), (true, true)] {
        let (_, grads) = model.loss(&sample, dropped, &tcfg, &lcfg, true)?;
        let analytic = grads.expect("gradient requested").to_flat();
        let eval = |p: &[f64]| {
            let mut m = model.clone();
            m.load_flat(p);
            m.loss(&sample, dropped, &tcfg, &lcfg, false).map(|(b, _)| b.total).unwrap_or(f64::NAN)
        };
        out.push(check(format!("sample/{strategy:?}/drop{dropped:?}"), eval, &x, &analytic, Some(&indices))?);
    }
    Ok(out)
}

/// `configs` rounds of fusion and loss checks with distinct seeds, plus the
/// sample-level check once per fusion strategy.
pub fn run_suite(configs: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let strategies = [FusionStrategy::Gated, FusionStrategy::Concat, FusionStrategy::Sum, FusionStrategy::Average];
    let mut out = Vec::new();
    for k in 0..configs as u64 {
        let s = seed.wrapping_mul(1000).wrapping_add(k);
        out.push(fusion_check(strategies[k as usize % 4], s)?);
        out.extend(loss_checks(s)?);
    }
    for (k, st) in strategies.into_iter().enumerate() {
        out.extend(sample_loss_check(st, seed.wrapping_add(k as u64))?);
    }
    Ok(out)
}
