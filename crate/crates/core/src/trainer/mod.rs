//! Training and inference orchestration.

pub mod augment;
pub mod dataset;
pub mod model;

use std::io::Write;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detection::decode::postprocess;
use crate::detection::{Detection, LabeledBox, LossConfig, TargetConfig};
use crate::error::{Error, Result};
use crate::gaussian::{init_gaussians_from_lidar, GaussianConfig, GaussianMap};
use crate::geom::PointCloud;
use crate::nn::{cosine_lr, Parameters, Sgd};
use crate::surfel::{build_surfels, remove_dynamic_points, SensorOrigins, SurfelConfig, SurfelMap};
use crate::voxel::FeaturePoints;

pub use augment::{augment_sample, AugmentConfig, AugmentTransform};
pub use model::{Model, ModelConfig, Modalities};

/// One training or evaluation example, all in a single vehicle frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub lidar: PointCloud,
    pub sensor_origin: Vector3<f64>,
    /// Camera BEV stub as pillar-center pseudo-points of width `d`.
    pub camera: Option<FeaturePoints>,
    pub surfel: Option<SurfelMap>,
    pub gaussian: Option<GaussianMap>,
    pub boxes: Vec<LabeledBox>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for PostConfig {
    fn default() -> Self {
        Self { score_threshold: 0.1, nms_iou: 0.1, max_detections: 200 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub p_drop_surfel: f64,
    pub p_drop_gaussian: f64,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub targets: TargetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.01,
            momentum: 0.9,
            grad_clip: 5.0,
            seed: 0,
            model: ModelConfig::default(),
            p_drop_surfel: 0.3,
            p_drop_gaussian: 0.3,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            targets: TargetConfig { num_classes: 2, ..Default::default() },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.p_drop_surfel,
            self.p_drop_gaussian,
            self.augment.p_rotate,
            self.augment.p_flip,
            self.augment.p_point_drop,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("probabilities must lie in [0, 1], got {probs:?}")));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be ≥ 1".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr must be ≥ 0 and momentum in [0, 1)".into()));
        }
        if self.targets.num_classes != self.model.num_classes || self.targets.n_bins != self.model.n_bins {
            return Err(Error::Config("target and model class/bin counts differ".into()));
        }
        if self.loss.n_bins != self.model.n_bins {
            return Err(Error::Config("loss and model bin counts differ".into()));
        }
        self.loss.validate()?;
        self.model.grid.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub hm: f64,
    pub bbox: f64,
    pub seg: f64,
    pub sample: usize,
    pub surfel_dropped: bool,
    pub gaussian_dropped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LossRecord>,
}

/// `step,total,hm,bbox,seg` with full-precision values.
pub fn write_loss_csv<W: Write>(mut w: W, log: &[LossRecord]) -> Result<()> {
    writeln!(w, "step,total,hm,bbox,seg")?;
    for r in log {
        writeln!(w, "{},{:e},{:e},{:e},{:e}", r.step, r.total, r.hm, r.bbox, r.seg)?;
    }
    Ok(())
}

/// Mix-trained SGD over `dataset`: each step draws the next sample of a
/// per-epoch shuffle, augments it, drops each prior independently, and takes
/// one momentum step on a cosine schedule.
pub fn train_toy(dataset: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(Model::init(&cfg.model, cfg.seed), dataset, cfg)
}

pub fn train_from(mut model: Model, dataset: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_0c0d_e5ee_d000);
    let mut params = model.to_flat();
    let mut opt = Sgd::new(params.len(), cfg.momentum);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled above");
        let (sample, _, _) = augment_sample(&dataset[idx], &mut rng, &cfg.augment);
        let dropped = (rng.random_bool(cfg.p_drop_surfel), rng.random_bool(cfg.p_drop_gaussian));
        let (loss, grads) = model
            .loss(&sample, dropped, &cfg.targets, &cfg.loss, true)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("step {step}, sample {}: {m}", dataset[idx].id)),
                other => other,
            })?;
        let mut g = grads.expect("requested").to_flat();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at step {step}, sample {}", dataset[idx].id)));
        }
        if cfg.grad_clip > 0.0 {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let k = cfg.grad_clip / norm;
                g.iter_mut().for_each(|v| *v *= k);
            }
        }
        opt.step(&mut params, &g, cosine_lr(cfg.lr, step, cfg.steps))?;
        model.load_flat(&params);
        log.push(LossRecord {
            step,
            total: loss.total,
            hm: loss.hm,
            bbox: loss.bbox,
            seg: loss.seg,
            sample: idx,
            surfel_dropped: dropped.0,
            gaussian_dropped: dropped.1,
        });
    }
    Ok(TrainOutcome { model, log })
}

/// Detections for one sample using only the `avail` modalities.
pub fn run_inference(s: &Sample, model: &Model, avail: Modalities, post: &PostConfig) -> Result<Vec<Detection>> {
    let out = model.predict(s, avail)?;
    Ok(postprocess(&out, model.head.z_ref, post.score_threshold, post.nms_iou, post.max_detections))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapConfig {
    pub surfel: SurfelConfig,
    pub gaussian: GaussianConfig,
    /// Dilation applied to boxes when removing dynamic points.
    pub box_margin: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            surfel: SurfelConfig { voxel_size: 0.25, min_support: 3 },
            gaussian: GaussianConfig::default(),
            box_margin: 0.1,
        }
    }
}

/// Builds both priors from `clouds`, each with its own boxes removed.
pub fn build_maps(
    clouds: &[(&PointCloud, Vec<crate::geom::Box3D>)],
    origins: &SensorOrigins,
    cfg: &MapConfig,
) -> Result<(SurfelMap, GaussianMap)> {
    let mut merged = PointCloud::default();
    for (pc, boxes) in clouds {
        merged.extend(&remove_dynamic_points(pc, boxes, cfg.box_margin));
    }
    let (surfels, _) = build_surfels(&merged, &cfg.surfel, origins)?;
    let gaussians = init_gaussians_from_lidar(&merged, &cfg.gaussian)?;
    Ok((surfels, gaussians))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoPassOutput {
    pub pass1: Vec<Vec<Detection>>,
    pub pass2: Vec<Vec<Detection>>,
    pub surfel: SurfelMap,
    pub gaussian: GaussianMap,
}

/// How pass-1 detections become dynamic-object masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    /// Detections below this score do not mask anything.
    pub min_score: f64,
    /// Extra margin around predicted boxes, covering localization error.
    pub margin: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { min_score: 0.3, margin: 0.3 }
    }
}

/// Map-free pass, then priors built from the accumulated sequence with every
/// pass-1 box (pooled over frames) masked out, then a second pass with priors.
pub fn two_pass_inference(
    sequence: &[Sample],
    model: &Model,
    post: &PostConfig,
    maps: &MapConfig,
    mask: &MaskConfig,
) -> Result<TwoPassOutput> {
    let pass1 = sequence
        .iter()
        .map(|s| run_inference(s, model, Modalities::sensor_only(), post))
        .collect::<Result<Vec<_>>>()?;
    let mut origins = SensorOrigins::single(sequence.first().map_or(Vector3::zeros(), |s| s.sensor_origin));
    for s in sequence {
        for p in &s.lidar.points {
            origins.per_traversal.entry(p.traversal_id).or_insert(s.sensor_origin);
        }
    }
    let pooled: Vec<crate::geom::Box3D> =
        pass1.iter().flatten().filter(|d| d.score >= mask.min_score).map(|d| d.bbox).collect();
    let clouds: Vec<(&PointCloud, Vec<crate::geom::Box3D>)> =
        sequence.iter().map(|s| (&s.lidar, pooled.clone())).collect();
    let maps = MapConfig { box_margin: mask.margin, ..maps.clone() };
    let (surfel, gaussian) = build_maps(&clouds, &origins, &maps)?;
    let pass2 = sequence
        .iter()
        .map(|s| {
            let with_maps = Sample { surfel: Some(surfel.clone()), gaussian: Some(gaussian.clone()), ..s.clone() };
            run_inference(&with_maps, model, Modalities::all(), post)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TwoPassOutput { pass1, pass2, surfel, gaussian })
}
