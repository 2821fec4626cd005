//! Synthetic benchmark assembly: scenes → samples with priors, camera stub
//! and labels, plus evaluation helpers.

use nalgebra::Vector3;

use crate::detection::targets::box_point_count;
use crate::detection::{evaluate_ap, ApResult, EvalFrame, LabeledBox};
use crate::error::Result;
use crate::gaussian::GaussianMap;
use crate::geom::PointCloud;
use crate::surfel::{SensorOrigins, SurfelMap};
use crate::synth::{
    generate_scene, random_scene_spec, simulate_lidar_scan, synth_camera_bev, CameraConfig, LayoutParams, Scene,
    SceneSpec,
};
use crate::fusion::FusionStrategy;
use crate::trainer::{build_maps, run_inference, MapConfig, Modalities, Model, PostConfig, Sample, TrainConfig};
use crate::voxel::{FeaturePoints, GridConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub layout: LayoutParams,
    pub scene: SceneSpec,
    pub grid: GridConfig,
    pub maps: MapConfig,
    pub camera: CameraConfig,
    pub d: usize,
    /// Boxes with fewer LiDAR points are ignored in evaluation.
    pub min_points: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            layout: LayoutParams::default(),
            scene: SceneSpec { ground_density_scale: 0.3, noise_sigma: 0.02, ..SceneSpec::default() },
            grid: GridConfig { voxel_size: 0.4, range: 20.0, z_min: 0.2, z_max: 5.0, max_voxels: 250_000 },
            maps: MapConfig::default(),
            camera: CameraConfig::default(),
            d: 16,
            min_points: 5,
        }
    }
}

/// Scene seeds of the benchmark identified by `seed`: 20 training scenes,
/// 10 evaluation scenes and 3 evaluation sequences, all disjoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkSplits {
    pub train: Vec<u64>,
    pub eval: Vec<u64>,
    pub sequences: Vec<u64>,
}

impl BenchmarkSplits {
    pub fn new(seed: u64) -> Self {
        let base = seed * 1000;
        Self {
            train: (base..base + 20).collect(),
            eval: (base + 500..base + 510).collect(),
            sequences: (base + 900..base + 903).collect(),
        }
    }
}

/// Training schedule for the benchmark. Scenes are road-aligned, so the
/// random yaw augmentation is off.
pub fn benchmark_train_config(cfg: &BenchmarkConfig, strategy: FusionStrategy, seed: u64) -> TrainConfig {
    let mut t = TrainConfig { steps: 1000, lr: 0.03, seed, ..TrainConfig::default() };
    t.model.d = cfg.d;
    t.model.hidden = 48;
    t.model.grid = cfg.grid;
    t.model.strategy = strategy;
    t.augment.p_rotate = 0.0;
    t.targets.min_points = cfg.min_points;
    t
}

pub fn benchmark_scene(seed: u64, cfg: &BenchmarkConfig) -> Result<Scene> {
    generate_scene(&random_scene_spec(seed, &cfg.layout, &cfg.scene))
}

/// One scan per mapping traversal with the labels at that moment, and the
/// sensor origin of each traversal id (`100 + k`).
pub fn mapping_scans(scene: &Scene) -> (Vec<(PointCloud, Vec<LabeledBox>)>, SensorOrigins) {
    let mut origins = SensorOrigins::single(Vector3::new(0.0, 0.0, scene.spec.sensor_height));
    let scans = (0..scene.spec.traversals)
        .map(|k| {
            let t = scene.traversal_time(k);
            let origin = scene.traversal_origin(k);
            let id = 100 + k as u16;
            origins.per_traversal.insert(id, origin + Vector3::new(0.0, 0.0, scene.spec.sensor_height));
            (simulate_lidar_scan(scene, t, &origin, id), scene.boxes_at(t))
        })
        .collect();
    (scans, origins)
}

/// Priors from the scene's mapping traversals, each scan with that
/// moment's labeled boxes removed, cropped to the detection grid.
pub fn mapping_priors(scene: &Scene, cfg: &BenchmarkConfig) -> Result<(SurfelMap, GaussianMap)> {
    let (scans, origins) = mapping_scans(scene);
    let refs: Vec<(&PointCloud, Vec<_>)> =
        scans.iter().map(|(pc, b)| (pc, b.iter().map(|l| l.bbox).collect())).collect();
    let (s, g) = build_maps(&refs, &origins, &cfg.maps)?;
    Ok(crop_maps(s, g, &cfg.grid))
}

/// Drops prior elements the detection grid would discard anyway.
pub fn crop_maps(mut s: SurfelMap, mut g: GaussianMap, grid: &GridConfig) -> (SurfelMap, GaussianMap) {
    s.surfels.retain(|x| grid.contains(&x.position));
    g.gaussians.retain(|x| grid.contains(&x.mu));
    (s, g)
}

pub fn camera_points(scene: &Scene, ego: &Vector3<f64>, cfg: &BenchmarkConfig) -> FeaturePoints {
    let grid = synth_camera_bev(scene, ego, &cfg.grid, &cfg.camera, cfg.d);
    let positions = grid
        .keys
        .iter()
        .map(|k| {
            let (x, y) = k.center(cfg.grid.voxel_size);
            Vector3::new(x, y, 0.0)
        })
        .collect();
    FeaturePoints { positions, features: grid.features }
}

/// Labels inside the grid with enough LiDAR support.
pub fn visible_boxes(boxes: &[LabeledBox], pc: &PointCloud, grid: &GridConfig, min_points: usize) -> (Vec<LabeledBox>, Vec<LabeledBox>) {
    let positions: Vec<_> = pc.points.iter().map(|p| p.position).collect();
    boxes.iter().partition(|b| {
        let inside = b.bbox.center.x.abs() < grid.range && b.bbox.center.y.abs() < grid.range;
        inside && box_point_count(&b.bbox, &positions) >= min_points
    })
}

/// Frame-0 sample of scene `seed` from the origin, with mapping priors.
pub fn build_sample(seed: u64, cfg: &BenchmarkConfig) -> Result<Sample> {
    let scene = benchmark_scene(seed, cfg)?;
    let ego = Vector3::zeros();
    let lidar = simulate_lidar_scan(&scene, 0.0, &ego, 0);
    let (surfel, gaussian) = mapping_priors(&scene, cfg)?;
    let (boxes, _) = visible_boxes(&scene.frames[0], &lidar, &cfg.grid, 0);
    Ok(Sample {
        id: format!("scene-{seed}"),
        lidar,
        sensor_origin: ego + Vector3::new(0.0, 0.0, scene.spec.sensor_height),
        camera: Some(camera_points(&scene, &ego, cfg)),
        surfel: Some(surfel),
        gaussian: Some(gaussian),
        boxes,
    })
}

pub fn build_dataset(seeds: impl IntoIterator<Item = u64>, cfg: &BenchmarkConfig) -> Result<Vec<Sample>> {
    seeds.into_iter().map(|s| build_sample(s, cfg)).collect()
}

/// Scene `seed` with an evaluation sequence of `frames` frames.
pub fn sequence_scene(seed: u64, frames: usize, cfg: &BenchmarkConfig) -> Result<Scene> {
    generate_scene(&SceneSpec { frames, ..random_scene_spec(seed, &cfg.layout, &cfg.scene) })
}

/// A short drive through scene `seed`: the ego advances `ego_speed` m/s
/// along x; frames carry no priors and distinct traversal ids.
pub fn build_sequence(seed: u64, frames: usize, ego_speed: f64, cfg: &BenchmarkConfig) -> Result<Vec<Sample>> {
    let scene = sequence_scene(seed, frames, cfg)?;
    (0..frames)
        .map(|f| {
            let t = scene.frame_time(f);
            let ego = Vector3::new(ego_speed * t, 0.0, 0.0);
            let lidar = simulate_lidar_scan(&scene, t, &ego, f as u16);
            let (boxes, _) = visible_boxes(&scene.frames[f], &lidar, &cfg.grid, 0);
            Ok(Sample {
                id: format!("scene-{seed}-frame-{f}"),
                lidar,
                sensor_origin: ego + Vector3::new(0.0, 0.0, scene.spec.sensor_height),
                camera: Some(camera_points(&scene, &ego, cfg)),
                surfel: None,
                gaussian: None,
                boxes,
            })
        })
        .collect()
}

/// Pairs detections with the sample's labels; sparse boxes are ignored.
pub fn eval_frame(s: &Sample, detections: Vec<crate::detection::Detection>, cfg: &BenchmarkConfig) -> EvalFrame {
    let (gts, ignored) = visible_boxes(&s.boxes, &s.lidar, &cfg.grid, cfg.min_points);
    EvalFrame { detections, gts, ignored }
}

pub fn evaluate_model(
    model: &Model,
    samples: &[Sample],
    avail: Modalities,
    post: &PostConfig,
    cfg: &BenchmarkConfig,
    class: usize,
    iou: f64,
) -> Result<ApResult> {
    let frames = samples
        .iter()
        .map(|s| Ok(eval_frame(s, run_inference(s, model, avail, post)?, cfg)))
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate_ap(&frames, class, iou))
}
