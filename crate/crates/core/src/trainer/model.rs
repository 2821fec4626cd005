//! The full detector: per-modality encoders, fusion, camera concatenation
//! and the detection head, with a hand-written backward pass.

use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;

use crate::detection::head::HeadCache;
use crate::detection::loss::HeadGrad;
use crate::detection::{total_loss, ContextConfig, DetectionHead, HeadOutput, LossBreakdown, LossConfig, TargetConfig};
use crate::detection::targets::make_targets;
use crate::error::{Error, Result};
use crate::fusion::{
    aggregate_modality_backward, aggregate_modality_cached, concat_camera, nonzero_rows, AggregateCache,
    FusionParams, FusionStrategy, MixCache, ModalityBundle, LIDAR_FEATURE_DIM,
};
use crate::gaussian::{gaussian_to_feature_points, GAUSSIAN_FEATURE_DIM};
use crate::geom::PointCloud;
use crate::nn::{Matrix, Parameters};
use crate::surfel::{surfel_to_feature_points, SURFEL_FEATURE_DIM};
use crate::trainer::Sample;
use crate::voxel::{dynamic_voxelize, segment_reduce, BevFeatureGrid, BevKey, FeaturePoints, GridConfig, ReduceMode};

/// Which inputs a forward pass may use. LiDAR is mandatory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modalities {
    pub lidar: bool,
    pub camera: bool,
    pub surfel: bool,
    pub gaussian: bool,
}

impl Modalities {
    pub fn all() -> Self {
        Self { lidar: true, camera: true, surfel: true, gaussian: true }
    }

    pub fn sensor_only() -> Self {
        Self { lidar: true, camera: true, surfel: false, gaussian: false }
    }

    pub fn with_priors(surfel: bool, gaussian: bool) -> Self {
        Self { surfel, gaussian, ..Self::all() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub hidden: usize,
    pub strategy: FusionStrategy,
    pub num_classes: usize,
    pub n_bins: usize,
    pub context: ContextConfig,
    pub z_ref: f64,
    pub use_camera: bool,
    pub grid: GridConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            hidden: 64,
            strategy: FusionStrategy::Gated,
            num_classes: 2,
            n_bins: 12,
            context: ContextConfig::default(),
            z_ref: 0.0,
            use_camera: true,
            grid: GridConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub fusion: FusionParams,
    pub head: DetectionHead,
    pub grid: GridConfig,
    pub use_camera: bool,
}

/// LiDAR pseudo-points `[x, y, z, intensity]`.
pub fn lidar_feature_points(pc: &PointCloud) -> FeaturePoints {
    let features = Array2::from_shape_fn((pc.len(), LIDAR_FEATURE_DIM), |(i, j)| {
        let p = &pc.points[i];
        if j < 3 {
            p.position[j]
        } else {
            p.intensity
        }
    });
    FeaturePoints { positions: pc.points.iter().map(|p| p.position).collect(), features }
}

/// Pillar mean of camera pseudo-points; the camera branch has no learned
/// projection and ignores height limits.
pub fn camera_grid(points: &FeaturePoints, grid: &GridConfig) -> Result<BevFeatureGrid> {
    let cfg = GridConfig { z_min: f64::NEG_INFINITY, z_max: f64::INFINITY, ..*grid };
    let vox = dynamic_voxelize(&points.positions, &cfg)?;
    let rows = points.features.select(ndarray::Axis(0), &vox.point_indices);
    let features = segment_reduce(&rows, &vox.segment_ids, vox.num_segments(), ReduceMode::Mean)?;
    BevFeatureGrid::new(grid.voxel_size, vox.unique_keys, features)
}

/// Encoder state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    lidar: AggregateCache,
    surfel: Option<AggregateCache>,
    gaussian: Option<AggregateCache>,
}

/// Fusion and head state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FuseCache {
    d: usize,
    fused_keys_len: usize,
    pos_lidar: Vec<usize>,
    pos_surfel: Vec<(usize, usize)>,
    pos_gaussian: Vec<(usize, usize)>,
    pos_fused_in_final: Vec<usize>,
    mix: MixCache,
    head: HeadCache,
    surfel_rows: usize,
    gaussian_rows: usize,
}

/// Gradients with respect to the bundle's prior and LiDAR grids.
#[derive(Debug, Clone)]
pub struct BundleGrad {
    pub lidar: Matrix,
    pub surfel: Matrix,
    pub gaussian: Matrix,
}

/// Places `rows` of `src` at `positions` of a zero `n × d` matrix.
fn scatter(src: &Matrix, pairs: &[(usize, usize)], n: usize, d: usize) -> Matrix {
    let mut out = Array2::zeros((n, d));
    for &(r, p) in pairs {
        out.row_mut(p).assign(&src.row(r));
    }
    out
}

impl Model {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng: ChaCha8Rng = crate::fusion::seeded_rng(seed);
        let fusion = FusionParams::init(
            cfg.strategy,
            cfg.d,
            [LIDAR_FEATURE_DIM, SURFEL_FEATURE_DIM, GAUSSIAN_FEATURE_DIM],
            &mut rng,
        );
        let head = DetectionHead::init(2 * cfg.d, cfg.hidden, cfg.num_classes, cfg.n_bins, cfg.context.clone(), cfg.z_ref, &mut rng);
        Self { fusion, head, grid: cfg.grid, use_camera: cfg.use_camera }
    }

    pub fn d(&self) -> usize {
        self.fusion.d()
    }

    /// The configuration that rebuilds this architecture.
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d(),
            hidden: self.head.mlp.layers.first().map_or(0, |l| l.out_dim()),
            strategy: self.fusion.mixer.strategy(),
            num_classes: self.head.num_classes,
            n_bins: self.head.n_bins,
            context: self.head.context.clone(),
            z_ref: self.head.z_ref,
            use_camera: self.use_camera,
            grid: self.grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.head.validate()?;
        self.grid.validate()?;
        if self.head.in_width() != 2 * self.d() {
            return Err(Error::Dimension { expected: 2 * self.d(), actual: self.head.in_width() });
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self { fusion: self.fusion.zeros_like(), head: self.head.zeros_like(), ..self.clone() }
    }

    /// Aggregates every available modality into pillar grids.
    pub fn encode(&self, s: &Sample, avail: Modalities) -> Result<(ModalityBundle, EncodeCache)> {
        if !avail.lidar {
            return Err(Error::Input("LiDAR input is required".into()));
        }
        let (lidar, lc) = aggregate_modality_cached(&lidar_feature_points(&s.lidar), &self.grid, &self.fusion.proj_lidar)?;
        let (surfel, sc) = match (&s.surfel, avail.surfel) {
            (Some(m), true) => {
                let (g, c) = aggregate_modality_cached(&surfel_to_feature_points(m), &self.grid, &self.fusion.proj_surfel)?;
                (Some(g), Some(c))
            }
            _ => (None, None),
        };
        let (gaussian, gc) = match (&s.gaussian, avail.gaussian) {
            (Some(m), true) => {
                let pts = gaussian_to_feature_points(m)?;
                let (g, c) = aggregate_modality_cached(&pts, &self.grid, &self.fusion.proj_gaussian)?;
                (Some(g), Some(c))
            }
            _ => (None, None),
        };
        let camera = match (&s.camera, avail.camera && self.use_camera) {
            (Some(c), true) => {
                if c.dim() != self.d() {
                    return Err(Error::Dimension { expected: self.d(), actual: c.dim() });
                }
                Some(camera_grid(c, &self.grid)?)
            }
            _ => None,
        };
        Ok((ModalityBundle { lidar, surfel, gaussian, camera }, EncodeCache { lidar: lc, surfel: sc, gaussian: gc }))
    }

    /// Fuses a bundle and runs the head. All-zero prior rows are treated as
    /// absent, so a zeroed prior and a missing prior give identical results.
    pub fn fuse_and_head(&self, b: &ModalityBundle) -> Result<(HeadOutput, FuseCache)> {
        let d = self.d();
        let vs = self.grid.voxel_size;
        let live = |g: &Option<BevFeatureGrid>| -> Vec<(usize, BevKey)> {
            g.as_ref().map_or(Vec::new(), |g| nonzero_rows(&g.features).into_iter().map(|r| (r, g.keys[r])).collect())
        };
        let s_live = live(&b.surfel);
        let g_live = live(&b.gaussian);
        let mut keys: Vec<BevKey> = b.lidar.keys.clone();
        keys.extend(s_live.iter().map(|(_, k)| *k));
        keys.extend(g_live.iter().map(|(_, k)| *k));
        keys.sort_unstable();
        keys.dedup();
        let pos = |k: &BevKey| keys.binary_search(k).expect("key in union");
        let n = keys.len();
        let pos_lidar: Vec<usize> = b.lidar.keys.iter().map(pos).collect();
        let pos_surfel: Vec<(usize, usize)> = s_live.iter().map(|(r, k)| (*r, pos(k))).collect();
        let pos_gaussian: Vec<(usize, usize)> = g_live.iter().map(|(r, k)| (*r, pos(k))).collect();
        let lidar_pairs: Vec<(usize, usize)> = pos_lidar.iter().copied().enumerate().collect();
        let lm = scatter(&b.lidar.features, &lidar_pairs, n, d);
        let sm = b.surfel.as_ref().map_or_else(|| Array2::zeros((n, d)), |g| scatter(&g.features, &pos_surfel, n, d));
        let gm = b.gaussian.as_ref().map_or_else(|| Array2::zeros((n, d)), |g| scatter(&g.features, &pos_gaussian, n, d));
        let (fused, mix) = self.fusion.mixer.forward_cached(&lm, &sm, &gm)?;
        let fused = BevFeatureGrid::new(vs, keys, fused)?;
        let final_grid = concat_camera(&fused, b.camera.as_ref())?;
        let pos_fused_in_final = fused.keys.iter().map(|k| final_grid.keys.binary_search(k).expect("fused key in final")).collect();
        let (out, head) = self.head.forward_cached(&final_grid)?;
        Ok((
            out,
            FuseCache {
                d,
                fused_keys_len: n,
                pos_lidar,
                pos_surfel,
                pos_gaussian,
                pos_fused_in_final,
                mix,
                head,
                surfel_rows: b.surfel.as_ref().map_or(0, |g| g.len()),
                gaussian_rows: b.gaussian.as_ref().map_or(0, |g| g.len()),
            },
        ))
    }

    pub fn fuse_and_head_backward(&self, cache: &FuseCache, grad: &HeadGrad, grads: &mut Model) -> BundleGrad {
        let d = cache.d;
        let g_final = self.head.backward(&cache.head, grad, &mut grads.head);
        let mut g_fused = Array2::zeros((cache.fused_keys_len, d));
        for (i, &p) in cache.pos_fused_in_final.iter().enumerate() {
            g_fused.row_mut(i).assign(&g_final.slice(s![p, d..]));
        }
        let (gl, gs, gg) = self.fusion.mixer.backward(&cache.mix, &g_fused, &mut grads.fusion.mixer);
        let mut lidar = Array2::zeros((cache.pos_lidar.len(), d));
        for (r, &p) in cache.pos_lidar.iter().enumerate() {
            lidar.row_mut(r).assign(&gl.row(p));
        }
        let gather = |src: &Matrix, pairs: &[(usize, usize)], rows: usize| {
            let mut out = Array2::zeros((rows, d));
            for &(r, p) in pairs {
                out.row_mut(r).assign(&src.row(p));
            }
            out
        };
        BundleGrad {
            lidar,
            surfel: gather(&gs, &cache.pos_surfel, cache.surfel_rows),
            gaussian: gather(&gg, &cache.pos_gaussian, cache.gaussian_rows),
        }
    }

    pub fn encode_backward(&self, cache: &EncodeCache, grad: &BundleGrad, dropped: (bool, bool), grads: &mut Model) -> Result<()> {
        aggregate_modality_backward(&self.fusion.proj_lidar, &cache.lidar, &grad.lidar, &mut grads.fusion.proj_lidar)?;
        if let (Some(c), false) = (&cache.surfel, dropped.0) {
            aggregate_modality_backward(&self.fusion.proj_surfel, c, &grad.surfel, &mut grads.fusion.proj_surfel)?;
        }
        if let (Some(c), false) = (&cache.gaussian, dropped.1) {
            aggregate_modality_backward(&self.fusion.proj_gaussian, c, &grad.gaussian, &mut grads.fusion.proj_gaussian)?;
        }
        Ok(())
    }

    /// Head outputs for a sample.
    pub fn predict(&self, s: &Sample, avail: Modalities) -> Result<HeadOutput> {
        let (bundle, _) = self.encode(s, avail)?;
        self.fuse_and_head(&bundle).map(|(o, _)| o)
    }

    /// Loss of one sample with priors zeroed per `dropped`, and optionally
    /// the parameter gradient.
    pub fn loss(
        &self,
        s: &Sample,
        dropped: (bool, bool),
        targets: &TargetConfig,
        loss_cfg: &LossConfig,
        with_grad: bool,
    ) -> Result<(LossBreakdown, Option<Model>)> {
        let (mut bundle, enc) = self.encode(s, Modalities::all())?;
        if dropped.0 {
            bundle.surfel = bundle.surfel.map(|g| g.zeroed());
        }
        if dropped.1 {
            bundle.gaussian = bundle.gaussian.map(|g| g.zeroed());
        }
        let (out, cache) = self.fuse_and_head(&bundle)?;
        let positions: Vec<_> = s.lidar.points.iter().map(|p| p.position).collect();
        let t = make_targets(&s.boxes, &out.keys, self.grid.voxel_size, &positions, targets)?;
        let (breakdown, head_grad) = total_loss(&out, &t, loss_cfg)?;
        if !with_grad {
            return Ok((breakdown, None));
        }
        let mut grads = self.zeros_like();
        let bg = self.fuse_and_head_backward(&cache, &head_grad, &mut grads);
        self.encode_backward(&enc, &bg, dropped, &mut grads)?;
        Ok((breakdown, Some(grads)))
    }
}

impl Parameters for Model {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.fusion.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.fusion.visit_mut(f);
        self.head.visit_mut(f);
    }
}

