//! Per-pillar modality aggregation and gated residual fusion.
//!
//! Each modality's pseudo-points are projected to a shared embedding width
//! `d` and averaged per pillar. The gated mixer then modulates the surfel
//! and Gaussian features by gates computed from the LiDAR (and intermediate)
//! features:
//!
//! ```text
//! a_s   = Swish(σ_in(L))    ⊙ σ_surfel(S)
//! inter = φ_surfel(a_s)     + L
//! a_g   = Swish(σ_inter(inter)) ⊙ σ_gaussian(G)
//! fused = φ_gaussian(a_g)   + inter
//! ```
//!
//! The prior-path maps (σ_surfel, σ_gaussian, φ_surfel, φ_gaussian) are
//! bias-free with zero-preserving activations, so zero prior rows yield
//! `fused == L` bit for bit, whatever the weights.

use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{swish, swish_grad, Activation, Matrix, Mlp, MlpCache, Parameters};
use crate::voxel::{
    dynamic_voxelize, segment_mean_backward, segment_reduce, union_keys, BevFeatureGrid, BevKey, FeaturePoints,
    GridConfig, ReduceMode,
};

/// Raw LiDAR point feature: x, y, z, intensity.
pub const LIDAR_FEATURE_DIM: usize = 4;

/// Replaces the leading (x, y) columns with offsets from the owning pillar's
/// center, in voxel units. Absolute BEV position is carried by the key.
pub fn pillar_relative_inputs(points: &FeaturePoints, indices: &[usize], cfg: &GridConfig) -> Matrix {
    let mut x = points.features.select(Axis(0), indices);
    for (mut row, &i) in x.rows_mut().into_iter().zip(indices) {
        let p = &points.positions[i];
        let (cx, cy) = cfg.key_of(p).center(cfg.voxel_size);
        row[0] = (p.x - cx) / cfg.voxel_size;
        row[1] = (p.y - cy) / cfg.voxel_size;
    }
    x
}

/// State kept by [`aggregate_modality_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct AggregateCache {
    segment_ids: Vec<usize>,
    mlp: MlpCache,
}

/// Projects each point's raw feature to `d`, voxelizes, and averages per pillar.
pub fn aggregate_modality(points: &FeaturePoints, cfg: &GridConfig, projection: &Mlp) -> Result<BevFeatureGrid> {
    aggregate_modality_cached(points, cfg, projection).map(|(g, _)| g)
}

pub fn aggregate_modality_cached(
    points: &FeaturePoints,
    cfg: &GridConfig,
    projection: &Mlp,
) -> Result<(BevFeatureGrid, AggregateCache)> {
    if points.dim() != projection.in_dim() {
        return Err(Error::Dimension { expected: projection.in_dim(), actual: points.dim() });
    }
    let vox = dynamic_voxelize(&points.positions, cfg)?;
    let inputs = pillar_relative_inputs(points, &vox.point_indices, cfg);
    let (projected, mlp) = projection.forward_cached(&inputs)?;
    let features = segment_reduce(&projected, &vox.segment_ids, vox.num_segments(), ReduceMode::Mean)?;
    let grid = BevFeatureGrid::new(cfg.voxel_size, vox.unique_keys, features)?;
    Ok((grid, AggregateCache { segment_ids: vox.segment_ids, mlp }))
}

/// Accumulates projection gradients from the gradient of the pillar grid.
pub fn aggregate_modality_backward(
    projection: &Mlp,
    cache: &AggregateCache,
    grad_grid: &Matrix,
    grads: &mut Mlp,
) -> Result<()> {
    let grad_points = segment_mean_backward(grad_grid, &cache.segment_ids)?;
    projection.backward(&cache.mlp, &grad_points, grads);
    Ok(())
}

/// The six gate and transform maps of the gated mixer, each `d → d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedParams {
    pub sigma_in: Mlp,
    pub sigma_surfel: Mlp,
    pub sigma_inter: Mlp,
    pub sigma_gaussian: Mlp,
    pub phi_surfel: Mlp,
    pub phi_gaussian: Mlp,
}

/// Two-layer `d → d → d` stack: Swish hidden layer, linear output.
fn point_mlp(d: usize, bias: bool, rng: &mut ChaCha8Rng) -> Mlp {
    Mlp::init(&[d, d, d], bias, Activation::Identity, rng)
}

impl GatedParams {
    pub fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            sigma_in: point_mlp(d, true, rng),
            sigma_surfel: point_mlp(d, false, rng),
            sigma_inter: point_mlp(d, true, rng),
            sigma_gaussian: point_mlp(d, false, rng),
            phi_surfel: point_mlp(d, false, rng),
            phi_gaussian: point_mlp(d, false, rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prior_paths = [&self.sigma_surfel, &self.sigma_gaussian, &self.phi_surfel, &self.phi_gaussian];
        if prior_paths.iter().any(|m| !m.is_zero_preserving()) {
            return Err(Error::Config("prior-path maps must be bias-free".into()));
        }
        let d = self.sigma_in.in_dim();
        let all = [&self.sigma_in, &self.sigma_inter];
        for m in all.iter().chain(prior_paths.iter()) {
            if m.in_dim() != d || m.out_dim() != d {
                return Err(Error::Dimension { expected: d, actual: m.out_dim() });
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            sigma_in: self.sigma_in.zeros_like(),
            sigma_surfel: self.sigma_surfel.zeros_like(),
            sigma_inter: self.sigma_inter.zeros_like(),
            sigma_gaussian: self.sigma_gaussian.zeros_like(),
            phi_surfel: self.phi_surfel.zeros_like(),
            phi_gaussian: self.phi_gaussian.zeros_like(),
        }
    }

    fn mlps(&self) -> [&Mlp; 6] {
        [&self.sigma_in, &self.sigma_surfel, &self.sigma_inter, &self.sigma_gaussian, &self.phi_surfel, &self.phi_gaussian]
    }

    fn mlps_mut(&mut self) -> [&mut Mlp; 6] {
        [
            &mut self.sigma_in,
            &mut self.sigma_surfel,
            &mut self.sigma_inter,
            &mut self.sigma_gaussian,
            &mut self.phi_surfel,
            &mut self.phi_gaussian,
        ]
    }
}

impl Parameters for GatedParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.mlps().into_iter().for_each(|m| m.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.mlps_mut().into_iter().for_each(|m| m.visit_mut(f));
    }
}

#[derive(Debug, Clone)]
pub struct GatedCache {
    s_in: Matrix,
    s_surfel: Matrix,
    s_inter: Matrix,
    s_gaussian: Matrix,
    c_in: MlpCache,
    c_surfel: MlpCache,
    c_phi_surfel: MlpCache,
    c_inter: MlpCache,
    c_gaussian: MlpCache,
    c_phi_gaussian: MlpCache,
}

fn check_rows(lidar: &Matrix, others: &[&Matrix]) -> Result<()> {
    for m in others {
        if m.dim() != lidar.dim() {
            return Err(Error::Alignment(format!("shape {:?} vs lidar {:?}", m.dim(), lidar.dim())));
        }
    }
    Ok(())
}

/// Gated fusion over aligned row-per-pillar matrices.
pub fn gated_fuse(lidar: &Matrix, surfel: &Matrix, gaussian: &Matrix, p: &GatedParams) -> Result<Matrix> {
    gated_fuse_cached(lidar, surfel, gaussian, p).map(|(f, _)| f)
}

pub fn gated_fuse_cached(
    lidar: &Matrix,
    surfel: &Matrix,
    gaussian: &Matrix,
    p: &GatedParams,
) -> Result<(Matrix, GatedCache)> {
    check_rows(lidar, &[surfel, gaussian])?;
    let (s_in, c_in) = p.sigma_in.forward_cached(lidar)?;
    let (s_surfel, c_surfel) = p.sigma_surfel.forward_cached(surfel)?;
    let alpha_surfel = s_in.mapv(swish) * &s_surfel;
    let (contrib_surfel, c_phi_surfel) = p.phi_surfel.forward_cached(&alpha_surfel)?;
    let inter = contrib_surfel + lidar;

    let (s_inter, c_inter) = p.sigma_inter.forward_cached(&inter)?;
    let (s_gaussian, c_gaussian) = p.sigma_gaussian.forward_cached(gaussian)?;
    let alpha_gaussian = s_inter.mapv(swish) * &s_gaussian;
    let (contrib_gaussian, c_phi_gaussian) = p.phi_gaussian.forward_cached(&alpha_gaussian)?;
    let fused = contrib_gaussian + &inter;

    Ok((
        fused,
        GatedCache { s_in, s_surfel, s_inter, s_gaussian, c_in, c_surfel, c_phi_surfel, c_inter, c_gaussian, c_phi_gaussian },
    ))
}

/// Input gradients `(d_lidar, d_surfel, d_gaussian)`; parameter gradients are
/// accumulated into `grads`.
pub fn gated_fuse_backward(
    p: &GatedParams,
    cache: &GatedCache,
    grad_fused: &Matrix,
    grads: &mut GatedParams,
) -> (Matrix, Matrix, Matrix) {
    let d_alpha_g = p.phi_gaussian.backward(&cache.c_phi_gaussian, grad_fused, &mut grads.phi_gaussian);
    let d_s_gaussian = &d_alpha_g * &cache.s_inter.mapv(swish);
    let d_gaussian = p.sigma_gaussian.backward(&cache.c_gaussian, &d_s_gaussian, &mut grads.sigma_gaussian);
    let mut d_s_inter = d_alpha_g * &cache.s_gaussian;
    d_s_inter.zip_mut_with(&cache.s_inter, |g, &z| *g *= swish_grad(z));
    let d_inter = grad_fused + &p.sigma_inter.backward(&cache.c_inter, &d_s_inter, &mut grads.sigma_inter);

    let d_alpha_s = p.phi_surfel.backward(&cache.c_phi_surfel, &d_inter, &mut grads.phi_surfel);
    let d_s_surfel = &d_alpha_s * &cache.s_in.mapv(swish);
    let d_surfel = p.sigma_surfel.backward(&cache.c_surfel, &d_s_surfel, &mut grads.sigma_surfel);
    let mut d_s_in = d_alpha_s * &cache.s_surfel;
    d_s_in.zip_mut_with(&cache.s_in, |g, &z| *g *= swish_grad(z));
    let d_lidar = d_inter + &p.sigma_in.backward(&cache.c_in, &d_s_in, &mut grads.sigma_in);
    (d_lidar, d_surfel, d_gaussian)
}

/// Alternative fusion rules, kept as comparators for ablations.
pub mod baselines {
    use super::*;

    /// Hierarchical concatenation: `[L, S] → d`, then `[·, G] → d`, plus a
    /// residual to `L`.
    #[derive(Debug, Clone, PartialEq)]
    pub struct ConcatParams {
        pub merge_surfel: Mlp,
        pub merge_gaussian: Mlp,
    }

    impl ConcatParams {
        pub fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
            Self {
                merge_surfel: Mlp::init(&[2 * d, d, d], true, Activation::Identity, rng),
                merge_gaussian: Mlp::init(&[2 * d, d, d], true, Activation::Identity, rng),
            }
        }

        pub fn zeros_like(&self) -> Self {
            Self { merge_surfel: self.merge_surfel.zeros_like(), merge_gaussian: self.merge_gaussian.zeros_like() }
        }
    }

    impl Parameters for ConcatParams {
        fn visit(&self, f: &mut dyn FnMut(&[f64])) {
            self.merge_surfel.visit(f);
            self.merge_gaussian.visit(f);
        }

        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
            self.merge_surfel.visit_mut(f);
            self.merge_gaussian.visit_mut(f);
        }
    }

    #[derive(Debug, Clone)]
    pub struct ConcatCache {
        c_surfel: MlpCache,
        c_gaussian: MlpCache,
    }

    pub fn concat_fuse_cached(
        lidar: &Matrix,
        surfel: &Matrix,
        gaussian: &Matrix,
        p: &ConcatParams,
    ) -> Result<(Matrix, ConcatCache)> {
        check_rows(lidar, &[surfel, gaussian])?;
        let (m1, c_surfel) = p.merge_surfel.forward_cached(&concatenate![Axis(1), *lidar, *surfel])?;
        let (m2, c_gaussian) = p.merge_gaussian.forward_cached(&concatenate![Axis(1), m1, *gaussian])?;
        Ok((m2 + lidar, ConcatCache { c_surfel, c_gaussian }))
    }

    pub fn concat_fuse_backward(
        p: &ConcatParams,
        cache: &ConcatCache,
        grad_fused: &Matrix,
        grads: &mut ConcatParams,
    ) -> (Matrix, Matrix, Matrix) {
        let d = grad_fused.ncols();
        let g2 = p.merge_gaussian.backward(&cache.c_gaussian, grad_fused, &mut grads.merge_gaussian);
        let d_m1 = g2.slice(s![.., ..d]).to_owned();
        let d_gaussian = g2.slice(s![.., d..]).to_owned();
        let g1 = p.merge_surfel.backward(&cache.c_surfel, &d_m1, &mut grads.merge_surfel);
        let d_lidar = grad_fused + &g1.slice(s![.., ..d]);
        let d_surfel = g1.slice(s![.., d..]).to_owned();
        (d_lidar, d_surfel, d_gaussian)
    }

    /// Element-wise sum of the three modality features.
    pub fn sum_fuse(lidar: &Matrix, surfel: &Matrix, gaussian: &Matrix) -> Result<Matrix> {
        check_rows(lidar, &[surfel, gaussian])?;
        Ok(lidar + surfel + gaussian)
    }

    /// Element-wise mean of the three modality features.
    pub fn average_fuse(lidar: &Matrix, surfel: &Matrix, gaussian: &Matrix) -> Result<Matrix> {
        sum_fuse(lidar, surfel, gaussian).map(|m| m / 3.0)
    }
}

/// Projection layers plus the chosen mixing rule.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub proj_lidar: Mlp,
    pub proj_surfel: Mlp,
    pub proj_gaussian: Mlp,
    pub mixer: Mixer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    Gated(GatedParams),
    Concat(baselines::ConcatParams),
    Sum,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    Gated,
    Concat,
    Sum,
    Average,
}

impl FusionStrategy {
    pub fn code(self) -> u8 {
        match self {
            FusionStrategy::Gated => 0,
            FusionStrategy::Concat => 1,
            FusionStrategy::Sum => 2,
            FusionStrategy::Average => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [FusionStrategy::Gated, FusionStrategy::Concat, FusionStrategy::Sum, FusionStrategy::Average]
            .into_iter()
            .find(|s| s.code() == c)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gated" => Some(FusionStrategy::Gated),
            "concat" => Some(FusionStrategy::Concat),
            "sum" => Some(FusionStrategy::Sum),
            "average" => Some(FusionStrategy::Average),
            _ => None,
        }
    }
}

impl Mixer {
    pub fn init(strategy: FusionStrategy, d: usize, rng: &mut ChaCha8Rng) -> Self {
        match strategy {
            FusionStrategy::Gated => Mixer::Gated(GatedParams::init(d, rng)),
            FusionStrategy::Concat => Mixer::Concat(baselines::ConcatParams::init(d, rng)),
            FusionStrategy::Sum => Mixer::Sum,
            FusionStrategy::Average => Mixer::Average,
        }
    }

    pub fn strategy(&self) -> FusionStrategy {
        match self {
            Mixer::Gated(_) => FusionStrategy::Gated,
            Mixer::Concat(_) => FusionStrategy::Concat,
            Mixer::Sum => FusionStrategy::Sum,
            Mixer::Average => FusionStrategy::Average,
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Mixer::Gated(p) => Mixer::Gated(p.zeros_like()),
            Mixer::Concat(p) => Mixer::Concat(p.zeros_like()),
            Mixer::Sum => Mixer::Sum,
            Mixer::Average => Mixer::Average,
        }
    }

    pub fn mlps(&self) -> Vec<&Mlp> {
        match self {
            Mixer::Gated(p) => p.mlps().to_vec(),
            Mixer::Concat(p) => vec![&p.merge_surfel, &p.merge_gaussian],
            _ => Vec::new(),
        }
    }

    pub fn mlps_mut(&mut self) -> Vec<&mut Mlp> {
        match self {
            Mixer::Gated(p) => p.mlps_mut().into_iter().collect(),
            Mixer::Concat(p) => vec![&mut p.merge_surfel, &mut p.merge_gaussian],
            _ => Vec::new(),
        }
    }

    pub fn forward_cached(&self, lidar: &Matrix, surfel: &Matrix, gaussian: &Matrix) -> Result<(Matrix, MixCache)> {
        match self {
            Mixer::Gated(p) => gated_fuse_cached(lidar, surfel, gaussian, p).map(|(f, c)| (f, MixCache::Gated(c))),
            Mixer::Concat(p) => {
                baselines::concat_fuse_cached(lidar, surfel, gaussian, p).map(|(f, c)| (f, MixCache::Concat(c)))
            }
            Mixer::Sum => baselines::sum_fuse(lidar, surfel, gaussian).map(|f| (f, MixCache::Linear)),
            Mixer::Average => baselines::average_fuse(lidar, surfel, gaussian).map(|f| (f, MixCache::Linear)),
        }
    }

    pub fn backward(&self, cache: &MixCache, grad: &Matrix, grads: &mut Mixer) -> (Matrix, Matrix, Matrix) {
        match (self, cache, grads) {
            (Mixer::Gated(p), MixCache::Gated(c), Mixer::Gated(g)) => gated_fuse_backward(p, c, grad, g),
            (Mixer::Concat(p), MixCache::Concat(c), Mixer::Concat(g)) => baselines::concat_fuse_backward(p, c, grad, g),
            (Mixer::Sum, _, _) => (grad.clone(), grad.clone(), grad.clone()),
            (Mixer::Average, _, _) => {
                let g = grad / 3.0;
                (g.clone(), g.clone(), g)
            }
            _ => panic!("mixer, cache and gradient variants differ"),
        }
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum MixCache {
    Gated(GatedCache),
    Concat(baselines::ConcatCache),
    Linear,
}

impl FusionParams {
    pub fn init(
        strategy: FusionStrategy,
        d: usize,
        raw_dims: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            proj_lidar: Mlp::init(&[raw_dims[0], d, d], true, Activation::Identity, rng),
            proj_surfel: Mlp::init(&[raw_dims[1], d, d], true, Activation::Identity, rng),
            proj_gaussian: Mlp::init(&[raw_dims[2], d, d], true, Activation::Identity, rng),
            mixer: Mixer::init(strategy, d, rng),
        }
    }

    pub fn d(&self) -> usize {
        self.proj_lidar.out_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            proj_lidar: self.proj_lidar.zeros_like(),
            proj_surfel: self.proj_surfel.zeros_like(),
            proj_gaussian: self.proj_gaussian.zeros_like(),
            mixer: self.mixer.zeros_like(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        for m in [&self.proj_surfel, &self.proj_gaussian] {
            if m.out_dim() != d {
                return Err(Error::Dimension { expected: d, actual: m.out_dim() });
            }
        }
        if let Mixer::Gated(g) = &self.mixer {
            g.validate()?;
        }
        Ok(())
    }

    pub fn mlps(&self) -> Vec<&Mlp> {
        let mut v = vec![&self.proj_lidar, &self.proj_surfel, &self.proj_gaussian];
        v.extend(self.mixer.mlps());
        v
    }

    pub fn mlps_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = vec![&mut self.proj_lidar, &mut self.proj_surfel, &mut self.proj_gaussian];
        v.extend(self.mixer.mlps_mut());
        v
    }
}

impl Parameters for FusionParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.mlps().into_iter().for_each(|m| m.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.mlps_mut().into_iter().for_each(|m| m.visit_mut(f));
    }
}

/// Per-modality pillar grids for one sample. Absent priors are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBundle {
    pub lidar: BevFeatureGrid,
    pub surfel: Option<BevFeatureGrid>,
    pub gaussian: Option<BevFeatureGrid>,
    pub camera: Option<BevFeatureGrid>,
}

/// Which priors a dropout draw removed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DropoutDecision {
    pub surfel_dropped: bool,
    pub gaussian_dropped: bool,
}

/// Independently zeroes each prior with its probability. LiDAR and camera
/// are never dropped.
pub fn apply_modality_dropout<R: Rng>(
    bundle: &ModalityBundle,
    p_surfel: f64,
    p_gaussian: f64,
    rng: &mut R,
) -> (ModalityBundle, DropoutDecision) {
    let decision = DropoutDecision {
        surfel_dropped: rng.random_bool(p_surfel.clamp(0.0, 1.0)),
        gaussian_dropped: rng.random_bool(p_gaussian.clamp(0.0, 1.0)),
    };
    let zero = |g: &Option<BevFeatureGrid>, drop: bool| match (g, drop) {
        (Some(g), true) => Some(g.zeroed()),
        (g, _) => g.clone(),
    };
    (
        ModalityBundle {
            lidar: bundle.lidar.clone(),
            surfel: zero(&bundle.surfel, decision.surfel_dropped),
            gaussian: zero(&bundle.gaussian, decision.gaussian_dropped),
            camera: bundle.camera.clone(),
        },
        decision,
    )
}

/// `[camera | fused]` on the union of both key sets, zero-filling whichever
/// side is missing a pillar. An absent camera contributes zero columns.
pub fn concat_camera(fused: &BevFeatureGrid, camera: Option<&BevFeatureGrid>) -> Result<BevFeatureGrid> {
    let d = fused.dim();
    let cam = match camera {
        Some(c) => {
            if c.voxel_size != fused.voxel_size {
                return Err(Error::Alignment("camera grid voxel size differs".into()));
            }
            c.clone()
        }
        None => BevFeatureGrid::empty(fused.voxel_size, d),
    };
    let keys: Vec<BevKey> = union_keys([fused, &cam]);
    let left = cam.reindex(&keys);
    let right = fused.reindex(&keys);
    let features = concatenate![Axis(1), left.features, right.features];
    BevFeatureGrid::new(fused.voxel_size, keys, features)
}

/// Random helper for tests and synthesis: a seeded generator.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rows of `m` that contain any nonzero entry.
pub fn nonzero_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows().into_iter().enumerate().filter(|(_, r)| r.iter().any(|&v| v != 0.0)).map(|(i, _)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use ndarray::array;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn zero_priors_return_lidar_exactly() {
        let mut rng = seeded_rng(5);
        let p = GatedParams::init(6, &mut rng);
        let l = rand_matrix(7, 6, &mut rng);
        let z = Array2::zeros((7, 6));
        assert_eq!(gated_fuse(&l, &z, &z, &p).unwrap(), l);
    }

    #[test]
    fn surfel_only_matches_straight_line_equations() {
        let mut rng = seeded_rng(9);
        let d = 4;
        let p = GatedParams::init(d, &mut rng);
        let l = rand_matrix(3, d, &mut rng);
        let s = rand_matrix(3, d, &mut rng);
        let z = Array2::zeros((3, d));
        let got = gated_fuse(&l, &s, &z, &p).unwrap();

        // Scalar reimplementation of the surfel branch.
        let apply = |m: &Mlp, x: &[f64]| -> Vec<f64> {
            let mut h = x.to_vec();
            for layer in &m.layers {
                let mut out = vec![0.0; layer.out_dim()];
                for (j, o) in out.iter_mut().enumerate() {
                    let mut acc = layer.bias.as_ref().map_or(0.0, |b| b[j]);
                    for (i, hi) in h.iter().enumerate() {
                        acc += hi * layer.weight[[i, j]];
                    }
                    *o = if layer.activation == Activation::Swish { acc / (1.0 + (-acc).exp()) } else { acc };
                }
                h = out;
            }
            h
        };
        for r in 0..3 {
            let lr = l.row(r).to_vec();
            let gate: Vec<f64> = apply(&p.sigma_in, &lr).iter().map(|&v| v / (1.0 + (-v).exp())).collect();
            let sv = apply(&p.sigma_surfel, &s.row(r).to_vec());
            let alpha: Vec<f64> = gate.iter().zip(&sv).map(|(a, b)| a * b).collect();
            let phi = apply(&p.phi_surfel, &alpha);
            for c in 0..d {
                let want = phi[c] + lr[c];
                assert!((got[[r, c]] - want).abs() < 1e-12, "{} vs {}", got[[r, c]], want);
            }
        }
    }

    #[test]
    fn misaligned_rows_are_rejected() {
        let mut rng = seeded_rng(1);
        let p = GatedParams::init(3, &mut rng);
        let l = Array2::zeros((2, 3));
        let s = Array2::zeros((3, 3));
        assert!(matches!(gated_fuse(&l, &s, &l, &p), Err(Error::Alignment(_))));
    }

    #[test]
    fn aggregate_single_and_duplicate_points() {
        let cfg = GridConfig { voxel_size: 0.5, range: 10.0, ..Default::default() };
        let proj = Mlp::init_seeded(&[LIDAR_FEATURE_DIM, 3], true, Activation::Swish, 2);
        let pts = FeaturePoints::new(
            vec![Vector3::new(0.1, 0.2, 1.0), Vector3::new(2.2, 0.1, 0.5)],
            array![[0.1, 0.2, 1.0, 0.3], [2.2, 0.1, 0.5, 0.9]],
        )
        .unwrap();
        let g = aggregate_modality(&pts, &cfg, &proj).unwrap();
        let direct = proj.forward(&pillar_relative_inputs(&pts, &[0, 1], &cfg)).unwrap();
        assert_eq!(g.features, direct);

        let dup = FeaturePoints::new(
            vec![pts.positions[0], pts.positions[0], pts.positions[1]],
            array![[0.1, 0.2, 1.0, 0.3], [0.1, 0.2, 1.0, 0.3], [2.2, 0.1, 0.5, 0.9]],
        )
        .unwrap();
        let g2 = aggregate_modality(&dup, &cfg, &proj).unwrap();
        assert_eq!(g2.features, g.features);
    }

    #[test]
    fn aggregate_rejects_wrong_width() {
        let cfg = GridConfig::default();
        let proj = Mlp::init_seeded(&[5, 3], true, Activation::Swish, 2);
        let pts = FeaturePoints::empty(4);
        assert!(matches!(aggregate_modality(&pts, &cfg, &proj), Err(Error::Dimension { .. })));
    }

    #[test]
    fn camera_concat_shapes() {
        let f = BevFeatureGrid::new(0.2, vec![BevKey::new(0, 0), BevKey::new(1, 1)], array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let no_cam = concat_camera(&f, None).unwrap();
        assert_eq!(no_cam.features, array![[0.0, 0.0, 1.0, 2.0], [0.0, 0.0, 3.0, 4.0]]);
        let same = concat_camera(&f, Some(&f)).unwrap();
        assert_eq!(same.len(), 2);
        assert_eq!(same.dim(), 4);
        let cam = BevFeatureGrid::new(0.2, vec![BevKey::new(5, 5)], array![[9.0, 9.0]]).unwrap();
        let both = concat_camera(&f, Some(&cam)).unwrap();
        assert_eq!(both.len(), 3);
        assert_eq!(both.features.row(2).to_vec(), vec![9.0, 9.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_extremes() {
        let g = BevFeatureGrid::new(0.2, vec![BevKey::new(0, 0)], array![[1.0]]).unwrap();
        let b = ModalityBundle { lidar: g.clone(), surfel: Some(g.clone()), gaussian: Some(g.clone()), camera: Some(g.clone()) };
        let mut rng = seeded_rng(0);
        let (kept, d) = apply_modality_dropout(&b, 0.0, 0.0, &mut rng);
        assert_eq!(kept, b);
        assert_eq!(d, DropoutDecision::default());
        let (dropped, d) = apply_modality_dropout(&b, 1.0, 1.0, &mut rng);
        assert!(d.surfel_dropped && d.gaussian_dropped);
        assert_eq!(dropped.surfel.unwrap().features, array![[0.0]]);
        assert_eq!(dropped.gaussian.unwrap().features, array![[0.0]]);
        assert_eq!(dropped.lidar, g);
        assert_eq!(dropped.camera, Some(g));
    }
}
