//! 3D Gaussian prior: data model, LiDAR initialization and the point-like
//! encoding consumed by the fusion encoder.
//!
//! SH conventions follow the usual 3DGS layout: color = C0·sh0 + 0.5 + the
//! ℓ=1 band, whose per-channel triple is stored in (y, z, x) order and
//! evaluated as C1·(−y·a + z·b − x·c) for a unit view direction.

use nalgebra::{Matrix3, Quaternion, Vector3};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geom::{matrix_to_quat, quat_to_matrix, Rot6D, PointCloud};
use crate::surfel::{bin_points, covariance, sorted_eigen};
use crate::voxel::FeaturePoints;

pub const SH_C0: f64 = 0.28209479177;
pub const SH_C1: f64 = 0.4886025119029199;

/// Raw Gaussian feature width: μ, rot6d, log scale, logit opacity, sh0, sh1.
pub const GAUSSIAN_FEATURE_DIM: usize = 25;

/// Opacity is clamped below this before taking the logit.
const MAX_LOGIT_OPACITY: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D {
    pub mu: Vector3<f64>,
    /// Unit quaternion, (w, x, y, z).
    pub rot: Quaternion<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub sh0: [f64; 3],
    /// Per color channel, the ℓ=1 triple in (y, z, x) order.
    pub sh1: [[f64; 3]; 3],
}

impl Gaussian3D {
    pub fn validate(&self) -> Result<()> {
        let n = self.rot.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::DegenerateRotation(format!("quaternion norm {n}")));
        }
        if !self.scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Input(format!("non-positive scale {:?}", self.scale)));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(Error::Input(format!("opacity {} outside (0, 1]", self.opacity)));
        }
        let finite = self.mu.iter().all(|v| v.is_finite())
            && self.sh0.iter().all(|v| v.is_finite())
            && self.sh1.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("gaussian attributes".into()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Result<Matrix3<f64>> {
        quat_to_matrix(&self.rot)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianMap {
    /// Sorted by initialization voxel key.
    pub gaussians: Vec<Gaussian3D>,
}

impl GaussianMap {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianConfig {
    pub voxel_size: f64,
    pub min_support: usize,
    pub alpha_init: f64,
    pub scale_floor: f64,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        Self { voxel_size: 0.25, min_support: 3, alpha_init: 0.5, scale_floor: 0.02 }
    }
}

/// One Gaussian per voxel with at least `min_support` points: mean position,
/// covariance-aligned rotation and scales, DC color from the mean color.
pub fn init_gaussians_from_lidar(pc: &PointCloud, cfg: &GaussianConfig) -> Result<GaussianMap> {
    if !(cfg.voxel_size > 0.0) {
        return Err(Error::Config(format!("voxel_size must be > 0, got {}", cfg.voxel_size)));
    }
    if !(cfg.alpha_init > 0.0 && cfg.alpha_init <= 1.0) || !(cfg.scale_floor > 0.0) {
        return Err(Error::Config("alpha_init must be in (0,1] and scale_floor > 0".into()));
    }
    let bins = bin_points(&pc.points, cfg.voxel_size);
    let mut gaussians = Vec::new();
    for members in bins.values() {
        if members.len() < cfg.min_support.max(1) {
            continue;
        }
        let positions: Vec<Vector3<f64>> = members.iter().map(|&i| pc.points[i].position).collect();
        let n = positions.len() as f64;
        let mu = positions.iter().sum::<Vector3<f64>>() / n;
        let (values, mut axes) = sorted_eigen(&covariance(&positions, &mu));
        if axes.determinant() < 0.0 {
            let flipped = -axes.column(2);
            axes.set_column(2, &flipped);
        }
        let mut rot = matrix_to_quat(&axes);
        if rot.w < 0.0 {
            rot = -rot;
        }
        let scale = Vector3::from(values.map(|v| v.max(0.0).sqrt().max(cfg.scale_floor)));
        let mut color = [0.0; 3];
        for &i in members {
            for (c, v) in color.iter_mut().zip(pc.points[i].color) {
                *c += v;
            }
        }
        gaussians.push(Gaussian3D {
            mu,
            rot,
            scale,
            opacity: cfg.alpha_init,
            sh0: color.map(|c| (c / n - 0.5) / SH_C0),
            sh1: [[0.0; 3]; 3],
        });
    }
    Ok(GaussianMap { gaussians })
}

fn logit(p: f64) -> f64 {
    let p = p.min(MAX_LOGIT_OPACITY);
    (p / (1.0 - p)).ln()
}

/// One pseudo-point per Gaussian:
/// `[μ(3), rot6d(6), ln scale(3), logit α(1), sh0(3), sh1(9)]`.
pub fn gaussian_to_feature_points(m: &GaussianMap) -> Result<FeaturePoints> {
    let mut features = Array2::zeros((m.len(), GAUSSIAN_FEATURE_DIM));
    for (mut row, g) in features.rows_mut().into_iter().zip(&m.gaussians) {
        let r6 = Rot6D::from_matrix(&g.rotation_matrix()?);
        let mut vals = Vec::with_capacity(GAUSSIAN_FEATURE_DIM);
        vals.extend(g.mu.iter());
        vals.extend(r6.0);
        vals.extend(g.scale.iter().map(|s| s.ln()));
        vals.push(logit(g.opacity));
        vals.extend(g.sh0);
        vals.extend(g.sh1.iter().flatten());
        for (dst, v) in row.iter_mut().zip(vals) {
            *dst = v;
        }
    }
    Ok(FeaturePoints { positions: m.gaussians.iter().map(|g| g.mu).collect(), features })
}

fn sh1_to_vector(t: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(-t[2], -t[0], t[1])
}

fn vector_to_sh1(w: &Vector3<f64>) -> [f64; 3] {
    [-w.y, w.z, -w.x]
}

/// Rotates the ℓ=1 band so that the rotated field evaluated at `d` equals
/// the original evaluated at `Rᵀ·d`.
pub fn rotate_sh1(sh1: &[[f64; 3]; 3], r: &Matrix3<f64>) -> [[f64; 3]; 3] {
    sh1.map(|t| vector_to_sh1(&(r * sh1_to_vector(&t))))
}

/// View-dependent color (before clamping) for unit direction `d`.
pub fn eval_sh_color(sh0: &[f64; 3], sh1: &[[f64; 3]; 3], d: &Vector3<f64>) -> [f64; 3] {
    let mut out = [0.0; 3];
    for c in 0..3 {
        let [a, b, e] = sh1[c];
        out[c] = SH_C0 * sh0[c] + 0.5 + SH_C1 * (-d.y * a + d.z * b - d.x * e);
    }
    out
}
