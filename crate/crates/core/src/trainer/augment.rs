//! Global scene augmentation applied identically to every modality.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::detection::LabeledBox;
use crate::gaussian::{rotate_sh1, GaussianMap};
use crate::geom::{normalize_angle, quat_to_matrix, yaw_matrix, matrix_to_quat, Box3D};
use crate::surfel::SurfelMap;
use crate::trainer::Sample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub p_rotate: f64,
    pub p_flip: f64,
    /// Uniform scale range `[lo, hi)`; `lo == hi` disables scaling.
    pub scale_range: (f64, f64),
    pub p_point_drop: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { p_rotate: 0.74, p_flip: 0.5, scale_range: (0.95, 1.05), p_point_drop: 0.05 }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { p_rotate: 0.0, p_flip: 0.0, scale_range: (1.0, 1.0), p_point_drop: 0.0 }
    }
}

/// The sampled transform: flip y first, then yaw rotation, then scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentTransform {
    pub flip: bool,
    pub yaw: f64,
    pub scale: f64,
}

impl AugmentTransform {
    pub fn identity() -> Self {
        Self { flip: false, yaw: 0.0, scale: 1.0 }
    }

    pub fn sample(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Self {
        let yaw = if rng.random_bool(cfg.p_rotate.clamp(0.0, 1.0)) {
            rng.random_range(-std::f64::consts::PI..=std::f64::consts::PI)
        } else {
            0.0
        };
        let flip = rng.random_bool(cfg.p_flip.clamp(0.0, 1.0));
        let (lo, hi) = cfg.scale_range;
        let scale = if hi > lo { rng.random_range(lo..hi) } else { lo };
        Self { flip, yaw, scale }
    }

    fn reflection(&self) -> Matrix3<f64> {
        if self.flip {
            Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0))
        } else {
            Matrix3::identity()
        }
    }

    /// Orthogonal part `R(yaw)·F`.
    pub fn linear(&self) -> Matrix3<f64> {
        yaw_matrix(self.yaw) * self.reflection()
    }

    pub fn point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.linear() * p * self.scale
    }

    pub fn direction(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.linear() * v
    }

    pub fn heading(&self, yaw: f64) -> f64 {
        normalize_angle(if self.flip { -yaw } else { yaw } + self.yaw)
    }

    pub fn bbox(&self, b: &Box3D) -> Box3D {
        Box3D { center: self.point(&b.center), dims: b.dims * self.scale, yaw: self.heading(b.yaw) }
    }

    pub fn surfels(&self, m: &SurfelMap) -> SurfelMap {
        let mut out = m.clone();
        for s in &mut out.surfels {
            s.position = self.point(&s.position);
            s.normal = self.direction(&s.normal);
        }
        out
    }

    /// Covariance `s²·M Σ Mᵀ`; a reflection is absorbed by negating the
    /// third principal axis so the stored rotation stays proper.
    pub fn gaussians(&self, m: &GaussianMap) -> GaussianMap {
        let lin = self.linear();
        let fix = if self.flip { Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)) } else { Matrix3::identity() };
        let mut out = m.clone();
        for g in &mut out.gaussians {
            g.mu = self.point(&g.mu);
            if let Ok(r) = quat_to_matrix(&g.rot) {
                let mut q = matrix_to_quat(&(lin * r * fix));
                if q.w < 0.0 {
                    q = -q;
                }
                g.rot = q;
            }
            g.scale *= self.scale;
            g.sh1 = rotate_sh1(&g.sh1, &lin);
        }
        out
    }
}

/// Samples one transform and applies it to the whole sample; LiDAR points
/// are then dropped independently with `p_point_drop`. Also returns the
/// source indices of the kept points.
pub fn augment_sample(s: &Sample, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> (Sample, AugmentTransform, Vec<usize>) {
    let t = AugmentTransform::sample(cfg, rng);
    let mut out = apply_transform(s, &t);
    let mut kept: Vec<usize> = (0..out.lidar.points.len()).collect();
    if cfg.p_point_drop > 0.0 {
        let p = cfg.p_point_drop.clamp(0.0, 1.0);
        kept.retain(|_| !rng.random_bool(p));
        out.lidar.points = kept.iter().map(|&i| out.lidar.points[i]).collect();
    }
    (out, t, kept)
}

pub fn apply_transform(s: &Sample, t: &AugmentTransform) -> Sample {
    let mut out = s.clone();
    for p in &mut out.lidar.points {
        p.position = t.point(&p.position);
    }
    if let Some(cam) = &mut out.camera {
        for p in &mut cam.positions {
            *p = t.point(p);
        }
    }
    out.surfel = s.surfel.as_ref().map(|m| t.surfels(m));
    out.gaussian = s.gaussian.as_ref().map(|m| t.gaussians(m));
    out.boxes = s.boxes.iter().map(|b| LabeledBox { bbox: t.bbox(&b.bbox), class: b.class }).collect();
    out
}
