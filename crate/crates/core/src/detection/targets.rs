//! Training targets on a sparse pillar grid: Gaussian center heatmaps,
//! foreground segmentation and peak-voxel box regression.

use std::collections::HashMap;

use nalgebra::Vector3;
use ndarray::Array2;

use crate::detection::loss::encode_heading;
use crate::detection::LabeledBox;
use crate::error::{Error, Result};
use crate::geom::{point_in_box, Box3D};
use crate::nn::Matrix;
use crate::voxel::BevKey;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetConfig {
    pub num_classes: usize,
    pub n_bins: usize,
    /// Heatmap radius floor, in cells.
    pub min_radius: usize,
    /// Overlap parameter of the footprint radius rule.
    pub min_overlap: f64,
    /// Boxes with fewer interior points are ignored.
    pub min_points: usize,
    /// Reference height for the dz regression target.
    pub z_ref: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self { num_classes: 1, n_bins: 12, min_radius: 2, min_overlap: 0.1, min_points: 5, z_ref: 0.0 }
    }
}

/// Regression target at a box's peak voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveTarget {
    pub row: usize,
    pub class: usize,
    /// (dx, dy, dz, ln l, ln w, ln h).
    pub reg: [f64; 6],
    pub bin: usize,
    pub residual: f64,
    pub yaw: f64,
    pub bbox: Box3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub heatmap: Matrix,
    pub seg: Matrix,
    pub positives: Vec<PositiveTarget>,
}

/// Footprint radius rule for Gaussian heatmaps (in cells, before flooring).
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let b1 = height + width;
    let c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - min_overlap) * width * height;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (height + width);
    let c3 = (min_overlap - 1.0) * width * height;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

pub fn box_point_count(b: &Box3D, points: &[Vector3<f64>]) -> usize {
    points.iter().filter(|p| point_in_box(p, b, 0.0)).count()
}

/// Boxes that carry supervision: known class and at least `min_points`
/// interior points.
pub fn supervised_boxes(gts: &[LabeledBox], points: &[Vector3<f64>], cfg: &TargetConfig) -> Vec<LabeledBox> {
    gts.iter()
        .filter(|g| g.class < cfg.num_classes)
        .filter(|g| cfg.min_points == 0 || box_point_count(&g.bbox, points) >= cfg.min_points)
        .copied()
        .collect()
}

/// Encodes `b` relative to the pillar `key`.
pub fn encode_box(b: &Box3D, key: BevKey, voxel_size: f64, z_ref: f64, n_bins: usize) -> ([f64; 6], usize, f64) {
    let (cx, cy) = key.center(voxel_size);
    let (bin, residual) = encode_heading(b.yaw, n_bins);
    (
        [b.center.x - cx, b.center.y - cy, b.center.z - z_ref, b.dims.x.ln(), b.dims.y.ln(), b.dims.z.ln()],
        bin,
        residual,
    )
}

/// Builds targets for the grid `keys`. Each box's peak is its center pillar,
/// or the nearest occupied pillar within its radius when the center pillar is
/// empty; boxes with no such pillar get no heatmap or box supervision.
pub fn make_targets(
    gts: &[LabeledBox],
    keys: &[BevKey],
    voxel_size: f64,
    points: &[Vector3<f64>],
    cfg: &TargetConfig,
) -> Result<Targets> {
    if let Some(g) = gts.iter().find(|g| g.class >= cfg.num_classes) {
        return Err(Error::Input(format!("class {} ≥ num_classes {}", g.class, cfg.num_classes)));
    }
    let n = keys.len();
    let rows: HashMap<BevKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut heatmap = Array2::zeros((n, cfg.num_classes));
    let mut seg = Array2::zeros((n, cfg.num_classes));
    let mut positives = Vec::new();

    for g in supervised_boxes(gts, points, cfg) {
        let b = &g.bbox;
        for (r, k) in keys.iter().enumerate() {
            let (x, y) = k.center(voxel_size);
            let local = b.to_local(&Vector3::new(x, y, b.center.z));
            if local.x.abs() <= b.dims.x / 2.0 && local.y.abs() <= b.dims.y / 2.0 {
                seg[[r, g.class]] = 1.0;
            }
        }

        let radius = gaussian_radius(b.dims.x / voxel_size, b.dims.y / voxel_size, cfg.min_overlap)
            .floor()
            .max(cfg.min_radius as f64) as i32;
        let center_key = BevKey::of(b.center.x, b.center.y, voxel_size);
        let peak = if rows.contains_key(&center_key) {
            Some(center_key)
        } else {
            let mut best: Option<(f64, BevKey)> = None;
            for dx in -radius..=radius {
                for dy in -radius..=radius {
                    let k = center_key.offset(dx, dy);
                    if !rows.contains_key(&k) {
                        continue;
                    }
                    let (x, y) = k.center(voxel_size);
                    let d = (x - b.center.x).powi(2) + (y - b.center.y).powi(2);
                    if best.is_none_or(|(bd, bk)| d < bd || (d == bd && k < bk)) {
                        best = Some((d, k));
                    }
                }
            }
            best.map(|(_, k)| k)
        };
        let Some(peak) = peak else { continue };

        let sigma = (2.0 * radius as f64 + 1.0) / 6.0;
        for dx in -radius..=radius {
            for dy in -radius..=radius {
                if let Some(&r) = rows.get(&peak.offset(dx, dy)) {
                    let v = if dx == 0 && dy == 0 {
                        1.0
                    } else {
                        (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp()
                    };
                    let cell = &mut heatmap[[r, g.class]];
                    *cell = f64::max(*cell, v);
                }
            }
        }
        let (reg, bin, residual) = encode_box(b, peak, voxel_size, cfg.z_ref, cfg.n_bins);
        positives.push(PositiveTarget { row: rows[&peak], class: g.class, reg, bin, residual, yaw: b.yaw, bbox: *b });
    }
    Ok(Targets { heatmap, seg, positives })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lb(x: f64, y: f64) -> LabeledBox {
        LabeledBox { bbox: Box3D::new(Vector3::new(x, y, 0.8), Vector3::new(4.0, 2.0, 1.6), 0.0).unwrap(), class: 0 }
    }

    fn cfg() -> TargetConfig {
        TargetConfig { min_points: 0, ..Default::default() }
    }

    #[test]
    fn centered_box_peaks_at_its_voxel() {
        let keys: Vec<BevKey> = (-3..3).flat_map(|i| (-3..3).map(move |j| BevKey::new(i, j))).collect();
        let t = make_targets(&[lb(0.1, 0.1)], &keys, 0.2, &[], &cfg()).unwrap();
        let row = keys.iter().position(|k| *k == BevKey::new(0, 0)).unwrap();
        assert_eq!(t.heatmap[[row, 0]], 1.0);
        assert_eq!(t.positives.len(), 1);
        assert_eq!(t.positives[0].row, row);
        assert!(t.positives[0].reg[0].abs() < 1e-12 && t.positives[0].reg[1].abs() < 1e-12);
        assert_eq!(t.heatmap.iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn no_boxes_no_targets() {
        let keys = vec![BevKey::new(0, 0), BevKey::new(1, 0)];
        let t = make_targets(&[], &keys, 0.2, &[], &cfg()).unwrap();
        assert!(t.heatmap.iter().all(|&v| v == 0.0));
        assert!(t.seg.iter().all(|&v| v == 0.0));
        assert!(t.positives.is_empty());
    }

    #[test]
    fn sparse_boxes_are_ignored() {
        let keys = vec![BevKey::new(0, 0)];
        let c = TargetConfig::default();
        let pts = vec![Vector3::new(0.1, 0.1, 0.5); 4];
        let t = make_targets(&[lb(0.1, 0.1)], &keys, 0.2, &pts, &c).unwrap();
        assert!(t.positives.is_empty());
        let pts = vec![Vector3::new(0.1, 0.1, 0.5); 5];
        let t = make_targets(&[lb(0.1, 0.1)], &keys, 0.2, &pts, &c).unwrap();
        assert_eq!(t.positives.len(), 1);
    }

    #[test]
    fn empty_center_uses_nearest_pillar() {
        let keys = vec![BevKey::new(2, 0), BevKey::new(3, 3)];
        let t = make_targets(&[lb(0.1, 0.1)], &keys, 0.2, &[], &cfg()).unwrap();
        assert_eq!(t.positives[0].row, 0);
        assert_eq!(t.heatmap[[0, 0]], 1.0);
        assert!((t.positives[0].reg[0] - (0.1 - 0.5)).abs() < 1e-12);
    }
}
