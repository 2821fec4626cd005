//! Box decoding and class-aware rotated-BEV non-maximum suppression.

use std::cmp::Ordering;

use nalgebra::Vector3;

use crate::detection::head::{HeadOutput, REG_BASE};
use crate::detection::iou::iou_bev_rotated;
use crate::detection::loss::decode_heading;
use crate::detection::Detection;
use crate::geom::Box3D;
use crate::nn::sigmoid;

/// Score descending, then key, then class.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.key.cmp(&b.key))
        .then(a.class.cmp(&b.class))
}

/// Decodes one regression row at pillar `key`.
pub fn decode_row(reg: &[f64], key: crate::voxel::BevKey, voxel_size: f64, z_ref: f64) -> Box3D {
    let n_bins = reg.len() - REG_BASE - 1;
    let (cx, cy) = key.center(voxel_size);
    let dim = |v: f64| v.clamp(-7.0, 7.0).exp();
    let bins = &reg[REG_BASE..REG_BASE + n_bins];
    let bin = bins
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v > bins[best] { i } else { best });
    let yaw = decode_heading(bin, reg[REG_BASE + n_bins], n_bins);
    Box3D {
        center: Vector3::new(cx + reg[0], cy + reg[1], z_ref + reg[2]),
        dims: Vector3::new(dim(reg[3]), dim(reg[4]), dim(reg[5])),
        yaw,
    }
}

/// Every (pillar, class) whose score reaches `score_threshold`.
pub fn decode_boxes(head: &HeadOutput, z_ref: f64, score_threshold: f64) -> Vec<Detection> {
    let mut dets = Vec::new();
    for (r, key) in head.keys.iter().enumerate() {
        for (class, &logit) in head.heatmap.row(r).iter().enumerate() {
            let score = sigmoid(logit);
            if score >= score_threshold && score > 0.0 {
                let reg = head.regression.row(r).to_vec();
                dets.push(Detection { bbox: decode_row(&reg, *key, head.voxel_size, z_ref), score, class, key: *key });
            }
        }
    }
    dets.sort_by(detection_order);
    dets
}

/// Greedy NMS: a detection is dropped when its BEV IoU with an already kept
/// detection of the same class exceeds `iou_threshold`.
pub fn nms_bev(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && iou_bev_rotated(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Threshold, suppress, and keep at most `max_detections`.
pub fn postprocess(
    head: &HeadOutput,
    z_ref: f64,
    score_threshold: f64,
    iou_threshold: f64,
    max_detections: usize,
) -> Vec<Detection> {
    let mut out = nms_bev(&decode_boxes(head, z_ref, score_threshold), iou_threshold);
    out.truncate(max_detections);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::BevKey;
    use ndarray::Array2;

    fn head_with(logit: f64) -> HeadOutput {
        HeadOutput {
            voxel_size: 0.2,
            keys: vec![BevKey::new(0, 0)],
            heatmap: Array2::from_elem((1, 1), logit),
            seg: Array2::zeros((1, 1)),
            regression: Array2::zeros((1, REG_BASE + 12 + 1)),
        }
    }

    #[test]
    fn zero_offsets_decode_to_voxel_center() {
        let d = decode_boxes(&head_with(3.0), 0.0, 0.5);
        assert_eq!(d.len(), 1);
        assert!((d[0].bbox.center.x - 0.1).abs() < 1e-15);
        assert!((d[0].bbox.center.y - 0.1).abs() < 1e-15);
        assert_eq!(d[0].bbox.dims, Vector3::new(1.0, 1.0, 1.0));
    }

    #[test]
    fn low_scores_are_dropped() {
        assert!(decode_boxes(&head_with(-10.0), 0.0, 0.5).is_empty());
    }

    #[test]
    fn identical_boxes_collapse() {
        let b = Box3D::new(Vector3::zeros(), Vector3::new(4.0, 2.0, 1.5), 0.2).unwrap();
        let a = Detection { bbox: b, score: 0.9, class: 0, key: BevKey::new(0, 0) };
        let c = Detection { score: 0.8, key: BevKey::new(1, 0), ..a };
        assert_eq!(nms_bev(&[a], 0.5), vec![a]);
        assert_eq!(nms_bev(&[c, a], 0.5), vec![a]);
        let other_class = Detection { class: 1, ..c };
        assert_eq!(nms_bev(&[a, other_class], 0.5).len(), 2);
    }
}
