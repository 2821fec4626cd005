//! Average precision and heading-weighted average precision.

use std::cmp::Ordering;
use std::f64::consts::PI;

use crate::detection::decode::detection_order;
use crate::detection::iou::iou_3d;
use crate::detection::{Detection, LabeledBox};
use crate::geom::normalize_angle;

/// Detections and labels of one frame. Detections matching an ignored box
/// (too few points) count as neither true nor false positives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalFrame {
    pub detections: Vec<Detection>,
    pub gts: Vec<LabeledBox>,
    pub ignored: Vec<LabeledBox>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub aph: f64,
    pub num_gt: usize,
    pub num_tp: usize,
    pub num_fp: usize,
}

/// Heading accuracy weight `max(0, 1 − |Δθ|/π)`.
pub fn heading_weight(pred: f64, gt: f64) -> f64 {
    (1.0 - normalize_angle(pred - gt).abs() / PI).max(0.0)
}

#[derive(Debug, Clone, Copy)]
struct Scored {
    score: f64,
    frame: usize,
    det: Detection,
    /// `None` for a false positive, else the heading weight.
    tp_weight: Option<f64>,
}

/// Greedy per-frame matching in score order: each detection takes the
/// unmatched ground truth of its class with the highest 3D IoU, provided it
/// reaches `iou_threshold`.
pub fn evaluate_ap(frames: &[EvalFrame], class: usize, iou_threshold: f64) -> ApResult {
    let mut scored = Vec::new();
    let mut num_gt = 0;
    for (fi, f) in frames.iter().enumerate() {
        let gts: Vec<&LabeledBox> = f.gts.iter().filter(|g| g.class == class).collect();
        num_gt += gts.len();
        let mut dets: Vec<Detection> = f.detections.iter().filter(|d| d.class == class).copied().collect();
        dets.sort_by(detection_order);
        let mut used = vec![false; gts.len()];
        for d in dets {
            let mut best: Option<(f64, usize)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] {
                    continue;
                }
                let iou = iou_3d(&d.bbox, &g.bbox);
                if iou >= iou_threshold && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, gi));
                }
            }
            let tp_weight = match best {
                Some((_, gi)) => {
                    used[gi] = true;
                    Some(heading_weight(d.bbox.yaw, gts[gi].bbox.yaw))
                }
                None => {
                    let ignorable = f
                        .ignored
                        .iter()
                        .any(|g| g.class == class && iou_3d(&d.bbox, &g.bbox) >= iou_threshold);
                    if ignorable {
                        continue;
                    }
                    None
                }
            };
            scored.push(Scored { score: d.score, frame: fi, det: d, tp_weight });
        }
    }
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(a.frame.cmp(&b.frame))
            .then_with(|| detection_order(&a.det, &b.det))
    });

    let mut result = ApResult { num_gt, ..Default::default() };
    if num_gt == 0 {
        result.num_fp = scored.len();
        return result;
    }
    let mut tp = 0usize;
    let mut tph = 0.0;
    let mut curve = Vec::with_capacity(scored.len());
    for (i, s) in scored.iter().enumerate() {
        if let Some(w) = s.tp_weight {
            tp += 1;
            tph += w;
        }
        let n = (i + 1) as f64;
        curve.push((tp as f64 / num_gt as f64, tp as f64 / n, tph / n));
    }
    result.num_tp = tp;
    result.num_fp = scored.len() - tp;
    let (ap, aph) = interpolated_area(&curve);
    result.ap = ap;
    result.aph = aph;
    result
}

/// All-point interpolated area under (recall, precision) and
/// (recall, heading precision) curves.
fn interpolated_area(curve: &[(f64, f64, f64)]) -> (f64, f64) {
    let mut max_p = 0.0f64;
    let mut max_ph = 0.0f64;
    let mut envelope = vec![(0.0, 0.0); curve.len()];
    for i in (0..curve.len()).rev() {
        max_p = max_p.max(curve[i].1);
        max_ph = max_ph.max(curve[i].2);
        envelope[i] = (max_p, max_ph);
    }
    let mut prev_r = 0.0;
    let (mut ap, mut aph) = (0.0, 0.0);
    for (i, &(r, _, _)) in curve.iter().enumerate() {
        let dr = r - prev_r;
        ap += dr * envelope[i].0;
        aph += dr * envelope[i].1;
        prev_r = r;
    }
    (ap, aph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Box3D;
    use crate::voxel::BevKey;
    use nalgebra::Vector3;

    fn gt(x: f64, yaw: f64) -> LabeledBox {
        LabeledBox { bbox: Box3D::new(Vector3::new(x, 0.0, 0.8), Vector3::new(4.0, 2.0, 1.6), yaw).unwrap(), class: 0 }
    }

    fn det(b: LabeledBox, score: f64) -> Detection {
        Detection { bbox: b.bbox, score, class: 0, key: BevKey::new(0, 0) }
    }

    #[test]
    fn perfect_detections() {
        let gts = vec![gt(0.0, 0.1), gt(10.0, -1.0)];
        let f = EvalFrame { detections: gts.iter().map(|g| det(*g, 0.9)).collect(), gts, ignored: vec![] };
        let r = evaluate_ap(&[f], 0, 0.7);
        assert_eq!((r.ap, r.aph), (1.0, 1.0));
    }

    #[test]
    fn no_detections() {
        let f = EvalFrame { detections: vec![], gts: vec![gt(0.0, 0.0)], ignored: vec![] };
        assert_eq!(evaluate_ap(&[f], 0, 0.5).ap, 0.0);
    }

    #[test]
    fn flipped_heading_gets_no_aph() {
        let g = gt(0.0, 0.0);
        let f = EvalFrame { detections: vec![det(gt(0.0, PI), 0.9)], gts: vec![g], ignored: vec![] };
        let r = evaluate_ap(&[f], 0, 0.5);
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.aph, 0.0);
    }

    #[test]
    fn ignored_matches_are_not_false_positives() {
        let f = EvalFrame {
            detections: vec![det(gt(0.0, 0.0), 0.9), det(gt(20.0, 0.0), 0.95)],
            gts: vec![gt(0.0, 0.0)],
            ignored: vec![gt(20.0, 0.0)],
        };
        let r = evaluate_ap(&[f], 0, 0.5);
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.num_fp, 0);
    }
}
