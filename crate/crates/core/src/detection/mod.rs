//! Detection head on fused BEV features: targets, losses, decoding, NMS and
//! AP/APH evaluation.

pub mod decode;
pub mod head;
pub mod interchange;
pub mod iou;
pub mod loss;
pub mod metrics;
pub mod targets;

use crate::geom::Box3D;
use crate::voxel::BevKey;

pub use decode::{decode_boxes, nms_bev, postprocess};
pub use interchange::{read_jsonl, write_jsonl, BoxRecord};
pub use head::{ContextConfig, DetectionHead, HeadCache, HeadOutput, Window};
pub use iou::{iou_3d, iou_bev_aligned, iou_bev_rotated};
pub use loss::{total_loss, LossBreakdown, LossConfig};
pub use metrics::{evaluate_ap, ApResult, EvalFrame};
pub use targets::{make_targets, PositiveTarget, TargetConfig, Targets};

/// A ground-truth or predicted object box with its class id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub bbox: Box3D,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    /// Sigmoid of the heatmap logit, in (0, 1).
    pub score: f64,
    pub class: usize,
    /// Pillar that produced the detection; used for deterministic ordering.
    pub key: BevKey,
}

impl Detection {
    pub fn labeled(&self) -> LabeledBox {
        LabeledBox { bbox: self.bbox, class: self.class }
    }
}
