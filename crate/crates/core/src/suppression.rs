//! Greedy per-class NMS that keeps each survivor's suppressed group and
//! derives the mean-IoU localization statistic from it.

use serde::{Deserialize, Serialize};

use crate::geometry::iou;
use crate::model::ScoredBox;

pub const DEFAULT_NMS_IOU_THRESHOLD: f64 = 0.5;

/// Mean IoU assigned to a survivor that suppressed nothing.
pub const DEFAULT_LONE_MEAN_IOU: f64 = 1.0;

/// An NMS survivor together with the boxes it suppressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoBox {
    pub survivor: ScoredBox,
    pub suppressed: Vec<ScoredBox>,
    pub mean_iou: f64,
}

impl PseudoBox {
    pub fn class_id(&self) -> usize {
        self.survivor.class_id
    }

    pub fn score(&self) -> f64 {
        self.survivor.score
    }

    /// Survivor followed by its suppressed group.
    pub fn members(&self) -> impl Iterator<Item = &ScoredBox> {
        std::iter::once(&self.survivor).chain(self.suppressed.iter())
    }
}

/// Average IoU between the survivor and each suppressed box, or
/// `lone_default` for an empty group.
pub fn mean_iou_with(survivor: &ScoredBox, suppressed: &[ScoredBox], lone_default: f64) -> f64 {
    if suppressed.is_empty() {
        return lone_default;
    }
    let sum: f64 = suppressed.iter().map(|s| iou(&survivor.bbox, &s.bbox)).sum();
    sum / suppressed.len() as f64
}

pub fn mean_iou(survivor: &ScoredBox, suppressed: &[ScoredBox]) -> f64 {
    mean_iou_with(survivor, suppressed, DEFAULT_LONE_MEAN_IOU)
}

/// Visit order for NMS: descending score, ties by lower input index.
pub(crate) fn score_order(boxes: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
    order
}

pub fn group_nms(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<PseudoBox> {
    group_nms_with(boxes, iou_threshold, DEFAULT_LONE_MEAN_IOU)
}

/// Greedy NMS within each class. A box is suppressed by the first
/// surviving box of its class, in score order, whose IoU with it is
/// strictly above `iou_threshold`. Output is in descending survivor score.
pub fn group_nms_with(boxes: &[ScoredBox], iou_threshold: f64, lone_default: f64) -> Vec<PseudoBox> {
    let order = score_order(boxes);
    let mut taken = vec![false; boxes.len()];
    let mut out = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if taken[i] {
            continue;
        }
        taken[i] = true;
        let survivor = &boxes[i];
        let mut group = Vec::new();
        for &j in &order[pos + 1..] {
            if taken[j] || boxes[j].class_id != survivor.class_id {
                continue;
            }
            if iou(&survivor.bbox, &boxes[j].bbox) > iou_threshold {
                taken[j] = true;
                group.push(boxes[j].clone());
            }
        }
        let m = mean_iou_with(survivor, &group, lone_default);
        out.push(PseudoBox {
            survivor: survivor.clone(),
            suppressed: group,
            mean_iou: m,
        });
    }
    out
}
