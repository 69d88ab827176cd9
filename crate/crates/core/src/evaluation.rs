//! Detection and pseudo-label quality metrics: per-class AP with
//! all-points interpolation, mAP at an IoU threshold, and the per-class
//! pseudo-label bias audit.

use serde::{Deserialize, Serialize};

use crate::assignment::PseudoLabelSet;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::{ClassCatalog, GtBox, ScoredBox};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
    pub true_positive: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub predictions: usize,
    pub ground_truth: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub counts: ClassCounts,
    pub curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APResult {
    pub per_class: Vec<ClassEval>,
    pub map_50: f64,
    pub iou_threshold: f64,
}

impl APResult {
    pub fn per_class_ap(&self) -> Vec<Option<f64>> {
        self.per_class.iter().map(|c| c.ap).collect()
    }

    pub fn to_json(&self, catalog: &ClassCatalog) -> serde_json::Value {
        let mut classes = serde_json::Map::new();
        for c in &self.per_class {
            let name = catalog.name(c.class_id).unwrap_or("?").to_string();
            classes.insert(name, serde_json::json!({ "ap": c.ap, "counts": c.counts }));
        }
        serde_json::json!({
            "map": self.map_50,
            "iou_threshold": self.iou_threshold,
            "classes": classes,
        })
    }
}

/// Greedy matching of one class's detections, visited in the given order.
/// Each detection takes the unmatched same-class ground-truth box of its
/// frame with the highest IoU and is a true positive when that IoU reaches
/// `iou_threshold`.
fn greedy_match(dets: &[(usize, BBox)], gt: &[Vec<GtBox>], class_id: usize, iou_threshold: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    dets.iter()
        .map(|(frame, bbox)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt[*frame].iter().enumerate() {
                if g.class_id != class_id || used[*frame][j] {
                    continue;
                }
                let v = iou(bbox, &g.bbox);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= iou_threshold => {
                    used[*frame][j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Detections of one class in descending score order; ties keep frame
/// order and then within-frame order.
fn ranked<'a>(
    predictions: impl IntoIterator<Item = (usize, &'a ScoredBox)>,
    class_id: usize,
) -> Vec<(usize, f64, BBox)> {
    let mut dets: Vec<(usize, f64, BBox)> = predictions
        .into_iter()
        .filter(|(_, b)| b.class_id == class_id)
        .map(|(f, b)| (f, b.score, b.bbox))
        .collect();
    dets.sort_by(|a, b| b.1.total_cmp(&a.1));
    dets
}

fn count_gt(gt: &[Vec<GtBox>], class_id: usize) -> usize {
    gt.iter().flatten().filter(|g| g.class_id == class_id).count()
}

pub fn evaluate_class(
    predictions: &[Vec<ScoredBox>],
    ground_truth: &[Vec<GtBox>],
    class_id: usize,
    iou_threshold: f64,
) -> Result<ClassEval> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Length {
            left: predictions.len(),
            right: ground_truth.len(),
            context: "prediction frames vs ground-truth frames".into(),
        });
    }
    let dets = ranked(
        predictions.iter().enumerate().flat_map(|(f, ps)| ps.iter().map(move |b| (f, b))),
        class_id,
    );
    let located: Vec<(usize, BBox)> = dets.iter().map(|(f, _, b)| (*f, *b)).collect();
    let hits = greedy_match(&located, ground_truth, class_id, iou_threshold);
    let n_gt = count_gt(ground_truth, class_id);

    let mut curve = Vec::with_capacity(dets.len());
    let mut tp = 0usize;
    for (i, (hit, (_, score, _))) in hits.iter().zip(&dets).enumerate() {
        if *hit {
            tp += 1;
        }
        curve.push(PrPoint {
            score: *score,
            recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            precision: tp as f64 / (i + 1) as f64,
            true_positive: *hit,
        });
    }

    let ap = if n_gt == 0 {
        None
    } else {
        // Precision envelope from the right; each true positive adds
        // 1/n_gt recall at the envelope precision.
        let mut envelope = 0.0f64;
        let mut env = vec![0.0; curve.len()];
        for i in (0..curve.len()).rev() {
            envelope = envelope.max(curve[i].precision);
            env[i] = envelope;
        }
        let sum: f64 = curve
            .iter()
            .zip(&env)
            .filter(|(p, _)| p.true_positive)
            .fold(0.0, |a, (_, e)| a + e);
        Some(sum / n_gt as f64)
    };

    Ok(ClassEval {
        class_id,
        ap,
        counts: ClassCounts {
            predictions: dets.len(),
            ground_truth: n_gt,
            tp,
            fp: dets.len() - tp,
            fn_: n_gt - tp,
        },
        curve,
    })
}

/// AP for one class, or `None` when the class has no ground truth.
pub fn average_precision(
    predictions: &[Vec<ScoredBox>],
    ground_truth: &[Vec<GtBox>],
    class_id: usize,
    iou_threshold: f64,
) -> Result<Option<f64>> {
    evaluate_class(predictions, ground_truth, class_id, iou_threshold).map(|c| c.ap)
}

/// Mean of the defined per-class APs.
pub fn mean_ap(
    predictions: &[Vec<ScoredBox>],
    ground_truth: &[Vec<GtBox>],
    catalog: &ClassCatalog,
    iou_threshold: f64,
) -> Result<APResult> {
    if ground_truth.iter().all(Vec::is_empty) {
        return Err(Error::EmptyGroundTruth);
    }
    let per_class = (0..catalog.len())
        .map(|c| evaluate_class(predictions, ground_truth, c, iou_threshold))
        .collect::<Result<Vec<_>>>()?;
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map_50 = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(APResult {
        per_class,
        map_50,
        iou_threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAudit {
    pub class_id: usize,
    pub pseudo: usize,
    pub ground_truth: usize,
    /// Pseudo-label count over ground-truth count; `None` without ground truth.
    pub ratio: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassAudit {
    pub fn recall(&self) -> Option<f64> {
        (self.ground_truth > 0).then(|| self.tp as f64 / self.ground_truth as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasAudit {
    pub per_class: Vec<ClassAudit>,
    /// max/min count ratio over classes with ground truth; `None` when the
    /// smallest ratio is zero.
    pub dispersion: Option<f64>,
}

impl BiasAudit {
    /// Dispersion with an undefined value read as unbounded bias.
    pub fn dispersion_or_inf(&self) -> f64 {
        self.dispersion.unwrap_or(f64::INFINITY)
    }

    pub fn to_json(&self, catalog: &ClassCatalog) -> serde_json::Value {
        let mut classes = serde_json::Map::new();
        for c in &self.per_class {
            let name = catalog.name(c.class_id).unwrap_or("?").to_string();
            classes.insert(name, serde_json::to_value(c).unwrap_or_default());
        }
        serde_json::json!({ "dispersion": self.dispersion, "classes": classes })
    }
}

/// Compares pseudo labels (certain and uncertain) to ground truth.
pub fn audit_pseudo_labels(
    pseudo: &[PseudoLabelSet],
    ground_truth: &[Vec<GtBox>],
    class_count: usize,
    iou_threshold: f64,
) -> Result<BiasAudit> {
    let survivors: Vec<Vec<ScoredBox>> = pseudo
        .iter()
        .map(|s| s.iter().map(|p| p.survivor.clone()).collect())
        .collect();
    let mut per_class = Vec::with_capacity(class_count);
    for c in 0..class_count {
        let e = evaluate_class(&survivors, ground_truth, c, iou_threshold)?;
        let n = e.counts;
        per_class.push(ClassAudit {
            class_id: c,
            pseudo: n.predictions,
            ground_truth: n.ground_truth,
            ratio: (n.ground_truth > 0).then(|| n.predictions as f64 / n.ground_truth as f64),
            tp: n.tp,
            fp: n.fp,
            fn_: n.fn_,
        });
    }
    let ratios: Vec<f64> = per_class.iter().filter_map(|c| c.ratio).collect();
    let max = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let dispersion = (!ratios.is_empty() && min > 0.0).then(|| max / min);
    Ok(BiasAudit { per_class, dispersion })
}
