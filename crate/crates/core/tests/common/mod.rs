//! Reference implementations used as oracles by the integration tests.
//! They are written from the definitions, without calling the library
//! code they check.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rpl_core::detector::{loss, DetectorParams, SupervisedFrame};
use rpl_core::{BBox, ClassDistribution, GtBox, ScoredBox};

pub fn rect_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One NMS group: survivor index, suppressed indices in suppression order,
/// and mean IoU.
#[derive(Debug, Clone, PartialEq)]
pub struct RefGroup {
    pub survivor: usize,
    pub suppressed: Vec<usize>,
    pub mean_iou: f64,
}

/// Quadratic greedy NMS: repeatedly take the highest-scoring remaining box
/// (lowest index on ties) and remove every remaining same-class box whose
/// IoU with it exceeds the threshold.
pub fn reference_nms(boxes: &[([f64; 4], usize, f64)], threshold: f64, lone: f64) -> Vec<RefGroup> {
    let mut remaining: Vec<usize> = (0..boxes.len()).collect();
    let mut out = Vec::new();
    while !remaining.is_empty() {
        let mut best = remaining[0];
        for &i in &remaining {
            if boxes[i].2 > boxes[best].2 || (boxes[i].2 == boxes[best].2 && i < best) {
                best = i;
            }
        }
        remaining.retain(|&i| i != best);
        // Suppressed boxes listed in visiting order: score desc, index asc.
        let mut hit: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&j| boxes[j].1 == boxes[best].1 && rect_iou(boxes[best].0, boxes[j].0) > threshold)
            .collect();
        hit.sort_by(|&a, &b| boxes[b].2.partial_cmp(&boxes[a].2).unwrap().then(a.cmp(&b)));
        remaining.retain(|j| !hit.contains(j));
        let mean_iou = if hit.is_empty() {
            lone
        } else {
            hit.iter().map(|&j| rect_iou(boxes[best].0, boxes[j].0)).sum::<f64>() / hit.len() as f64
        };
        out.push(RefGroup {
            survivor: best,
            suppressed: hit,
            mean_iou,
        });
    }
    out
}

/// Direct evaluation of the class-share threshold: the score at position
/// `floor(n_i * n_i / n_f)` of the class's ascending scores, clamped to the
/// last element; `None` for absent classes.
pub fn reference_thresholds(fg: &[(usize, f64)], class_count: usize) -> Vec<Option<f64>> {
    let n_f = fg.len();
    (0..class_count)
        .map(|c| {
            let mut s: Vec<f64> = fg.iter().filter(|x| x.0 == c).map(|x| x.1).collect();
            if s.is_empty() {
                return None;
            }
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n_i = s.len();
            // Largest k with k * n_f <= n_i^2.
            let mut k = 0;
            while (k + 1) * n_f <= n_i * n_i {
                k += 1;
            }
            Some(s[k.min(n_i - 1)])
        })
        .collect()
}

/// Brute-force all-points AP for one class. Detections are ranked by score
/// (stable over frame then in-frame order), matched greedily to the best
/// unmatched GT, and the interpolated precision at every rank is the
/// maximum precision over all later ranks.
pub fn brute_force_ap(preds: &[Vec<([f64; 4], usize, f64)>], gt: &[Vec<([f64; 4], usize)>], class_id: usize, thr: f64) -> Option<f64> {
    let n_gt = gt.iter().flatten().filter(|g| g.1 == class_id).count();
    if n_gt == 0 {
        return None;
    }
    let mut dets: Vec<(usize, usize)> = Vec::new();
    for (f, ps) in preds.iter().enumerate() {
        for (k, p) in ps.iter().enumerate() {
            if p.1 == class_id {
                dets.push((f, k));
            }
        }
    }
    // Insertion sort keeps equal scores in input order.
    for i in 1..dets.len() {
        let mut j = i;
        while j > 0 && preds[dets[j].0][dets[j].1].2 > preds[dets[j - 1].0][dets[j - 1].1].2 {
            dets.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::new();
    for &(f, k) in &dets {
        let b = preds[f][k].0;
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt[f].iter().enumerate() {
            if g.1 != class_id || used[f][j] {
                continue;
            }
            let v = rect_iou(b, g.0);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        let hit = matches!(best, Some((_, v)) if v >= thr);
        if let (true, Some((j, _))) = (hit, best) {
            used[f][j] = true;
        }
        tp_flags.push(hit);
    }
    let n = dets.len();
    let mut precision = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, &h) in tp_flags.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // Recall only moves at true positives, by 1/n_gt each time.
    let mut area = 0.0;
    for i in 0..n {
        if !tp_flags[i] {
            continue;
        }
        let mut interp = 0.0f64;
        for p in &precision[i..] {
            interp = interp.max(*p);
        }
        area += interp;
    }
    Some(area / n_gt as f64)
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64, min_side: f64, max_side: f64) -> [f64; 4] {
    let w = rng.random_range(min_side..max_side);
    let h = rng.random_range(min_side..max_side);
    let x = rng.random_range(0.0..extent);
    let y = rng.random_range(0.0..extent);
    [x, y, x + w, y + h]
}

/// Box near `b`, shifted and scaled by up to `spread` of its size.
pub fn jitter_box(rng: &mut ChaCha8Rng, b: [f64; 4], spread: f64) -> [f64; 4] {
    let w = b[2] - b[0];
    let h = b[3] - b[1];
    let dx = rng.random_range(-spread..spread) * w;
    let dy = rng.random_range(-spread..spread) * h;
    let sw = 1.0 + rng.random_range(-spread..spread);
    let sh = 1.0 + rng.random_range(-spread..spread);
    let cx = (b[0] + b[2]) / 2.0 + dx;
    let cy = (b[1] + b[3]) / 2.0 + dy;
    [cx - w * sw / 2.0, cy - h * sh / 2.0, cx + w * sw / 2.0, cy + h * sh / 2.0]
}

pub fn random_probs(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub fn scored(b: [f64; 4], class_id: usize, score: f64, class_count: usize, proposal: usize) -> ScoredBox {
    let mut probs = vec![(1.0 - score) / (class_count - 1).max(1) as f64; class_count];
    probs[class_id] = score;
    ScoredBox {
        bbox: BBox::try_from(b).unwrap(),
        class_id,
        score,
        dist: ClassDistribution { probs, objectness: 1.0 },
        proposal,
    }
}

pub fn gt_box(b: [f64; 4], class_id: usize) -> GtBox {
    GtBox {
        bbox: BBox::try_from(b).unwrap(),
        class_id,
    }
}

/// Largest relative error between the analytic gradient and central finite
/// differences of `l_sl`, over every parameter. Differences smaller than
/// `floor` in absolute value count as agreement.
pub fn max_fd_error(params: &DetectorParams, batch: &[SupervisedFrame], mean: bool, analytic: &DetectorParams, h: f64, floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..params.as_slice().len() {
        let mut plus = params.clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = params.clone();
        minus.as_mut_slice()[i] -= h;
        let fd = (loss(&plus, batch, mean).unwrap().l_sl - loss(&minus, batch, mean).unwrap().l_sl) / (2.0 * h);
        let a = analytic.as_slice()[i];
        let diff = (fd - a).abs();
        if diff <= floor {
            continue;
        }
        worst = worst.max(diff / a.abs().max(fd.abs()));
    }
    worst
}
