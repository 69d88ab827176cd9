//! Category-aware adaptive thresholds.
//!
//! Each class gets the score found at position `floor(n_i * P_i)` of its
//! ascending score list, where `P_i = n_i / n_f` is the class share of all
//! foreground predictions. Frequent classes index deep into their list and
//! end up with high thresholds; rare classes keep almost everything.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassCatalog, Frame, ScoredBox};
use crate::suppression::PseudoBox;

pub const DEFAULT_OBJECTNESS_FLOOR: f64 = 0.05;
pub const DEFAULT_FALLBACK_THRESHOLD: f64 = 0.5;
pub const DEFAULT_REFRESH_INTERVAL: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub class_id: usize,
    pub sorted_scores: Vec<f64>,
    pub n_i: usize,
    pub p_i: f64,
}

impl CategoryStats {
    /// Position into `sorted_scores` selected by the class share, or
    /// `None` for an empty class. Computed as `floor(n_i^2 / n_f)` in
    /// integer arithmetic, clamped to the last element.
    pub fn threshold_index(&self, n_f: usize) -> Option<usize> {
        if self.n_i == 0 || n_f == 0 {
            return None;
        }
        let idx = (self.n_i as u128 * self.n_i as u128) / n_f as u128;
        Some((idx as usize).min(self.n_i - 1))
    }

    pub fn threshold(&self, n_f: usize) -> Option<f64> {
        self.threshold_index(n_f).map(|i| self.sorted_scores[i])
    }
}

/// Per-class confidence thresholds. Classes without foreground
/// predictions are absent and fall back to `fallback`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub thresholds: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    pub n_f: usize,
    pub estimated_at: usize,
    pub fallback: f64,
}

impl ThresholdTable {
    /// Every class absent: behaves as a single global threshold.
    pub fn fixed(class_count: usize, delta: f64) -> Self {
        ThresholdTable {
            thresholds: vec![None; class_count],
            counts: vec![0; class_count],
            n_f: 0,
            estimated_at: 0,
            fallback: delta,
        }
    }

    pub fn class_count(&self) -> usize {
        self.thresholds.len()
    }

    pub fn threshold_for(&self, class_id: usize) -> Result<f64> {
        match self.thresholds.get(class_id) {
            Some(t) => Ok(t.unwrap_or(self.fallback)),
            None => Err(Error::ClassOutOfRange {
                class_id,
                class_count: self.class_count(),
            }),
        }
    }

    pub fn with_iteration(mut self, iteration: usize) -> Self {
        self.estimated_at = iteration;
        self
    }

    /// Audit document: class name to threshold (null when absent).
    pub fn to_json(&self, catalog: &ClassCatalog) -> serde_json::Value {
        let mut classes = serde_json::Map::new();
        for (i, name) in catalog.names().iter().enumerate() {
            let t = self.thresholds.get(i).copied().flatten();
            classes.insert(
                name.clone(),
                serde_json::json!({
                    "threshold": t,
                    "count": self.counts.get(i).copied().unwrap_or(0),
                }),
            );
        }
        serde_json::json!({
            "iteration": self.estimated_at,
            "n_f": self.n_f,
            "fallback": self.fallback,
            "classes": classes,
        })
    }
}

/// `(class_id, score)` for every box whose objectness reaches the floor,
/// using the box's argmax foreground class.
pub fn collect_foreground_boxes<'a>(
    boxes: impl IntoIterator<Item = &'a ScoredBox>,
    objectness_floor: f64,
) -> Vec<(usize, f64)> {
    boxes
        .into_iter()
        .filter(|b| b.dist.objectness >= objectness_floor)
        .map(|b| {
            let c = b.dist.argmax();
            (c, b.dist.probs[c])
        })
        .collect()
}

pub fn collect_foreground(frames: &[Frame], objectness_floor: f64) -> Vec<(usize, f64)> {
    collect_foreground_boxes(frames.iter().flat_map(|f| f.boxes.iter()), objectness_floor)
}

pub fn category_stats(foreground: &[(usize, f64)], class_count: usize) -> Result<Vec<CategoryStats>> {
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); class_count];
    for &(c, s) in foreground {
        if c >= class_count {
            return Err(Error::ClassOutOfRange {
                class_id: c,
                class_count,
            });
        }
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Data(format!("score {s} outside [0,1]")));
        }
        per_class[c].push(s);
    }
    let n_f = foreground.len();
    Ok(per_class
        .into_iter()
        .enumerate()
        .map(|(class_id, mut scores)| {
            scores.sort_by(f64::total_cmp);
            let n_i = scores.len();
            CategoryStats {
                class_id,
                sorted_scores: scores,
                n_i,
                p_i: if n_f == 0 { 0.0 } else { n_i as f64 / n_f as f64 },
            }
        })
        .collect())
}

pub fn estimate_thresholds(
    foreground: &[(usize, f64)],
    catalog: &ClassCatalog,
    fallback: f64,
) -> Result<ThresholdTable> {
    let stats = category_stats(foreground, catalog.len())?;
    let n_f = foreground.len();
    Ok(ThresholdTable {
        thresholds: stats.iter().map(|s| s.threshold(n_f)).collect(),
        counts: stats.iter().map(|s| s.n_i).collect(),
        n_f,
        estimated_at: 0,
        fallback,
    })
}

/// Keeps pseudo boxes whose survivor score reaches its class threshold.
pub fn filter_by_threshold(pseudo_boxes: &[PseudoBox], table: &ThresholdTable) -> Result<Vec<PseudoBox>> {
    let mut out = Vec::with_capacity(pseudo_boxes.len());
    for p in pseudo_boxes {
        if p.score() >= table.threshold_for(p.class_id())? {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn should_refresh(iteration: usize, interval: usize) -> Result<bool> {
    if interval == 0 {
        return Err(Error::config("refresh_interval", "must be positive"));
    }
    Ok(iteration % interval == 0)
}
