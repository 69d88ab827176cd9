//! Shared data vocabulary: class catalogs, class distributions, scored
//! boxes, frames and datasets.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const DIST_SUM_TOLERANCE: f64 = 1e-9;

/// Foreground class names. Background is not an entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    names: Vec<String>,
}

impl ClassCatalog {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::config("classes", "catalog needs at least one class"));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::config("classes", format!("duplicate class name {n:?}")));
            }
        }
        Ok(ClassCatalog { names })
    }

    /// Catalog named `c0 .. c{n-1}`.
    pub fn numbered(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| format!("c{i}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, class_id: usize) -> Option<&str> {
        self.names.get(class_id).map(String::as_str)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn check(&self, class_id: usize) -> Result<()> {
        if class_id < self.len() {
            Ok(())
        } else {
            Err(Error::ClassOutOfRange {
                class_id,
                class_count: self.len(),
            })
        }
    }
}

/// Foreground class probabilities plus the probability that the box is
/// foreground at all. Background probability is `1 - objectness`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub probs: Vec<f64>,
    pub objectness: f64,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>, objectness: f64) -> Result<Self> {
        let d = ClassDistribution { probs, objectness };
        d.validate()?;
        Ok(d)
    }

    pub fn uniform(class_count: usize, objectness: f64) -> Self {
        ClassDistribution {
            probs: vec![1.0 / class_count as f64; class_count],
            objectness,
        }
    }

    pub fn one_hot(class_count: usize, class_id: usize, objectness: f64) -> Self {
        let mut probs = vec![0.0; class_count];
        probs[class_id] = 1.0;
        ClassDistribution { probs, objectness }
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.is_empty() {
            return Err(Error::Data("empty class distribution".into()));
        }
        if !(0.0..=1.0).contains(&self.objectness) {
            return Err(Error::Data(format!("objectness {} outside [0,1]", self.objectness)));
        }
        if let Some(p) = self.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Data(format!("probability {p} outside [0,1]")));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > DIST_SUM_TOLERANCE {
            return Err(Error::Data(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Highest-probability class; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn class_count(&self) -> usize {
        self.probs.len()
    }
}

/// A predicted (or proposed) box with its class distribution.
///
/// `proposal` is the position of the originating proposal inside its
/// frame, which ties every prediction back to the raw proposal set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    pub dist: ClassDistribution,
    pub proposal: usize,
}

impl ScoredBox {
    /// Scores the box with its argmax foreground class.
    pub fn from_dist(bbox: BBox, dist: ClassDistribution, proposal: usize) -> Self {
        let class_id = dist.argmax();
        ScoredBox {
            bbox,
            class_id,
            score: dist.probs[class_id],
            dist,
            proposal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// One target-domain sample: proposal boxes with their stored scores and
/// one feature vector per proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: String,
    pub boxes: Vec<ScoredBox>,
    pub features: Vec<Vec<f64>>,
}

impl Frame {
    pub fn new(frame_id: impl Into<String>, boxes: Vec<ScoredBox>, features: Vec<Vec<f64>>) -> Result<Self> {
        let f = Frame {
            frame_id: frame_id.into(),
            boxes,
            features,
        };
        if f.boxes.len() != f.features.len() {
            return Err(Error::Length {
                left: f.boxes.len(),
                right: f.features.len(),
                context: format!("boxes vs features in frame {}", f.frame_id),
            });
        }
        Ok(f)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Feature dimension, or `None` for a frame without proposals.
    pub fn feature_dim(&self) -> Option<usize> {
        self.features.first().map(Vec::len)
    }
}

/// Ordered frames over one catalog. Ground truth, when present, is only
/// reachable through [`Dataset::ground_truth`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    frames: Vec<Frame>,
    catalog: ClassCatalog,
    ground_truth: Option<Vec<Vec<GtBox>>>,
}

impl Dataset {
    pub fn new(frames: Vec<Frame>, catalog: ClassCatalog, ground_truth: Option<Vec<Vec<GtBox>>>) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut dim = None;
        for f in &frames {
            if !ids.insert(f.frame_id.as_str()) {
                return Err(Error::Data(format!("duplicate frame_id {:?}", f.frame_id)));
            }
            for (b, x) in f.boxes.iter().zip(&f.features) {
                catalog.check(b.class_id)?;
                if b.dist.class_count() != catalog.len() {
                    return Err(Error::Dimension {
                        expected: catalog.len(),
                        got: b.dist.class_count(),
                        context: format!("class distribution in frame {}", f.frame_id),
                    });
                }
                match dim {
                    None => dim = Some(x.len()),
                    Some(d) if d != x.len() => {
                        return Err(Error::Dimension {
                            expected: d,
                            got: x.len(),
                            context: format!("feature vector in frame {}", f.frame_id),
                        })
                    }
                    _ => {}
                }
            }
        }
        if let Some(gt) = &ground_truth {
            if gt.len() != frames.len() {
                return Err(Error::Length {
                    left: frames.len(),
                    right: gt.len(),
                    context: "frames vs ground-truth lists".into(),
                });
            }
            for g in gt.iter().flatten() {
                catalog.check(g.class_id)?;
            }
        }
        Ok(Dataset {
            frames,
            catalog,
            ground_truth,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    pub fn ground_truth(&self) -> Option<&[Vec<GtBox>]> {
        self.ground_truth.as_deref()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.frames.iter().find_map(Frame::feature_dim)
    }

    /// Same frames with the ground truth removed.
    pub fn without_ground_truth(&self) -> Dataset {
        Dataset {
            frames: self.frames.clone(),
            catalog: self.catalog.clone(),
            ground_truth: None,
        }
    }

    pub fn into_parts(self) -> (Vec<Frame>, ClassCatalog, Option<Vec<Vec<GtBox>>>) {
        (self.frames, self.catalog, self.ground_truth)
    }
}
