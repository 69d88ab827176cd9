//! Linear detector head over per-proposal features.
//!
//! For a feature vector `x`:
//! - objectness `sigmoid(w_obj . x + b_obj)`
//! - class distribution `softmax(W x + b)` over foreground classes
//! - box offsets `V x + c`, applied to the proposal box in the
//!   center/log-size parameterization
//!
//! Parameters live in one flat vector so that optimizer and EMA steps are
//! plain elementwise operations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode, BBox};
use crate::losses::{cls_loss, reg_loss, soft_cross_entropy, LossBreakdown, RegressionTarget};
use crate::model::{ClassDistribution, Frame, ScoredBox};
use crate::suppression::group_nms;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    ClassWeights,
    ClassBias,
    ObjectnessWeights,
    ObjectnessBias,
    RegressionWeights,
    RegressionBias,
}

impl Block {
    pub const ALL: [Block; 6] = [
        Block::ClassWeights,
        Block::ClassBias,
        Block::ObjectnessWeights,
        Block::ObjectnessBias,
        Block::RegressionWeights,
        Block::RegressionBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::ClassWeights => "W",
            Block::ClassBias => "b",
            Block::ObjectnessWeights => "w_obj",
            Block::ObjectnessBias => "b_obj",
            Block::RegressionWeights => "V",
            Block::RegressionBias => "c",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    class_count: usize,
    dim: usize,
    data: Vec<f64>,
}

impl DetectorParams {
    pub fn zeros(class_count: usize, dim: usize) -> Self {
        let len = class_count * dim + class_count + dim + 1 + 4 * dim + 4;
        DetectorParams {
            class_count,
            dim,
            data: vec![0.0; len],
        }
    }

    pub fn from_flat(class_count: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        let z = Self::zeros(class_count, dim);
        if z.data.len() != data.len() {
            return Err(Error::Length {
                left: z.data.len(),
                right: data.len(),
                context: format!("parameter vector for C={class_count}, d={dim}"),
            });
        }
        Ok(DetectorParams {
            class_count,
            dim,
            data,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn shape(&self, block: Block) -> (usize, usize) {
        let (c, d) = (self.class_count, self.dim);
        match block {
            Block::ClassWeights => (c, d),
            Block::ClassBias => (c, 1),
            Block::ObjectnessWeights => (1, d),
            Block::ObjectnessBias => (1, 1),
            Block::RegressionWeights => (4, d),
            Block::RegressionBias => (4, 1),
        }
    }

    fn range(&self, block: Block) -> std::ops::Range<usize> {
        let mut start = 0;
        for b in Block::ALL {
            let (r, c) = self.shape(b);
            if b == block {
                return start..start + r * c;
            }
            start += r * c;
        }
        unreachable!()
    }

    pub fn block(&self, block: Block) -> &[f64] {
        &self.data[self.range(block)]
    }

    pub fn block_mut(&mut self, block: Block) -> &mut [f64] {
        let r = self.range(block);
        &mut self.data[r]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &DetectorParams) -> Result<()> {
        if self.class_count != other.class_count || self.dim != other.dim {
            return Err(Error::Dimension {
                expected: self.data.len(),
                got: other.data.len(),
                context: "detector parameter shapes differ".into(),
            });
        }
        Ok(())
    }

    /// Euclidean distance between two parameter sets.
    pub fn distance(&self, other: &DetectorParams) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, other: &DetectorParams, scale: f64) -> Result<DetectorParams> {
        self.check_same_shape(other)?;
        let mut out = self.clone();
        for (o, g) in out.data.iter_mut().zip(&other.data) {
            *o += scale * g;
        }
        Ok(out)
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
                context: "proposal feature vector".into(),
            });
        }
        Ok(())
    }

    /// Raw head outputs for one feature vector.
    pub fn forward(&self, x: &[f64]) -> Result<HeadOutput> {
        self.check_dim(x)?;
        let d = self.dim;
        let w = self.block(Block::ClassWeights);
        let b = self.block(Block::ClassBias);
        let logits: Vec<f64> = (0..self.class_count)
            .map(|k| dot(&w[k * d..(k + 1) * d], x) + b[k])
            .collect();
        let obj_logit = dot(self.block(Block::ObjectnessWeights), x) + self.block(Block::ObjectnessBias)[0];
        let v = self.block(Block::RegressionWeights);
        let c = self.block(Block::RegressionBias);
        let mut offsets = [0.0; 4];
        for (r, o) in offsets.iter_mut().enumerate() {
            *o = dot(&v[r * d..(r + 1) * d], x) + c[r];
        }
        Ok(HeadOutput {
            probs: softmax(&logits),
            objectness: sigmoid(obj_logit),
            offsets,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub probs: Vec<f64>,
    pub objectness: f64,
    pub offsets: [f64; 4],
}

impl HeadOutput {
    pub fn dist(&self) -> ClassDistribution {
        ClassDistribution {
            probs: self.probs.clone(),
            objectness: self.objectness,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Scores every proposal of `frame` using the supplied feature view.
pub fn predict_with(params: &DetectorParams, proposals: &[BBox], features: &[Vec<f64>]) -> Result<Vec<ScoredBox>> {
    if proposals.len() != features.len() {
        return Err(Error::Length {
            left: proposals.len(),
            right: features.len(),
            context: "proposals vs features".into(),
        });
    }
    proposals
        .iter()
        .zip(features)
        .enumerate()
        .map(|(i, (p, x))| {
            let h = params.forward(x)?;
            Ok(ScoredBox::from_dist(decode(p, &h.offsets), h.dist(), i))
        })
        .collect()
}

pub fn predict(params: &DetectorParams, frame: &Frame) -> Result<Vec<ScoredBox>> {
    predict_with(params, &proposal_boxes(frame), &frame.features)
}

pub fn proposal_boxes(frame: &Frame) -> Vec<BBox> {
    frame.boxes.iter().map(|b| b.bbox).collect()
}

/// Final detections: objectness-gated predictions after per-class NMS.
pub fn detect(params: &DetectorParams, frame: &Frame, objectness_floor: f64, nms_iou_threshold: f64) -> Result<Vec<ScoredBox>> {
    let fg: Vec<ScoredBox> = predict(params, frame)?
        .into_iter()
        .filter(|b| b.dist.objectness >= objectness_floor)
        .collect();
    Ok(group_nms(&fg, nms_iou_threshold).into_iter().map(|p| p.survivor).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassTarget {
    None,
    Hard(usize),
    Soft(Vec<f64>),
}

/// Supervision attached to one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub proposal: usize,
    pub class: ClassTarget,
    pub reg: Option<RegressionTarget>,
    pub objectness: Option<f64>,
}

/// A frame view (features as seen by the student) and its supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedFrame {
    pub features: Vec<Vec<f64>>,
    pub terms: Vec<Term>,
}

/// Loss and analytic gradient over a batch.
///
/// Hard targets and objectness go to `l_cls`, regression to `l_reg`, soft
/// targets to `l_u`. With `mean_reduction` every quantity is divided by
/// the number of terms in the batch.
pub fn loss_and_grad(
    params: &DetectorParams,
    batch: &[SupervisedFrame],
    mean_reduction: bool,
) -> Result<(LossBreakdown, DetectorParams)> {
    let (c, d) = (params.class_count, params.dim);
    let mut grad = DetectorParams::zeros(c, d);
    let (mut l_cls, mut l_reg, mut l_u) = (0.0, 0.0, 0.0);
    let mut n_terms = 0usize;

    for frame in batch {
        for term in &frame.terms {
            let x = frame.features.get(term.proposal).ok_or_else(|| {
                Error::Data(format!("term refers to missing proposal {}", term.proposal))
            })?;
            let h = params.forward(x)?;
            n_terms += 1;

            let mut g_logits: Option<Vec<f64>> = None;
            match &term.class {
                ClassTarget::None => {}
                ClassTarget::Hard(k) => {
                    l_cls += cls_loss(&h.dist(), *k)?;
                    let mut g = h.probs.clone();
                    g[*k] -= 1.0;
                    g_logits = Some(g);
                }
                ClassTarget::Soft(t) => {
                    if t.len() != c {
                        return Err(Error::Dimension {
                            expected: c,
                            got: t.len(),
                            context: "soft class target".into(),
                        });
                    }
                    l_u += soft_cross_entropy(t, &h.probs);
                    let mass: f64 = t.iter().sum();
                    g_logits = Some(h.probs.iter().zip(t).map(|(p, q)| mass * p - q).collect());
                }
            }
            if let Some(g) = g_logits {
                let gw = grad.block_mut(Block::ClassWeights);
                for (k, gk) in g.iter().enumerate() {
                    for (j, xj) in x.iter().enumerate() {
                        gw[k * d + j] += gk * xj;
                    }
                }
                for (gb, gk) in grad.block_mut(Block::ClassBias).iter_mut().zip(&g) {
                    *gb += gk;
                }
            }

            if let Some(target) = &term.reg {
                let pred = RegressionTarget(h.offsets);
                l_reg += reg_loss(&pred, target);
                let ge: Vec<f64> = (0..4)
                    .map(|r| crate::losses::smooth_l1_grad(h.offsets[r] - target.0[r]))
                    .collect();
                let gv = grad.block_mut(Block::RegressionWeights);
                for (r, gr) in ge.iter().enumerate() {
                    for (j, xj) in x.iter().enumerate() {
                        gv[r * d + j] += gr * xj;
                    }
                }
                for (gc, gr) in grad.block_mut(Block::RegressionBias).iter_mut().zip(&ge) {
                    *gc += gr;
                }
            }

            if let Some(y) = term.objectness {
                let s = h.objectness;
                l_cls += -(y * crate::losses::safe_ln(s) + (1.0 - y) * crate::losses::safe_ln(1.0 - s));
                let g = s - y;
                for (gw, xj) in grad.block_mut(Block::ObjectnessWeights).iter_mut().zip(x) {
                    *gw += g * xj;
                }
                grad.block_mut(Block::ObjectnessBias)[0] += g;
            }
        }
    }

    let mut loss = LossBreakdown::from_parts(l_cls, l_reg, l_u);
    if mean_reduction && n_terms > 0 {
        let f = 1.0 / n_terms as f64;
        loss = loss.scaled(f);
        for g in grad.as_mut_slice() {
            *g *= f;
        }
    }
    Ok((loss, grad))
}

/// Loss only; used by finite-difference checks.
pub fn loss(params: &DetectorParams, batch: &[SupervisedFrame], mean_reduction: bool) -> Result<LossBreakdown> {
    loss_and_grad(params, batch, mean_reduction).map(|(l, _)| l)
}
