//! Loss stack: hard classification and smooth-L1 box regression on
//! certain labels, soft cross-entropy against teacher distributions on
//! uncertain proposals, and their unweighted sum.

use serde::{Deserialize, Serialize};

use crate::assignment::ProposalMatch;
use crate::error::{Error, Result};
use crate::geometry::{encode, BBox};
use crate::model::ClassDistribution;

/// Lower clamp for probabilities inside a logarithm.
pub const PROB_EPS: f64 = 1e-12;

pub(crate) fn safe_ln(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_det: f64,
    pub l_u: f64,
    pub l_sl: f64,
}

impl LossBreakdown {
    pub fn from_parts(l_cls: f64, l_reg: f64, l_u: f64) -> Self {
        let l_det = l_cls + l_reg;
        LossBreakdown {
            l_cls,
            l_reg,
            l_det,
            l_u,
            l_sl: l_det + l_u,
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self::from_parts(self.l_cls * factor, self.l_reg * factor, self.l_u * factor)
    }

    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.l_reg, self.l_det, self.l_u, self.l_sl]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("l_cls", self.l_cls),
            ("l_reg", self.l_reg),
            ("l_u", self.l_u),
            ("l_sl", self.l_sl),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Center/log-size offsets between a proposal box and a target box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegressionTarget(pub [f64; 4]);

impl RegressionTarget {
    pub fn between(proposal: &BBox, target: &BBox) -> Self {
        RegressionTarget(encode(proposal, target))
    }
}

pub fn cls_loss(pred: &ClassDistribution, target_class: usize) -> Result<f64> {
    match pred.probs.get(target_class) {
        Some(&p) => Ok(-safe_ln(p)),
        None => Err(Error::ClassOutOfRange {
            class_id: target_class,
            class_count: pred.probs.len(),
        }),
    }
}

pub fn smooth_l1(e: f64) -> f64 {
    let a = e.abs();
    if a < 1.0 {
        0.5 * e * e
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(e: f64) -> f64 {
    if e.abs() < 1.0 {
        e
    } else {
        e.signum()
    }
}

pub fn reg_loss(pred: &RegressionTarget, target: &RegressionTarget) -> f64 {
    pred.0.iter().zip(target.0.iter()).map(|(p, t)| smooth_l1(p - t)).sum()
}

/// `-sum_j t_j ln s_j` for one proposal.
pub fn soft_cross_entropy(teacher: &[f64], student: &[f64]) -> f64 {
    teacher.iter().zip(student).map(|(t, s)| -t * safe_ln(*s)).sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum()
}

/// Soft loss over every proposal of every match. `student_dists` follows
/// the flattened proposal order of `matches`.
pub fn uncertain_loss(matches: &[ProposalMatch], student_dists: &[ClassDistribution]) -> Result<f64> {
    let n_p: usize = matches.iter().map(ProposalMatch::n_p).sum();
    if n_p != student_dists.len() {
        return Err(Error::Length {
            left: n_p,
            right: student_dists.len(),
            context: "uncertain proposals vs student distributions".into(),
        });
    }
    let teachers = matches.iter().flat_map(|m| m.teacher_dists.iter());
    let mut total = 0.0;
    for (t, s) in teachers.zip(student_dists) {
        if t.probs.len() != s.probs.len() {
            return Err(Error::Dimension {
                expected: t.probs.len(),
                got: s.probs.len(),
                context: "teacher vs student class count".into(),
            });
        }
        total += soft_cross_entropy(&t.probs, &s.probs);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CertainTerm {
    pub cls: f64,
    pub reg: f64,
}

/// Sums certain terms into the detection loss and adds the uncertain
/// terms. Uncertain labels carry no regression component.
pub fn total_loss(certain: &[CertainTerm], uncertain: &[f64]) -> LossBreakdown {
    let l_cls = certain.iter().fold(0.0, |a, t| a + t.cls);
    let l_reg = certain.iter().fold(0.0, |a, t| a + t.reg);
    let l_u = uncertain.iter().fold(0.0, |a, v| a + v);
    LossBreakdown::from_parts(l_cls, l_reg, l_u)
}
