//! Localization-aware assignment: pseudo boxes with a tight NMS group
//! (mean IoU above beta) become certain labels, the rest become uncertain
//! and are trained through the teacher's proposal distributions only.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::model::ClassDistribution;
use crate::suppression::PseudoBox;

pub const DEFAULT_BETA: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub certain: Vec<PseudoBox>,
    pub uncertain: Vec<PseudoBox>,
    pub beta: f64,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.certain.len() + self.uncertain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All labels, certain first.
    pub fn iter(&self) -> impl Iterator<Item = &PseudoBox> {
        self.certain.iter().chain(self.uncertain.iter())
    }
}

/// Teacher proposals behind one uncertain label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalMatch {
    pub frame_id: String,
    pub proposals: Vec<BBox>,
    pub proposal_indices: Vec<usize>,
    pub teacher_dists: Vec<ClassDistribution>,
}

impl ProposalMatch {
    pub fn n_p(&self) -> usize {
        self.proposals.len()
    }
}

/// Splits on `mean_iou > beta`; order is kept inside each part.
pub fn partition(pseudo_boxes: &[PseudoBox], beta: f64) -> PseudoLabelSet {
    let (certain, uncertain) = pseudo_boxes.iter().cloned().partition(|p| p.mean_iou > beta);
    PseudoLabelSet {
        certain,
        uncertain,
        beta,
    }
}

/// One match per uncertain label: the survivor followed by its suppressed
/// group, each with the teacher's distribution for that proposal.
pub fn match_proposals(frame_id: &str, uncertain: &[PseudoBox]) -> Vec<ProposalMatch> {
    uncertain
        .iter()
        .map(|p| ProposalMatch {
            frame_id: frame_id.to_string(),
            proposals: p.members().map(|b| b.bbox).collect(),
            proposal_indices: p.members().map(|b| b.proposal).collect(),
            teacher_dists: p.members().map(|b| b.dist.clone()).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScoredBox;

    fn sb(proposal: usize) -> ScoredBox {
        ScoredBox::from_dist(BBox::new(0., 0., 1., 1.).unwrap(), ClassDistribution::uniform(2, 1.0), proposal)
    }

    fn pb(mean_iou: f64, group: usize) -> PseudoBox {
        PseudoBox {
            survivor: sb(0),
            suppressed: (1..=group).map(sb).collect(),
            mean_iou,
        }
    }

    #[test]
    fn partition_boundary_is_strict() {
        let s = partition(&[pb(0.9, 0), pb(0.85, 0)], DEFAULT_BETA);
        assert_eq!(s.certain.len(), 1);
        assert_eq!(s.certain[0].mean_iou, 0.9);
        assert_eq!(s.uncertain.len(), 1);
        assert_eq!(s.uncertain[0].mean_iou, 0.85);
        assert_eq!(s.beta, 0.85);
    }

    #[test]
    fn partition_empty() {
        let s = partition(&[], 0.85);
        assert!(s.certain.is_empty() && s.uncertain.is_empty());
    }

    #[test]
    fn proposal_counts() {
        let m = match_proposals("f", &[pb(0.5, 2)]);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].n_p(), 3);
        assert_eq!(m[0].proposal_indices, vec![0, 1, 2]);
        let m = match_proposals("f", &[pb(0.5, 0)]);
        assert_eq!(m[0].n_p(), 1);
        let m = match_proposals("f", &[pb(0.5, 1), pb(0.3, 3)]);
        assert_eq!(m.iter().map(ProposalMatch::n_p).sum::<usize>(), 2 + 4);
        assert_eq!(m[1].frame_id, "f");
    }
}
