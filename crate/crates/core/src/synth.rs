//! Synthetic long-tailed detection scenes and source-domain pretraining.
//!
//! Every object yields several jittered proposals. A proposal's feature
//! vector is laid out as
//!
//! ```text
//! [ class channels (C) | box offsets to GT (4) | objectness (1) | nuisance (n) ]
//! ```
//!
//! Class channels carry a one-hot signal for the true class, offset
//! channels carry the regression target to the ground-truth box, and the
//! objectness channel separates objects from clutter. "Hard" objects get
//! wider proposal jitter and noisier class and offset channels. Target
//! features add a fixed domain-shift vector plus extra noise.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{loss_and_grad, ClassTarget, DetectorParams, SupervisedFrame, Term};
use crate::error::{Error, Result};
use crate::geometry::{encode, iou, BBox};
use crate::losses::RegressionTarget;
use crate::model::{ClassCatalog, ClassDistribution, Dataset, Frame, GtBox, ScoredBox};
use crate::rng::{substream, Stream};

/// Objectness stored on freshly generated, not yet scored proposals.
pub const UNSCORED_OBJECTNESS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub class_names: Vec<String>,
    /// Class frequency falls off as `1 / (k + 1)^zipf_exponent`.
    pub zipf_exponent: f64,
    pub extent: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Mean box side per class; empty means 12 for every class.
    pub box_size: Vec<f64>,
    pub size_jitter: f64,
    pub proposals_per_object: usize,
    pub background_proposals: usize,
    pub proposal_jitter: f64,
    /// Probability that an object is placed beside the previous one.
    pub crowd_fraction: f64,
    /// Center distance of a crowded pair, in units of the previous box size.
    pub crowd_gap: f64,
    pub hard_fraction: f64,
    pub hard_proposal_jitter: f64,
    pub class_signal: f64,
    pub class_noise: f64,
    pub hard_class_noise: f64,
    pub offset_noise: f64,
    pub hard_offset_noise: f64,
    /// Offset channels carry `offset_scale * deltas`.
    pub offset_scale: f64,
    pub objectness_signal: f64,
    pub objectness_noise: f64,
    pub nuisance_dims: usize,
    /// Target-only class cue written onto nuisance channel `k % nuisance_dims`.
    pub target_cue: f64,
    /// Target-only object-like distractors per frame. Each resembles a
    /// class drawn like a real object, has a cloud of proposals and no
    /// ground truth.
    pub target_clutter: usize,
    pub clutter_jitter: f64,
    /// Class-channel signal of clutter toward the class it resembles.
    pub clutter_signal: f64,
    /// Additive target-domain feature shift; empty means no shift,
    /// otherwise its length must equal the feature dimension.
    pub domain_shift: Vec<f64>,
    pub target_extra_noise: f64,
    /// Target-domain class-channel signal relative to the source.
    pub target_signal_scale: f64,
    pub source_frames: usize,
    pub target_train_frames: usize,
    pub target_test_frames: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let class_names: Vec<String> = ["car", "person", "bicycle", "rider", "bus", "truck"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut cfg = SceneConfig {
            class_names,
            zipf_exponent: 1.2,
            extent: 200.0,
            objects_min: 3,
            objects_max: 8,
            box_size: vec![],
            size_jitter: 0.25,
            proposals_per_object: 6,
            background_proposals: 10,
            proposal_jitter: 0.03,
            crowd_fraction: 0.3,
            crowd_gap: 0.35,
            hard_fraction: 0.3,
            hard_proposal_jitter: 0.08,
            class_signal: 2.0,
            class_noise: 0.6,
            hard_class_noise: 1.2,
            offset_noise: 0.01,
            hard_offset_noise: 0.15,
            offset_scale: 10.0,
            objectness_signal: 1.0,
            objectness_noise: 0.5,
            nuisance_dims: 6,
            target_cue: 2.5,
            target_clutter: 0,
            clutter_jitter: 0.1,
            clutter_signal: 2.0,
            domain_shift: vec![],
            target_extra_noise: 0.2,
            target_signal_scale: 0.5,
            source_frames: 300,
            target_train_frames: 300,
            target_test_frames: 200,
            seed: 7,
        };
        let mut shift = vec![0.0; cfg.feature_dim()];
        shift[0] = 0.3;
        cfg.domain_shift = shift;
        cfg
    }
}

impl SceneConfig {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.class_count() + 5 + self.nuisance_dims
    }

    pub fn offset_channel(&self) -> usize {
        self.class_count()
    }

    pub fn objectness_channel(&self) -> usize {
        self.class_count() + 4
    }

    pub fn catalog(&self) -> Result<ClassCatalog> {
        ClassCatalog::new(self.class_names.iter().cloned())
    }

    fn box_size_for(&self, class_id: usize) -> f64 {
        self.box_size.get(class_id).copied().unwrap_or(12.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.catalog()?;
        let nonneg = [
            ("zipf_exponent", self.zipf_exponent),
            ("size_jitter", self.size_jitter),
            ("proposal_jitter", self.proposal_jitter),
            ("hard_proposal_jitter", self.hard_proposal_jitter),
            ("class_noise", self.class_noise),
            ("hard_class_noise", self.hard_class_noise),
            ("offset_noise", self.offset_noise),
            ("hard_offset_noise", self.hard_offset_noise),
            ("objectness_noise", self.objectness_noise),
            ("offset_scale", self.offset_scale),
            ("target_cue", self.target_cue),
            ("clutter_jitter", self.clutter_jitter),
            ("clutter_signal", self.clutter_signal),
            ("crowd_gap", self.crowd_gap),
            ("target_extra_noise", self.target_extra_noise),
            ("target_signal_scale", self.target_signal_scale),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(self.extent.is_finite() && self.extent > 0.0) {
            return Err(Error::config("extent", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.crowd_fraction) {
            return Err(Error::config("crowd_fraction", "must lie in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(Error::config("hard_fraction", "must lie in [0,1]"));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::config("objects_min", "exceeds objects_max"));
        }
        if self.proposals_per_object == 0 {
            return Err(Error::config("proposals_per_object", "must be positive"));
        }
        if !self.box_size.is_empty() && self.box_size.len() != self.class_count() {
            return Err(Error::config("box_size", "needs one entry per class"));
        }
        if let Some(s) = self.box_size.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::config("box_size", format!("sizes must be positive, got {s}")));
        }
        if !self.domain_shift.is_empty() && self.domain_shift.len() != self.feature_dim() {
            return Err(Error::config(
                "domain_shift",
                format!("length {} != feature dimension {}", self.domain_shift.len(), self.feature_dim()),
            ));
        }
        if self.source_frames == 0 || self.target_train_frames == 0 || self.target_test_frames == 0 {
            return Err(Error::config("frames", "every split needs at least one frame"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// Source split with ground truth, and two target splits whose ground
/// truth is held back from the training-facing accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SceneConfig,
    source: Dataset,
    target_train: Dataset,
    target_test: Dataset,
}

impl SyntheticDataset {
    pub fn from_splits(config: SceneConfig, source: Dataset, target_train: Dataset, target_test: Dataset) -> Self {
        SyntheticDataset {
            config,
            source,
            target_train,
            target_test,
        }
    }

    pub fn source_labeled(&self) -> &Dataset {
        &self.source
    }

    /// Unlabeled target frames for self-training.
    pub fn target_unlabeled(&self) -> Dataset {
        self.target_train.without_ground_truth()
    }

    /// Held-out target frames with ground truth, for evaluation only.
    pub fn target_eval(&self) -> &Dataset {
        &self.target_test
    }

    /// Training target frames with ground truth, for pseudo-label audits.
    pub fn target_audit(&self) -> &Dataset {
        &self.target_train
    }
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("validated sigma")
}

struct Generator<'a> {
    cfg: &'a SceneConfig,
    rng: ChaCha8Rng,
    classes: WeightedIndex<f64>,
}

impl Generator<'_> {
    fn gt_box(&mut self, class_id: usize, beside: Option<&BBox>) -> BBox {
        let cfg = self.cfg;
        let side = cfg.box_size_for(class_id) * (normal(cfg.size_jitter).sample(&mut self.rng)).exp();
        let aspect = normal(0.2).sample(&mut self.rng).exp();
        let (w, h) = (side * aspect.sqrt(), side / aspect.sqrt());
        let (cx, cy) = match beside {
            Some(b) => {
                let (bx, by) = b.center();
                let sign = if self.rng.random_bool(0.5) { 1.0 } else { -1.0 };
                if self.rng.random_bool(0.5) {
                    (bx + sign * cfg.crowd_gap * b.width(), by)
                } else {
                    (bx, by + sign * cfg.crowd_gap * b.height())
                }
            }
            None => (self.rng.random_range(0.0..cfg.extent), self.rng.random_range(0.0..cfg.extent)),
        };
        BBox::from_center(cx, cy, w, h)
    }

    fn jitter(&mut self, g: &BBox, sigma: f64) -> BBox {
        let n = normal(sigma);
        let (cx, cy) = g.center();
        BBox::from_center(
            cx + n.sample(&mut self.rng) * g.width(),
            cy + n.sample(&mut self.rng) * g.height(),
            g.width() * n.sample(&mut self.rng).exp(),
            g.height() * n.sample(&mut self.rng).exp(),
        )
    }

    fn features(&mut self, class_id: Option<usize>, offsets: [f64; 4], hard: bool, domain: Domain) -> Vec<f64> {
        let signal = self.cfg.class_signal;
        self.features_with(class_id.map(|k| (k, signal)), class_id, class_id.is_some(), offsets, hard, domain)
    }

    /// `class` sets one class channel to a signal, `cue` the target-only cue
    /// and `object_like` the objectness channel.
    fn features_with(
        &mut self,
        class: Option<(usize, f64)>,
        cue: Option<usize>,
        object_like: bool,
        offsets: [f64; 4],
        hard: bool,
        domain: Domain,
    ) -> Vec<f64> {
        let cfg = self.cfg;
        let c = cfg.class_count();
        let mut x = vec![0.0; cfg.feature_dim()];
        let class_n = normal(if hard { cfg.hard_class_noise } else { cfg.class_noise });
        for (k, v) in x[..c].iter_mut().enumerate() {
            let signal = match class {
                Some((id, s)) if id == k && domain == Domain::Target => s * cfg.target_signal_scale,
                Some((id, s)) if id == k => s,
                _ => 0.0,
            };
            *v = signal + class_n.sample(&mut self.rng);
        }
        let off_n = normal(if hard { cfg.hard_offset_noise } else { cfg.offset_noise });
        for r in 0..4 {
            x[c + r] = cfg.offset_scale * (offsets[r] + off_n.sample(&mut self.rng));
        }
        let obj = if object_like { cfg.objectness_signal } else { -cfg.objectness_signal };
        x[c + 4] = obj + normal(cfg.objectness_noise).sample(&mut self.rng);
        for v in x[c + 5..].iter_mut() {
            *v = normal(1.0).sample(&mut self.rng);
        }
        if domain == Domain::Target {
            if let (Some(k), true) = (cue, cfg.nuisance_dims > 0) {
                x[c + 5 + k % cfg.nuisance_dims] += cfg.target_cue;
            }
            let extra = normal(cfg.target_extra_noise);
            for (j, v) in x.iter_mut().enumerate() {
                *v += cfg.domain_shift.get(j).copied().unwrap_or(0.0) + extra.sample(&mut self.rng);
            }
        }
        x
    }

    fn frame(&mut self, frame_id: String, domain: Domain) -> Result<(Frame, Vec<GtBox>)> {
        let cfg = self.cfg;
        let c = cfg.class_count();
        let n_obj = self.rng.random_range(cfg.objects_min..=cfg.objects_max);
        let mut gt = Vec::with_capacity(n_obj);
        let mut boxes = Vec::new();
        let mut feats = Vec::new();
        let unscored = ClassDistribution::uniform(c, UNSCORED_OBJECTNESS);
        for _ in 0..n_obj {
            let class_id = self.classes.sample(&mut self.rng);
            let crowded = cfg.crowd_fraction > 0.0 && self.rng.random_bool(cfg.crowd_fraction);
            let prev = if crowded { gt.last().map(|p: &GtBox| p.bbox) } else { None };
            let g = self.gt_box(class_id, prev.as_ref());
            let hard = self.rng.random_bool(cfg.hard_fraction);
            gt.push(GtBox { class_id, bbox: g });
            let sigma = if hard { cfg.hard_proposal_jitter } else { cfg.proposal_jitter };
            for _ in 0..cfg.proposals_per_object {
                let p = self.jitter(&g, sigma);
                let x = self.features(Some(class_id), encode(&p, &g), hard, domain);
                boxes.push(ScoredBox::from_dist(p, unscored.clone(), boxes.len()));
                feats.push(x);
            }
        }
        if domain == Domain::Target {
            for _ in 0..cfg.target_clutter {
                let look = self.classes.sample(&mut self.rng);
                let g = self.gt_box(look, None);
                for _ in 0..cfg.proposals_per_object {
                    let p = self.jitter(&g, cfg.clutter_jitter);
                    let offsets = encode(&p, &g);
                    let x = self.features_with(Some((look, cfg.clutter_signal)), None, true, offsets, true, domain);
                    boxes.push(ScoredBox::from_dist(p, unscored.clone(), boxes.len()));
                    feats.push(x);
                }
            }
        }
        for _ in 0..cfg.background_proposals {
            let side = cfg.box_size_for(self.rng.random_range(0..c)) * normal(0.4).sample(&mut self.rng).exp();
            let p = BBox::from_center(
                self.rng.random_range(0.0..cfg.extent),
                self.rng.random_range(0.0..cfg.extent),
                side,
                side * normal(0.3).sample(&mut self.rng).exp(),
            );
            let noise = normal(0.3);
            let offsets = [0; 4].map(|_| noise.sample(&mut self.rng));
            let x = self.features(None, offsets, false, domain);
            boxes.push(ScoredBox::from_dist(p, unscored.clone(), boxes.len()));
            feats.push(x);
        }
        Ok((Frame::new(frame_id, boxes, feats)?, gt))
    }

    fn split(&mut self, prefix: &str, n: usize, domain: Domain, catalog: &ClassCatalog) -> Result<Dataset> {
        let mut frames = Vec::with_capacity(n);
        let mut gts = Vec::with_capacity(n);
        for i in 0..n {
            let (f, g) = self.frame(format!("{prefix}-{i:06}"), domain)?;
            frames.push(f);
            gts.push(g);
        }
        Dataset::new(frames, catalog.clone(), Some(gts))
    }
}

pub fn class_weights(class_count: usize, zipf_exponent: f64) -> Vec<f64> {
    (0..class_count).map(|k| ((k + 1) as f64).powf(-zipf_exponent)).collect()
}

pub fn generate_dataset(config: &SceneConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let catalog = config.catalog()?;
    let classes = WeightedIndex::new(class_weights(config.class_count(), config.zipf_exponent))
        .map_err(|e| Error::config("zipf_exponent", e.to_string()))?;
    let mut g = Generator {
        cfg: config,
        rng: substream(config.seed, Stream::Data),
        classes,
    };
    let source = g.split("src", config.source_frames, Domain::Source, &catalog)?;
    let target_train = g.split("tgt-train", config.target_train_frames, Domain::Target, &catalog)?;
    let target_test = g.split("tgt-test", config.target_test_frames, Domain::Target, &catalog)?;
    Ok(SyntheticDataset {
        config: config.clone(),
        source,
        target_train,
        target_test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub init_scale: f64,
    /// Proposals at or above this IoU with a GT box are positives.
    pub positive_iou: f64,
    /// Proposals below this IoU with every GT box are background.
    pub negative_iou: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            learning_rate: 0.1,
            batch_size: 8,
            init_scale: 0.01,
            positive_iou: 0.5,
            negative_iou: 0.3,
            seed: 7,
        }
    }
}

/// Supervised terms for one labeled frame: positives get their GT class,
/// regression to the GT box and objectness 1; clear background gets
/// objectness 0; proposals in between are ignored.
pub fn supervised_terms(frame: &Frame, gt: &[GtBox], positive_iou: f64, negative_iou: f64) -> Vec<Term> {
    let mut terms = Vec::new();
    for (i, b) in frame.boxes.iter().enumerate() {
        let best = gt
            .iter()
            .map(|g| (g, iou(&b.bbox, &g.bbox)))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((g, v)) if v >= positive_iou => terms.push(Term {
                proposal: i,
                class: ClassTarget::Hard(g.class_id),
                reg: Some(RegressionTarget::between(&b.bbox, &g.bbox)),
                objectness: Some(1.0),
            }),
            Some((_, v)) if v >= negative_iou => {}
            _ => terms.push(Term {
                proposal: i,
                class: ClassTarget::None,
                reg: None,
                objectness: Some(0.0),
            }),
        }
    }
    terms
}

pub fn init_params(class_count: usize, dim: usize, init_scale: f64, seed: u64) -> Result<DetectorParams> {
    if !(init_scale.is_finite() && init_scale >= 0.0) {
        return Err(Error::config("init_scale", "must be finite and >= 0"));
    }
    let mut rng = substream(seed, Stream::Init);
    let n = normal(init_scale);
    let mut p = DetectorParams::zeros(class_count, dim);
    for v in p.as_mut_slice() {
        *v = n.sample(&mut rng);
    }
    Ok(p)
}

/// Minibatch gradient descent on labeled source frames.
pub fn pretrain_source(source: &Dataset, config: &PretrainConfig) -> Result<DetectorParams> {
    if config.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::config("learning_rate", "must be positive"));
    }
    let gt = source
        .ground_truth()
        .ok_or_else(|| Error::Data("source split has no ground truth".into()))?;
    let dim = source
        .feature_dim()
        .ok_or_else(|| Error::Data("source split has no proposals".into()))?;
    let mut params = init_params(source.catalog().len(), dim, config.init_scale, config.seed)?;
    let supervised: Vec<SupervisedFrame> = source
        .frames()
        .iter()
        .zip(gt)
        .map(|(f, g)| SupervisedFrame {
            features: f.features.clone(),
            terms: supervised_terms(f, g, config.positive_iou, config.negative_iou),
        })
        .collect();
    let mut order: Vec<usize> = (0..supervised.len()).collect();
    let mut rng = substream(config.seed, Stream::Batch);
    let mut step = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<SupervisedFrame> = chunk.iter().map(|&i| supervised[i].clone()).collect();
            let (loss, grad) = loss_and_grad(&params, &batch, true)?;
            if let Some(component) = loss.non_finite_component() {
                return Err(Error::NonFinite {
                    iteration: step,
                    component: format!("pretraining {component}"),
                });
            }
            params = params.add_scaled(&grad, -config.learning_rate)?;
            step += 1;
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig {
            source_frames: 20,
            target_train_frames: 10,
            target_test_frames: 10,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shapes() {
        let cfg = small();
        let d = generate_dataset(&cfg).unwrap();
        assert_eq!(d.source_labeled().frames().len(), 20);
        assert_eq!(d.source_labeled().feature_dim(), Some(cfg.feature_dim()));
        assert!(d.target_unlabeled().ground_truth().is_none());
        assert!(d.target_eval().ground_truth().is_some());
        for f in d.source_labeled().frames() {
            for (i, b) in f.boxes.iter().enumerate() {
                assert_eq!(b.proposal, i);
            }
        }
    }

    #[test]
    fn field_level_validation() {
        let mut cfg = small();
        cfg.hard_fraction = 1.5;
        let err = generate_dataset(&cfg).unwrap_err().to_string();
        assert!(err.contains("hard_fraction"), "{err}");
        let mut cfg = small();
        cfg.domain_shift = vec![1.0];
        assert!(generate_dataset(&cfg).unwrap_err().to_string().contains("domain_shift"));
        let mut cfg = small();
        cfg.objects_min = 9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_epochs_returns_init() {
        let d = generate_dataset(&small()).unwrap();
        let cfg = PretrainConfig { epochs: 0, ..PretrainConfig::default() };
        let p = pretrain_source(d.source_labeled(), &cfg).unwrap();
        let init = init_params(6, small().feature_dim(), cfg.init_scale, cfg.seed).unwrap();
        assert_eq!(p, init);
    }

    #[test]
    fn zipf_weights() {
        assert_eq!(class_weights(3, 0.0), vec![1.0, 1.0, 1.0]);
        let w = class_weights(3, 1.0);
        assert!(w[0] > w[1] && w[1] > w[2]);
    }
}
