//! Mean-teacher self-training loop.
//!
//! Each iteration the teacher scores a weakly perturbed view of a batch of
//! target frames; its predictions go through group NMS, the per-class
//! threshold filter and the certain/uncertain split. The student is
//! trained on a strongly perturbed view of the same frames and the teacher
//! follows the student by EMA.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assignment::{match_proposals, partition, PseudoLabelSet, DEFAULT_BETA};
use crate::detector::{detect, loss_and_grad, predict, predict_with, proposal_boxes, ClassTarget, DetectorParams, SupervisedFrame, Term};
use crate::error::{Error, Result};
use crate::evaluation::{mean_ap, DEFAULT_MATCH_IOU};
use crate::geometry::BBox;
use crate::losses::{LossBreakdown, RegressionTarget};
use crate::model::{Dataset, Frame, ScoredBox};
use crate::rng::{substream, Stream};
use crate::suppression::{group_nms_with, PseudoBox, DEFAULT_LONE_MEAN_IOU, DEFAULT_NMS_IOU_THRESHOLD};
use crate::thresholding::{
    collect_foreground_boxes, estimate_thresholds, filter_by_threshold, should_refresh, ThresholdTable,
    DEFAULT_FALLBACK_THRESHOLD, DEFAULT_OBJECTNESS_FLOOR, DEFAULT_REFRESH_INTERVAL,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub refresh_interval: usize,
    pub nms_iou_threshold: f64,
    pub objectness_floor: f64,
    pub fallback_threshold: f64,
    pub lone_mean_iou: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    pub weak_noise_sigma: f64,
    pub strong_noise_sigma: f64,
    /// Divide loss sums by the number of supervised proposals.
    pub mean_reduction: bool,
    /// Frames used to estimate thresholds; `None` uses every training frame.
    pub estimation_frames: Option<usize>,
    /// Teacher evaluation cadence; `None` follows `refresh_interval`.
    pub eval_interval: Option<usize>,
    /// Adaptive per-class thresholds; when off, `fixed_delta` applies to every class.
    pub cate: bool,
    pub fixed_delta: f64,
    /// Certain/uncertain split; when off, every pseudo label is certain.
    pub lpla: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.99,
            gamma: 0.001,
            beta: DEFAULT_BETA,
            refresh_interval: DEFAULT_REFRESH_INTERVAL,
            nms_iou_threshold: DEFAULT_NMS_IOU_THRESHOLD,
            objectness_floor: DEFAULT_OBJECTNESS_FLOOR,
            fallback_threshold: DEFAULT_FALLBACK_THRESHOLD,
            lone_mean_iou: DEFAULT_LONE_MEAN_IOU,
            iterations: 4000,
            batch_size: 4,
            rng_seed: 7,
            weak_noise_sigma: 0.02,
            strong_noise_sigma: 0.2,
            mean_reduction: true,
            estimation_frames: None,
            eval_interval: None,
            cate: true,
            fixed_delta: 0.9,
            lpla: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("nms_iou_threshold", self.nms_iou_threshold),
            ("objectness_floor", self.objectness_floor),
            ("fallback_threshold", self.fallback_threshold),
            ("lone_mean_iou", self.lone_mean_iou),
            ("fixed_delta", self.fixed_delta),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, format!("must lie in [0,1], got {v}")));
            }
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::config("gamma", "must be positive"));
        }
        if self.refresh_interval == 0 {
            return Err(Error::config("refresh_interval", "must be positive"));
        }
        if self.eval_interval == Some(0) {
            return Err(Error::config("eval_interval", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.weak_noise_sigma >= 0.0 && self.weak_noise_sigma.is_finite()) {
            return Err(Error::config("weak_noise_sigma", "must be finite and >= 0"));
        }
        if !(self.strong_noise_sigma.is_finite() && self.weak_noise_sigma <= self.strong_noise_sigma) {
            return Err(Error::config("strong_noise_sigma", "must be finite and >= weak_noise_sigma"));
        }
        Ok(())
    }

    pub fn eval_every(&self) -> usize {
        self.eval_interval.unwrap_or(self.refresh_interval)
    }
}

/// `params - gamma * grad`.
pub fn student_step(params: &DetectorParams, grad: &DetectorParams, gamma: f64) -> Result<DetectorParams> {
    params.add_scaled(grad, -gamma)
}

/// `alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &DetectorParams, student: &DetectorParams, alpha: f64) -> Result<DetectorParams> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", format!("must lie in [0,1], got {alpha}")));
    }
    // Shape check through a zero-scaled add.
    let mut out = teacher.add_scaled(student, 0.0)?;
    for (t, s) in out.as_mut_slice().iter_mut().zip(student.as_slice()) {
        *t += (1.0 - alpha) * (s - *t);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLoss {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub certain: usize,
    pub uncertain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of completed student updates when the teacher was scored.
    pub iteration: usize,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub iteration: usize,
    pub certain: Vec<usize>,
    pub uncertain: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<IterationLoss>,
    pub evaluations: Vec<EvalRecord>,
    pub thresholds: Vec<ThresholdTable>,
    /// Per-class pseudo-label counts accumulated between refreshes.
    pub label_counts: Vec<LabelCounts>,
}

impl TrainReport {
    pub fn final_map(&self) -> Option<f64> {
        self.evaluations.last().map(|e| e.map)
    }

    pub fn initial_map(&self) -> Option<f64> {
        self.evaluations.first().map(|e| e.map)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub teacher: DetectorParams,
    pub student: DetectorParams,
}

/// Intermediate state of one iteration, handed to an observer.
pub struct IterationTrace<'a> {
    pub iteration: usize,
    pub frame_ids: Vec<&'a str>,
    pub teacher: &'a DetectorParams,
    pub student: &'a DetectorParams,
    pub table: &'a ThresholdTable,
    /// Pseudo boxes after NMS and the threshold filter, per frame.
    pub filtered: &'a [Vec<PseudoBox>],
    pub labels: &'a [PseudoLabelSet],
    pub batch: &'a [SupervisedFrame],
}

/// Pseudo labels for one frame as the teacher sees it.
pub fn pseudo_labels_for(
    teacher: &DetectorParams,
    proposals: &[BBox],
    features: &[Vec<f64>],
    table: &ThresholdTable,
    config: &TrainConfig,
) -> Result<(Vec<PseudoBox>, PseudoLabelSet)> {
    let fg: Vec<ScoredBox> = predict_with(teacher, proposals, features)?
        .into_iter()
        .filter(|b| b.dist.objectness >= config.objectness_floor)
        .collect();
    let grouped = group_nms_with(&fg, config.nms_iou_threshold, config.lone_mean_iou);
    let filtered = filter_by_threshold(&grouped, table)?;
    let beta = if config.lpla { config.beta } else { f64::NEG_INFINITY };
    let labels = partition(&filtered, beta);
    Ok((filtered, labels))
}

/// Student supervision from pseudo labels. Certain labels supervise every
/// proposal of their NMS group with the label class and a regression
/// target towards the pseudo box; uncertain labels supervise their
/// matched proposals with the teacher distribution only.
pub fn label_terms(frame_id: &str, proposals: &[BBox], labels: &PseudoLabelSet) -> Vec<Term> {
    let mut terms = Vec::new();
    for p in &labels.certain {
        for m in p.members() {
            terms.push(Term {
                proposal: m.proposal,
                class: ClassTarget::Hard(p.class_id()),
                reg: Some(RegressionTarget::between(&proposals[m.proposal], &p.survivor.bbox)),
                objectness: None,
            });
        }
    }
    for m in match_proposals(frame_id, &labels.uncertain) {
        for (idx, dist) in m.proposal_indices.iter().zip(&m.teacher_dists) {
            terms.push(Term {
                proposal: *idx,
                class: ClassTarget::Soft(dist.probs.clone()),
                reg: None,
                objectness: None,
            });
        }
    }
    terms
}

/// Thresholds from the teacher's foreground predictions on `frames`.
pub fn estimate_from_teacher(
    teacher: &DetectorParams,
    frames: &[Frame],
    dataset: &Dataset,
    config: &TrainConfig,
    iteration: usize,
) -> Result<ThresholdTable> {
    let mut boxes = Vec::new();
    for f in frames {
        boxes.extend(predict(teacher, f)?);
    }
    let fg = collect_foreground_boxes(&boxes, config.objectness_floor);
    Ok(estimate_thresholds(&fg, dataset.catalog(), config.fallback_threshold)?.with_iteration(iteration))
}

pub fn evaluate_teacher(teacher: &DetectorParams, eval: &Dataset, config: &TrainConfig, iteration: usize) -> Result<EvalRecord> {
    let gt = eval
        .ground_truth()
        .ok_or_else(|| Error::Data("evaluation split has no ground truth".into()))?;
    let preds = eval
        .frames()
        .iter()
        .map(|f| detect(teacher, f, config.objectness_floor, config.nms_iou_threshold))
        .collect::<Result<Vec<_>>>()?;
    let r = mean_ap(&preds, gt, eval.catalog(), DEFAULT_MATCH_IOU)?;
    Ok(EvalRecord {
        iteration,
        map: r.map_50,
        per_class_ap: r.per_class_ap(),
    })
}

fn noisy_view(features: &[Vec<f64>], noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    features
        .iter()
        .map(|x| x.iter().map(|v| v + noise.sample(rng)).collect())
        .collect()
}

pub fn self_train(
    config: &TrainConfig,
    dataset: &Dataset,
    eval: Option<&Dataset>,
    source_params: &DetectorParams,
) -> Result<TrainOutcome> {
    self_train_observed(config, dataset, eval, source_params, |_| {})
}

/// [`self_train`] with a callback that sees every iteration's intermediates.
pub fn self_train_observed(
    config: &TrainConfig,
    dataset: &Dataset,
    eval: Option<&Dataset>,
    source_params: &DetectorParams,
    mut observer: impl FnMut(&IterationTrace),
) -> Result<TrainOutcome> {
    config.validate()?;
    if !source_params.is_finite() {
        return Err(Error::Data("source parameters are not finite".into()));
    }
    let frames = dataset.frames();
    if frames.is_empty() {
        return Err(Error::Data("no target frames".into()));
    }
    if let Some(d) = dataset.feature_dim() {
        if d != source_params.dim() {
            return Err(Error::Dimension {
                expected: source_params.dim(),
                got: d,
                context: "dataset features vs detector".into(),
            });
        }
    }
    if source_params.class_count() != dataset.catalog().len() {
        return Err(Error::Dimension {
            expected: dataset.catalog().len(),
            got: source_params.class_count(),
            context: "catalog vs detector classes".into(),
        });
    }
    let class_count = dataset.catalog().len();
    let estimation = &frames[..config.estimation_frames.unwrap_or(frames.len()).min(frames.len())];

    let mut teacher = source_params.clone();
    let mut student = source_params.clone();
    let mut report = TrainReport::default();
    if config.iterations == 0 {
        return Ok(TrainOutcome { report, teacher, student });
    }

    let mut batch_rng = substream(config.rng_seed, Stream::Batch);
    let mut weak_rng = substream(config.rng_seed, Stream::NoiseWeak);
    let mut strong_rng = substream(config.rng_seed, Stream::NoiseStrong);
    let weak = Normal::new(0.0, config.weak_noise_sigma).map_err(|e| Error::config("weak_noise_sigma", e.to_string()))?;
    let strong = Normal::new(0.0, config.strong_noise_sigma).map_err(|e| Error::config("strong_noise_sigma", e.to_string()))?;

    let mut table = if config.cate {
        estimate_from_teacher(&teacher, estimation, dataset, config, 0)?
    } else {
        ThresholdTable::fixed(class_count, config.fixed_delta)
    };
    report.thresholds.push(table.clone());
    if let Some(ev) = eval {
        report.evaluations.push(evaluate_teacher(&teacher, ev, config, 0)?);
    }
    let eval_every = config.eval_every();
    let mut counts = LabelCounts {
        iteration: 0,
        certain: vec![0; class_count],
        uncertain: vec![0; class_count],
    };

    for t in 0..config.iterations {
        if t > 0 && config.cate && should_refresh(t, config.refresh_interval)? {
            table = estimate_from_teacher(&teacher, estimation, dataset, config, t)?;
            report.thresholds.push(table.clone());
        }
        if t > 0 && should_refresh(t, config.refresh_interval)? {
            let next = LabelCounts {
                iteration: t,
                certain: vec![0; class_count],
                uncertain: vec![0; class_count],
            };
            report.label_counts.push(std::mem::replace(&mut counts, next));
        }

        let picks: Vec<usize> = (0..config.batch_size).map(|_| batch_rng.random_range(0..frames.len())).collect();
        let mut batch = Vec::with_capacity(picks.len());
        let mut all_filtered = Vec::with_capacity(picks.len());
        let mut all_labels = Vec::with_capacity(picks.len());
        let (mut n_certain, mut n_uncertain) = (0, 0);
        for &i in &picks {
            let frame = &frames[i];
            let proposals = proposal_boxes(frame);
            let weak_view = noisy_view(&frame.features, &weak, &mut weak_rng);
            let strong_view = noisy_view(&frame.features, &strong, &mut strong_rng);
            let (filtered, labels) = pseudo_labels_for(&teacher, &proposals, &weak_view, &table, config)?;
            for p in &labels.certain {
                counts.certain[p.class_id()] += 1;
            }
            for p in &labels.uncertain {
                counts.uncertain[p.class_id()] += 1;
            }
            n_certain += labels.certain.len();
            n_uncertain += labels.uncertain.len();
            batch.push(SupervisedFrame {
                features: strong_view,
                terms: label_terms(&frame.frame_id, &proposals, &labels),
            });
            all_filtered.push(filtered);
            all_labels.push(labels);
        }

        observer(&IterationTrace {
            iteration: t,
            frame_ids: picks.iter().map(|&i| frames[i].frame_id.as_str()).collect(),
            teacher: &teacher,
            student: &student,
            table: &table,
            filtered: &all_filtered,
            labels: &all_labels,
            batch: &batch,
        });

        let (loss, grad) = loss_and_grad(&student, &batch, config.mean_reduction)?;
        if let Some(component) = loss.non_finite_component() {
            return Err(Error::NonFinite {
                iteration: t,
                component: component.to_string(),
            });
        }
        student = student_step(&student, &grad, config.gamma)?;
        if !student.is_finite() {
            return Err(Error::NonFinite {
                iteration: t,
                component: "student parameters".into(),
            });
        }
        teacher = ema_update(&teacher, &student, config.alpha)?;
        report.losses.push(IterationLoss {
            iteration: t,
            loss,
            certain: n_certain,
            uncertain: n_uncertain,
        });

        let done = t + 1;
        if let Some(ev) = eval {
            if done % eval_every == 0 || done == config.iterations {
                report.evaluations.push(evaluate_teacher(&teacher, ev, config, done)?);
            }
        }
    }
    report.label_counts.push(counts);
    Ok(TrainOutcome { report, teacher, student })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(values: &[f64]) -> DetectorParams {
        // C = 1, d = 1 gives 1 + 1 + 1 + 1 + 4 + 4 = 12 entries.
        let mut data = vec![0.0; 12];
        for (d, v) in data.iter_mut().zip(values.iter().cycle()) {
            *d = *v;
        }
        DetectorParams::from_flat(1, 1, data).unwrap()
    }

    #[test]
    fn student_step_examples() {
        let p = params(&[1.0]);
        let g = params(&[2.0]);
        let z = params(&[0.0]);
        assert_eq!(student_step(&p, &z, 0.1).unwrap(), p);
        assert_eq!(student_step(&p, &g, 0.0).unwrap(), p);
        let s = student_step(&p, &g, 0.1).unwrap();
        assert!(s.as_slice().iter().all(|v| (v - 0.8).abs() < 1e-15));
    }

    #[test]
    fn ema_examples() {
        let t = params(&[0.3, -1.0]);
        let s = params(&[2.0, 5.0]);
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);
        assert_eq!(ema_update(&s, &s, 0.37).unwrap(), s);
        let e = ema_update(&params(&[0.0]), &params(&[1.0]), 0.99).unwrap();
        assert!(e.as_slice().iter().all(|v| (v - 0.01).abs() < 1e-15));
        assert!(ema_update(&t, &s, 1.5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { weak_noise_sigma: 0.5, strong_noise_sigma: 0.1, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { refresh_interval: 0, ..TrainConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("refresh_interval"));
        let bad = TrainConfig { gamma: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn documented_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.alpha, c.beta, c.gamma, c.refresh_interval), (0.99, 0.85, 0.001, 500));
    }
}
