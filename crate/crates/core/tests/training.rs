mod common;

use common::max_fd_error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use rpl_core::detector::{loss_and_grad, Block, DetectorParams};
use rpl_core::training::IterationTrace;
use rpl_core::{
    ema_update, generate_dataset, pretrain_source, self_train, student_step, PretrainConfig, SceneConfig,
    SyntheticDataset, TrainConfig,
};

fn small_scene() -> SceneConfig {
    SceneConfig {
        source_frames: 60,
        target_train_frames: 40,
        target_test_frames: 30,
        ..SceneConfig::default()
    }
}

fn setup() -> (SyntheticDataset, DetectorParams) {
    let data = generate_dataset(&small_scene()).unwrap();
    let pc = PretrainConfig { epochs: 5, ..PretrainConfig::default() };
    let source = pretrain_source(data.source_labeled(), &pc).unwrap();
    (data, source)
}

fn short(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        refresh_interval: 20,
        ..TrainConfig::default()
    }
}

fn random_params(seed: u64) -> DetectorParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut p = DetectorParams::zeros(4, 5);
    for v in p.as_mut_slice() {
        *v = n.sample(&mut rng);
    }
    p
}

#[test]
fn ema_with_frozen_student_decays_geometrically() {
    let student = random_params(1);
    for alpha in [0.9, 0.99, 0.999] {
        let mut teacher = random_params(2);
        let d0 = teacher.distance(&student).unwrap();
        // Past ~50 steps at alpha 0.9 the remaining distance nears the
        // rounding noise of the parameters themselves.
        for k in 1..=50 {
            teacher = ema_update(&teacher, &student, alpha).unwrap();
            let want = alpha.powi(k) * d0;
            let got = teacher.distance(&student).unwrap();
            assert!((got - want).abs() <= 1e-10 * want, "alpha {alpha} k {k}: {got} vs {want}");
        }
    }
}

#[test]
fn ema_rejects_bad_alpha_and_shapes() {
    let a = random_params(1);
    assert!(ema_update(&a, &a, 1.5).is_err());
    assert!(ema_update(&a, &DetectorParams::zeros(2, 5), 0.5).is_err());
}

#[test]
fn student_step_is_plain_descent() {
    let p = random_params(3);
    let g = random_params(4);
    let s = student_step(&p, &g, 0.01).unwrap();
    for ((s, p), g) in s.as_slice().iter().zip(p.as_slice()).zip(g.as_slice()) {
        assert_eq!(*s, p - 0.01 * g);
    }
}

#[test]
fn self_training_is_deterministic() {
    let (data, source) = setup();
    let cfg = short(40);
    let a = self_train(&cfg, &data.target_unlabeled(), Some(data.target_eval()), &source).unwrap();
    let b = self_train(&cfg, &data.target_unlabeled(), Some(data.target_eval()), &source).unwrap();
    assert_eq!(a, b);
    let other = self_train(&TrainConfig { rng_seed: 99, ..cfg }, &data.target_unlabeled(), None, &source).unwrap();
    assert_ne!(a.teacher, other.teacher);
}

#[test]
fn thresholds_refresh_on_the_interval() {
    let (data, source) = setup();
    let cfg = TrainConfig {
        iterations: 1200,
        refresh_interval: 500,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let out = self_train(&cfg, &data.target_unlabeled(), None, &source).unwrap();
    let at: Vec<usize> = out.report.thresholds.iter().map(|t| t.estimated_at).collect();
    assert_eq!(at, vec![0, 500, 1000]);
    assert_eq!(out.report.losses.len(), 1200);
}

#[test]
fn fixed_threshold_arm_never_estimates() {
    let (data, source) = setup();
    let cfg = TrainConfig {
        cate: false,
        fixed_delta: 0.7,
        ..short(45)
    };
    let mut tables_seen = Vec::new();
    let out = rpl_core::training::self_train_observed(&cfg, &data.target_unlabeled(), None, &source, |t: &IterationTrace| {
        tables_seen.push(t.table.clone());
    })
    .unwrap();
    assert_eq!(out.report.thresholds.len(), 1);
    assert!(tables_seen.iter().all(|t| t.thresholds.iter().all(Option::is_none) && t.fallback == 0.7));
}

#[test]
fn lpla_switch_controls_the_split() {
    let (data, source) = setup();
    let mut uncertain_with = 0;
    rpl_core::training::self_train_observed(&short(30), &data.target_unlabeled(), None, &source, |t: &IterationTrace| {
        uncertain_with += t.labels.iter().map(|l| l.uncertain.len()).sum::<usize>();
        for l in t.labels {
            assert!(l.certain.iter().all(|p| p.mean_iou > l.beta));
            assert!(l.uncertain.iter().all(|p| p.mean_iou <= l.beta));
        }
    })
    .unwrap();
    assert!(uncertain_with > 0);

    let cfg = TrainConfig { lpla: false, ..short(30) };
    rpl_core::training::self_train_observed(&cfg, &data.target_unlabeled(), None, &source, |t: &IterationTrace| {
        assert!(t.labels.iter().all(|l| l.uncertain.is_empty()));
    })
    .unwrap();
}

#[test]
fn observed_batches_have_correct_gradients() {
    let (data, source) = setup();
    let mut checked = 0;
    rpl_core::training::self_train_observed(&short(12), &data.target_unlabeled(), None, &source, |t: &IterationTrace| {
        if t.iteration % 4 != 0 {
            return;
        }
        let (_, grad) = loss_and_grad(t.student, t.batch, true).unwrap();
        let err = max_fd_error(t.student, t.batch, true, &grad, 1e-5, 1e-8);
        assert!(err < 1e-5, "iteration {} relative error {err}", t.iteration);
        checked += 1;
    })
    .unwrap();
    assert_eq!(checked, 3);
}

#[test]
fn objectness_head_stays_frozen() {
    let (data, source) = setup();
    let out = self_train(&short(30), &data.target_unlabeled(), None, &source).unwrap();
    for b in [Block::ObjectnessWeights, Block::ObjectnessBias] {
        assert_eq!(out.teacher.block(b), source.block(b));
        assert_eq!(out.student.block(b), source.block(b));
    }
    assert_ne!(out.teacher.block(Block::ClassWeights), source.block(Block::ClassWeights));
}

#[test]
fn training_never_needs_target_ground_truth() {
    let (data, source) = setup();
    let unlabeled = data.target_unlabeled();
    assert!(unlabeled.ground_truth().is_none());
    let out = self_train(&short(25), &unlabeled, None, &source).unwrap();
    assert!(out.report.evaluations.is_empty());
    assert!(out.teacher.is_finite());
}

#[test]
fn evaluation_follows_its_interval() {
    let (data, source) = setup();
    let cfg = TrainConfig {
        eval_interval: Some(10),
        ..short(25)
    };
    let out = self_train(&cfg, &data.target_unlabeled(), Some(data.target_eval()), &source).unwrap();
    let at: Vec<usize> = out.report.evaluations.iter().map(|e| e.iteration).collect();
    assert_eq!(at, vec![0, 10, 20, 25]);
}

#[test]
fn zero_iterations_returns_the_source_model() {
    let (data, source) = setup();
    let out = self_train(&short(0), &data.target_unlabeled(), None, &source).unwrap();
    assert_eq!(out.teacher, source);
    assert_eq!(out.student, source);
}

#[test]
fn invalid_configs_are_rejected() {
    let (data, source) = setup();
    let u = data.target_unlabeled();
    for cfg in [
        TrainConfig { alpha: 1.5, ..short(5) },
        TrainConfig { gamma: 0.0, ..short(5) },
        TrainConfig { refresh_interval: 0, ..short(5) },
        TrainConfig { batch_size: 0, ..short(5) },
    ] {
        assert!(self_train(&cfg, &u, None, &source).is_err());
    }
    assert!(self_train(&short(5), &u, None, &DetectorParams::zeros(2, 3)).is_err());
}

#[test]
fn ablation_arms_differ_only_in_their_branch() {
    let (data, source) = setup();
    let u = data.target_unlabeled();
    let first = |cfg: TrainConfig| {
        let mut seen = None;
        rpl_core::training::self_train_observed(&cfg, &u, None, &source, |t: &IterationTrace| {
            if t.iteration == 0 {
                let ids: Vec<String> = t.frame_ids.iter().map(|s| s.to_string()).collect();
                seen = Some((ids, t.table.clone(), t.filtered.to_vec(), t.labels.to_vec()));
            }
        })
        .unwrap();
        seen.unwrap()
    };
    let full = first(short(1));
    let no_lpla = first(TrainConfig { lpla: false, ..short(1) });
    assert_eq!((&full.0, &full.1, &full.2), (&no_lpla.0, &no_lpla.1, &no_lpla.2));
    for (a, b) in full.3.iter().zip(&no_lpla.3) {
        assert_eq!(a.certain.len() + a.uncertain.len(), b.certain.len());
    }

    let no_cate = first(TrainConfig { cate: false, ..short(1) });
    assert_eq!(full.0, no_cate.0);
    assert_ne!(full.1, no_cate.1);
}
