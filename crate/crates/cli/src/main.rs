//! `rpl`: command-line front end for the refined pseudo-labeling pipeline.
//!
//! Every run reads an optional TOML config (`--config`, or the path in
//! `RPL_CONFIG`); flags given on the command line override it. Failures
//! print one JSON line `{"error": kind, "message": ...}` on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use rpl_core::config::{ExperimentConfig, CONFIG_ENV};
use rpl_core::detector::{detect, predict};
use rpl_core::evaluation::audit_pseudo_labels;
use rpl_core::io::{self, ClassRef};
use rpl_core::thresholding::{collect_foreground_boxes, filter_by_threshold};
use rpl_core::training::evaluate_teacher;
use rpl_core::{
    estimate_thresholds, generate_dataset, mean_ap, partition, pretrain_source, self_train,
    ClassCatalog, Dataset, DetectorParams, ScoredBox, ThresholdTable,
};

const MANIFEST: &str = "manifest.json";
const SOURCE: &str = "source.jsonl";
const TARGET_TRAIN: &str = "target_train.jsonl";
const TARGET_TEST: &str = "target_test.jsonl";
const TARGET_AUDIT: &str = "target_audit.jsonl";

#[derive(Parser, Debug)]
#[command(name = "rpl", version, about = "Refined pseudo labeling for source-free detector adaptation")]
struct Cli {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic long-tailed source/target benchmark.
    Simulate(SimulateArgs),
    /// Train the source model on labeled source frames.
    Pretrain(PretrainArgs),
    /// Mean-teacher self-training on unlabeled target frames.
    Selftrain(SelftrainArgs),
    /// Per-class thresholds from foreground predictions.
    Thresholds(ThresholdsArgs),
    /// Per-class NMS keeping each survivor's suppressed group.
    Nms(NmsArgs),
    /// Filter and split pseudo labels into certain and uncertain ones.
    Assign(AssignArgs),
    /// Score predictions (mAP@IoU, PR curves) and audit pseudo labels.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct CatalogArgs {
    /// Comma-separated class names, in id order.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    /// Manifest written by `simulate`; supplies the class names.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    source_frames: Option<usize>,
    #[arg(long)]
    target_train_frames: Option<usize>,
    #[arg(long)]
    target_test_frames: Option<usize>,
    #[arg(long)]
    zipf_exponent: Option<f64>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Directory written by `simulate`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SelftrainArgs {
    /// Directory written by `simulate`.
    #[arg(long)]
    data: PathBuf,
    /// Source checkpoint; pretrained from the source split when omitted.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output directory for reports and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    refresh_interval: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use one fixed threshold for every class instead of adaptive ones.
    #[arg(long)]
    no_cate: bool,
    #[arg(long)]
    fixed_delta: Option<f64>,
    /// Treat every pseudo label as certain.
    #[arg(long)]
    no_lpla: bool,
}

#[derive(Args, Debug)]
struct ScoringArgs {
    /// Re-score proposals with this checkpoint instead of using stored scores.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    objectness_floor: Option<f64>,
}

#[derive(Args, Debug)]
struct ThresholdsArgs {
    /// JSONL of `{"class": .., "score": ..}` foreground records.
    #[arg(long, conflicts_with = "frames", required_unless_present = "frames")]
    foreground: Option<PathBuf>,
    /// JSONL frames whose proposals supply the foreground predictions.
    #[arg(long)]
    frames: Option<PathBuf>,
    #[command(flatten)]
    catalog: CatalogArgs,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long)]
    fallback: Option<f64>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct NmsArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    catalog: CatalogArgs,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long)]
    lone_mean_iou: Option<f64>,
}

#[derive(Args, Debug)]
struct AssignArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    catalog: CatalogArgs,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long)]
    lone_mean_iou: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    fallback: Option<f64>,
    #[arg(long)]
    no_cate: bool,
    #[arg(long)]
    fixed_delta: Option<f64>,
    #[arg(long)]
    no_lpla: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// JSONL frames carrying ground truth.
    #[arg(long)]
    gt: PathBuf,
    /// JSONL predictions, one record per frame.
    #[arg(long, conflicts_with = "ckpt", required_unless_present = "ckpt")]
    predictions: Option<PathBuf>,
    /// Detect with this checkpoint instead of reading predictions.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Pseudo labels from `assign`, audited against the ground truth.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    catalog: CatalogArgs,
    #[arg(long)]
    iou_threshold: Option<f64>,
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn read_manifest(path: &Path) -> Result<ClassCatalog> {
    let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let names: Vec<String> = serde_json::from_value(v["classes"].clone()).context("manifest field `classes`")?;
    Ok(ClassCatalog::new(names)?)
}

impl CatalogArgs {
    fn resolve(&self, cfg: &ExperimentConfig) -> Result<ClassCatalog> {
        if let Some(names) = &self.classes {
            return Ok(ClassCatalog::new(names.iter().cloned())?);
        }
        if let Some(m) = &self.manifest {
            return read_manifest(m);
        }
        Ok(cfg.scene.catalog()?)
    }
}

fn read_frames(path: &Path, catalog: &ClassCatalog) -> Result<Dataset> {
    io::read_dataset(path, catalog).with_context(|| format!("reading frames {}", path.display()))
}

fn read_ckpt(path: &Path) -> Result<DetectorParams> {
    io::read_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

/// Scored boxes per frame, from the stored proposal scores or a checkpoint.
fn scored_frames(data: &Dataset, ckpt: Option<&Path>) -> Result<Vec<Vec<ScoredBox>>> {
    match ckpt {
        Some(p) => {
            let params = read_ckpt(p)?;
            data.frames().iter().map(|f| Ok(predict(&params, f)?)).collect()
        }
        None => Ok(data.frames().iter().map(|f| f.boxes.clone()).collect()),
    }
}

fn foreground(frames: &[Vec<ScoredBox>], floor: f64) -> Vec<Vec<ScoredBox>> {
    frames
        .iter()
        .map(|bs| bs.iter().filter(|b| b.dist.objectness >= floor).cloned().collect())
        .collect()
}

fn write_out(out: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    match out {
        Some(p) => io::write_json(p, value)?,
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn simulate(cfg: ExperimentConfig, a: SimulateArgs) -> Result<()> {
    let mut scene = cfg.scene;
    set(&mut scene.seed, a.seed);
    set(&mut scene.source_frames, a.source_frames);
    set(&mut scene.target_train_frames, a.target_train_frames);
    set(&mut scene.target_test_frames, a.target_test_frames);
    set(&mut scene.zipf_exponent, a.zipf_exponent);
    let data = generate_dataset(&scene)?;
    fs::create_dir_all(&a.out)?;
    io::write_dataset(&a.out.join(SOURCE), data.source_labeled())?;
    io::write_dataset(&a.out.join(TARGET_TRAIN), &data.target_unlabeled())?;
    io::write_dataset(&a.out.join(TARGET_TEST), data.target_eval())?;
    io::write_dataset(&a.out.join(TARGET_AUDIT), data.target_audit())?;
    let manifest = json!({
        "classes": scene.class_names,
        "feature_dim": scene.feature_dim(),
        "files": {
            "source": SOURCE,
            "target_train": TARGET_TRAIN,
            "target_test": TARGET_TEST,
            "target_audit": TARGET_AUDIT,
        },
        "frames": {
            "source": scene.source_frames,
            "target_train": scene.target_train_frames,
            "target_test": scene.target_test_frames,
        },
        "scene": scene,
    });
    io::write_json(&a.out.join(MANIFEST), &manifest)?;
    println!("{}", json!({"out": a.out, "classes": scene.class_names.len()}));
    Ok(())
}

fn pretrain(cfg: ExperimentConfig, a: PretrainArgs) -> Result<()> {
    let mut pc = cfg.pretrain;
    set(&mut pc.epochs, a.epochs);
    set(&mut pc.learning_rate, a.learning_rate);
    set(&mut pc.batch_size, a.batch_size);
    set(&mut pc.seed, a.seed);
    let catalog = read_manifest(&a.data.join(MANIFEST))?;
    let source = read_frames(&a.data.join(SOURCE), &catalog)?;
    let params = pretrain_source(&source, &pc)?;
    io::write_checkpoint(&a.out, &params)?;
    let src = evaluate_teacher(&params, &source, &cfg.train, 0)?;
    println!("{}", json!({"checkpoint": a.out, "source_map": src.map}));
    Ok(())
}

fn selftrain(cfg: ExperimentConfig, a: SelftrainArgs) -> Result<()> {
    let mut tc = cfg.train.clone();
    set(&mut tc.iterations, a.iterations);
    set(&mut tc.alpha, a.alpha);
    set(&mut tc.gamma, a.gamma);
    set(&mut tc.beta, a.beta);
    set(&mut tc.refresh_interval, a.refresh_interval);
    set(&mut tc.batch_size, a.batch_size);
    set(&mut tc.rng_seed, a.seed);
    set(&mut tc.fixed_delta, a.fixed_delta);
    if a.eval_interval.is_some() {
        tc.eval_interval = a.eval_interval;
    }
    if a.no_cate {
        tc.cate = false;
    }
    if a.no_lpla {
        tc.lpla = false;
    }
    if a.fixed_delta.is_some() && tc.cate {
        bail!(rpl_core::Error::config("fixed_delta", "only applies together with --no-cate"));
    }
    tc.validate()?;

    let catalog = read_manifest(&a.data.join(MANIFEST))?;
    let target = read_frames(&a.data.join(TARGET_TRAIN), &catalog)?.without_ground_truth();
    let test_path = a.data.join(TARGET_TEST);
    let eval = if test_path.exists() { Some(read_frames(&test_path, &catalog)?) } else { None };
    let source = match &a.init {
        Some(p) => read_ckpt(p)?,
        None => pretrain_source(&read_frames(&a.data.join(SOURCE), &catalog)?, &cfg.pretrain)?,
    };

    let out = self_train(&tc, &target, eval.as_ref(), &source)?;
    fs::create_dir_all(&a.out)?;
    io::write_loss_csv(&a.out.join("losses.csv"), &out.report)?;
    io::write_json(&a.out.join("summary.json"), &io::report_summary(&out.report, &catalog))?;
    io::write_checkpoint(&a.out.join("teacher.ckpt"), &out.teacher)?;
    io::write_checkpoint(&a.out.join("student.ckpt"), &out.student)?;
    let effective = ExperimentConfig { train: tc, ..cfg };
    fs::write(a.out.join("config.toml"), effective.to_toml_string())?;
    println!(
        "{}",
        json!({
            "out": a.out,
            "initial_map": out.report.initial_map(),
            "final_map": out.report.final_map(),
        })
    );
    Ok(())
}

#[derive(Deserialize)]
struct ForegroundRecord {
    class: ClassRef,
    score: f64,
}

fn thresholds(cfg: ExperimentConfig, a: ThresholdsArgs) -> Result<()> {
    let catalog = a.catalog.resolve(&cfg)?;
    let mut fallback = cfg.train.fallback_threshold;
    set(&mut fallback, a.fallback);
    let mut floor = cfg.train.objectness_floor;
    set(&mut floor, a.scoring.objectness_floor);
    let fg: Vec<(usize, f64)> = if let Some(p) = &a.foreground {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                let r: ForegroundRecord = serde_json::from_str(l)
                    .map_err(|e| rpl_core::Error::Data(format!("{}:{}: {e}", p.display(), n + 1)))?;
                Ok((r.class.resolve(&catalog)?, r.score))
            })
            .collect::<Result<_>>()?
    } else {
        let frames = a.frames.as_ref().expect("clap requires frames");
        let data = read_frames(frames, &catalog)?;
        let scored = scored_frames(&data, a.scoring.ckpt.as_deref())?;
        collect_foreground_boxes(scored.iter().flatten(), floor)
    };
    let table = estimate_thresholds(&fg, &catalog, fallback)?;
    write_out(a.out.as_deref(), &table.to_json(&catalog))
}

fn nms(cfg: ExperimentConfig, a: NmsArgs) -> Result<()> {
    let catalog = a.catalog.resolve(&cfg)?;
    let mut tc = cfg.train;
    set(&mut tc.nms_iou_threshold, a.iou_threshold);
    set(&mut tc.lone_mean_iou, a.lone_mean_iou);
    set(&mut tc.objectness_floor, a.scoring.objectness_floor);
    tc.validate()?;
    let data = read_frames(&a.frames, &catalog)?;
    let scored = foreground(&scored_frames(&data, a.scoring.ckpt.as_deref())?, tc.objectness_floor);
    let records: Vec<_> = data
        .frames()
        .iter()
        .zip(&scored)
        .map(|(f, bs)| {
            let groups = rpl_core::suppression::group_nms_with(bs, tc.nms_iou_threshold, tc.lone_mean_iou);
            io::nms_record(&f.frame_id, &groups, &catalog)
        })
        .collect();
    io::write_nms(&a.out, &records)?;
    let survivors: usize = records.iter().map(|r| r.pseudo.len()).sum();
    println!("{}", json!({"frames": records.len(), "survivors": survivors}));
    Ok(())
}

fn assign(cfg: ExperimentConfig, a: AssignArgs) -> Result<()> {
    let catalog = a.catalog.resolve(&cfg)?;
    let mut tc = cfg.train;
    set(&mut tc.nms_iou_threshold, a.iou_threshold);
    set(&mut tc.lone_mean_iou, a.lone_mean_iou);
    set(&mut tc.objectness_floor, a.scoring.objectness_floor);
    set(&mut tc.beta, a.beta);
    set(&mut tc.fallback_threshold, a.fallback);
    set(&mut tc.fixed_delta, a.fixed_delta);
    if a.no_cate {
        tc.cate = false;
    }
    if a.no_lpla {
        tc.lpla = false;
    }
    tc.validate()?;
    let data = read_frames(&a.frames, &catalog)?;
    let scored = foreground(&scored_frames(&data, a.scoring.ckpt.as_deref())?, tc.objectness_floor);
    let table = if tc.cate {
        let fg = collect_foreground_boxes(scored.iter().flatten(), tc.objectness_floor);
        estimate_thresholds(&fg, &catalog, tc.fallback_threshold)?
    } else {
        ThresholdTable::fixed(catalog.len(), tc.fixed_delta)
    };
    let beta = if tc.lpla { tc.beta } else { f64::NEG_INFINITY };
    let mut records = Vec::new();
    let (mut certain, mut uncertain) = (0, 0);
    for (f, bs) in data.frames().iter().zip(&scored) {
        let groups = rpl_core::suppression::group_nms_with(bs, tc.nms_iou_threshold, tc.lone_mean_iou);
        let labels = partition(&filter_by_threshold(&groups, &table)?, beta);
        certain += labels.certain.len();
        uncertain += labels.uncertain.len();
        records.extend(io::label_records(&f.frame_id, &labels, &catalog));
    }
    io::write_labels(&a.out, &records)?;
    println!("{}", json!({"certain": certain, "uncertain": uncertain, "thresholds": table.to_json(&catalog)}));
    Ok(())
}

fn eval(cfg: ExperimentConfig, a: EvalArgs) -> Result<()> {
    let catalog = a.catalog.resolve(&cfg)?;
    let mut iou_threshold = rpl_core::evaluation::DEFAULT_MATCH_IOU;
    set(&mut iou_threshold, a.iou_threshold);
    if !(0.0..=1.0).contains(&iou_threshold) {
        bail!(rpl_core::Error::config("iou_threshold", "must lie in [0,1]"));
    }
    let data = read_frames(&a.gt, &catalog)?;
    let gt = data
        .ground_truth()
        .ok_or_else(|| rpl_core::Error::Data(format!("{} carries no ground truth", a.gt.display())))?;
    let frame_ids: Vec<String> = data.frames().iter().map(|f| f.frame_id.clone()).collect();
    let preds: Vec<Vec<ScoredBox>> = if let Some(p) = &a.predictions {
        let mut by_id: std::collections::HashMap<String, Vec<ScoredBox>> =
            io::read_predictions(p, &catalog)?.into_iter().collect();
        frame_ids.iter().map(|id| by_id.remove(id).unwrap_or_default()).collect()
    } else {
        let params = read_ckpt(a.ckpt.as_deref().expect("clap requires ckpt"))?;
        data.frames()
            .iter()
            .map(|f| Ok(detect(&params, f, cfg.train.objectness_floor, cfg.train.nms_iou_threshold)?))
            .collect::<Result<_>>()?
    };
    let result = mean_ap(&preds, gt, &catalog, iou_threshold)?;
    fs::create_dir_all(&a.out)?;
    io::write_json(&a.out.join("ap.json"), &result.to_json(&catalog))?;
    for c in &result.per_class {
        let name = catalog.name(c.class_id).unwrap_or("class");
        io::write_pr_curve(&a.out.join(format!("pr_{name}.csv")), c)?;
    }
    let mut summary = json!({"map": result.map_50, "iou_threshold": iou_threshold});
    if let Some(lp) = &a.labels {
        let records = io::read_labels(lp)?;
        let sets = io::labels_by_frame(&records, &frame_ids, &catalog, cfg.train.beta)?;
        let audit = audit_pseudo_labels(&sets, gt, catalog.len(), iou_threshold)?;
        io::write_json(&a.out.join("audit.json"), &audit.to_json(&catalog))?;
        summary["dispersion"] = json!(audit.dispersion);
    }
    println!("{summary}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => simulate(cfg, a),
        Command::Pretrain(a) => pretrain(cfg, a),
        Command::Selftrain(a) => selftrain(cfg, a),
        Command::Thresholds(a) => thresholds(cfg, a),
        Command::Nms(a) => nms(cfg, a),
        Command::Assign(a) => assign(cfg, a),
        Command::Eval(a) => eval(cfg, a),
    }
}

fn error_line(kind: &str, message: &str) -> String {
    json!({"error": kind, "message": message}).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("{}", error_line("usage", &first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| {
                    if let Some(core) = c.downcast_ref::<rpl_core::Error>() {
                        Some(core.kind())
                    } else if c.is::<std::io::Error>() {
                        Some("io")
                    } else if c.is::<serde_json::Error>() {
                        Some("json")
                    } else {
                        None
                    }
                })
                .unwrap_or("error");
            let message = e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ");
            eprintln!("{}", error_line(kind, &message));
            ExitCode::FAILURE
        }
    }
}
