//! File formats: JSON Lines frames and predictions, pseudo-label dumps,
//! detector checkpoints and training reports.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assignment::PseudoLabelSet;
use crate::detector::{Block, DetectorParams};
use crate::error::{Error, Result};
use crate::evaluation::ClassEval;
use crate::geometry::BBox;
use crate::model::{ClassCatalog, ClassDistribution, Dataset, Frame, GtBox, ScoredBox};
use crate::suppression::PseudoBox;
use crate::training::TrainReport;

/// A class given either by catalog index or by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassRef {
    Index(usize),
    Name(String),
}

impl ClassRef {
    pub fn resolve(&self, catalog: &ClassCatalog) -> Result<usize> {
        match self {
            ClassRef::Index(i) => catalog.check(*i).map(|_| *i),
            ClassRef::Name(n) => catalog
                .id_of(n)
                .ok_or_else(|| Error::Data(format!("unknown class {n:?}"))),
        }
    }

    pub fn named(catalog: &ClassCatalog, class_id: usize) -> Self {
        match catalog.name(class_id) {
            Some(n) => ClassRef::Name(n.to_string()),
            None => ClassRef::Index(class_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalRecord {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub objectness: f64,
    pub probs: Vec<f64>,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub class: ClassRef,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame_id: String,
    pub proposals: Vec<ProposalRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<Vec<GtRecord>>,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn frame_to_record(frame: &Frame, gt: Option<&[GtBox]>, catalog: &ClassCatalog) -> FrameRecord {
    FrameRecord {
        frame_id: frame.frame_id.clone(),
        proposals: frame
            .boxes
            .iter()
            .zip(&frame.features)
            .map(|(b, x)| ProposalRecord {
                bbox: b.bbox,
                objectness: b.dist.objectness,
                probs: b.dist.probs.clone(),
                features: x.clone(),
            })
            .collect(),
        gt: gt.map(|g| {
            g.iter()
                .map(|g| GtRecord {
                    class: ClassRef::named(catalog, g.class_id),
                    bbox: g.bbox,
                })
                .collect()
        }),
    }
}

pub fn record_to_frame(rec: FrameRecord, catalog: &ClassCatalog) -> Result<(Frame, Option<Vec<GtBox>>)> {
    let mut boxes = Vec::with_capacity(rec.proposals.len());
    let mut features = Vec::with_capacity(rec.proposals.len());
    for (i, p) in rec.proposals.into_iter().enumerate() {
        let dist = ClassDistribution::new(p.probs, p.objectness)
            .map_err(|e| Error::Data(format!("frame {} proposal {i}: {e}", rec.frame_id)))?;
        boxes.push(ScoredBox::from_dist(p.bbox, dist, i));
        features.push(p.features);
    }
    let gt = rec
        .gt
        .map(|g| {
            g.into_iter()
                .map(|g| Ok(GtBox { class_id: g.class.resolve(catalog)?, bbox: g.bbox }))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok((Frame::new(rec.frame_id, boxes, features)?, gt))
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let gt = dataset.ground_truth();
    write_lines(
        path,
        dataset
            .frames()
            .iter()
            .enumerate()
            .map(|(i, f)| frame_to_record(f, gt.map(|g| g[i].as_slice()), dataset.catalog())),
    )
}

/// Reads a frames file. Ground truth is attached only when every record
/// carries a `gt` field.
pub fn read_dataset(path: &Path, catalog: &ClassCatalog) -> Result<Dataset> {
    let records: Vec<FrameRecord> = read_lines(path)?;
    let mut frames = Vec::with_capacity(records.len());
    let mut gts = Vec::with_capacity(records.len());
    for r in records {
        let (f, g) = record_to_frame(r, catalog)?;
        frames.push(f);
        gts.push(g);
    }
    let gt = if !gts.is_empty() && gts.iter().all(Option::is_some) {
        Some(gts.into_iter().map(Option::unwrap).collect())
    } else {
        None
    };
    Dataset::new(frames, catalog.clone(), gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub class: ClassRef,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub frame_id: String,
    pub detections: Vec<DetectionRecord>,
}

/// A scored box carrying only a class and score; the remaining mass is
/// spread over the other classes.
pub fn detection_box(bbox: BBox, class_id: usize, score: f64, class_count: usize, proposal: usize) -> Result<ScoredBox> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::Data(format!("score {score} outside [0,1]")));
    }
    let rest = if class_count > 1 { (1.0 - score) / (class_count - 1) as f64 } else { 0.0 };
    let mut probs = vec![rest; class_count];
    probs[class_id] = score;
    Ok(ScoredBox {
        bbox,
        class_id,
        score,
        dist: ClassDistribution { probs, objectness: 1.0 },
        proposal,
    })
}

pub fn write_predictions(path: &Path, frame_ids: &[String], preds: &[Vec<ScoredBox>], catalog: &ClassCatalog) -> Result<()> {
    write_lines(
        path,
        frame_ids.iter().zip(preds).map(|(id, ps)| PredictionRecord {
            frame_id: id.clone(),
            detections: ps
                .iter()
                .map(|b| DetectionRecord {
                    class: ClassRef::named(catalog, b.class_id),
                    bbox: b.bbox,
                    score: b.score,
                })
                .collect(),
        }),
    )
}

/// Predictions keyed by frame id, in file order.
pub fn read_predictions(path: &Path, catalog: &ClassCatalog) -> Result<Vec<(String, Vec<ScoredBox>)>> {
    let recs: Vec<PredictionRecord> = read_lines(path)?;
    recs.into_iter()
        .map(|r| {
            let boxes = r
                .detections
                .iter()
                .enumerate()
                .map(|(i, d)| detection_box(d.bbox, d.class.resolve(catalog)?, d.score, catalog.len(), i))
                .collect::<Result<Vec<_>>>()?;
            Ok((r.frame_id, boxes))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoBoxRecord {
    pub class: ClassRef,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub mean_iou: f64,
    pub proposal: usize,
    pub suppressed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmsRecord {
    pub frame_id: String,
    pub pseudo: Vec<PseudoBoxRecord>,
}

pub fn nms_record(frame_id: &str, pseudo: &[PseudoBox], catalog: &ClassCatalog) -> NmsRecord {
    NmsRecord {
        frame_id: frame_id.to_string(),
        pseudo: pseudo
            .iter()
            .map(|p| PseudoBoxRecord {
                class: ClassRef::named(catalog, p.class_id()),
                bbox: p.survivor.bbox,
                score: p.score(),
                mean_iou: p.mean_iou,
                proposal: p.survivor.proposal,
                suppressed: p.suppressed.iter().map(|s| s.proposal).collect(),
            })
            .collect(),
    }
}

pub fn write_nms(path: &Path, records: &[NmsRecord]) -> Result<()> {
    write_lines(path, records)
}

/// One pseudo label per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub frame_id: String,
    pub class: ClassRef,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub mean_iou: f64,
    pub certain: bool,
}

pub fn label_records(frame_id: &str, labels: &PseudoLabelSet, catalog: &ClassCatalog) -> Vec<LabelRecord> {
    let rec = |p: &PseudoBox, certain| LabelRecord {
        frame_id: frame_id.to_string(),
        class: ClassRef::named(catalog, p.class_id()),
        bbox: p.survivor.bbox,
        score: p.score(),
        mean_iou: p.mean_iou,
        certain,
    };
    labels
        .certain
        .iter()
        .map(|p| rec(p, true))
        .chain(labels.uncertain.iter().map(|p| rec(p, false)))
        .collect()
}

pub fn write_labels(path: &Path, records: &[LabelRecord]) -> Result<()> {
    write_lines(path, records)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    read_lines(path)
}

/// Groups label records into one set per listed frame; frames without
/// labels get an empty set.
pub fn labels_by_frame(records: &[LabelRecord], frame_ids: &[String], catalog: &ClassCatalog, beta: f64) -> Result<Vec<PseudoLabelSet>> {
    let index: std::collections::HashMap<&str, usize> =
        frame_ids.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect();
    let mut sets = vec![
        PseudoLabelSet {
            beta,
            ..PseudoLabelSet::default()
        };
        frame_ids.len()
    ];
    for (n, r) in records.iter().enumerate() {
        let fi = *index
            .get(r.frame_id.as_str())
            .ok_or_else(|| Error::Data(format!("label for unknown frame {:?}", r.frame_id)))?;
        let c = r.class.resolve(catalog)?;
        let p = PseudoBox {
            survivor: detection_box(r.bbox, c, r.score, catalog.len(), n)?,
            suppressed: vec![],
            mean_iou: r.mean_iou,
        };
        if r.certain {
            sets[fi].certain.push(p);
        } else {
            sets[fi].uncertain.push(p);
        }
    }
    Ok(sets)
}

pub const CHECKPOINT_FORMAT: &str = "rpl-detector-f64le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockShape {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub classes: usize,
    pub dim: usize,
    pub len: usize,
    pub blocks: Vec<BlockShape>,
}

/// One JSON header line, then `len` little-endian f64 values.
pub fn write_checkpoint(path: &Path, params: &DetectorParams) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        classes: params.class_count(),
        dim: params.dim(),
        len: params.as_slice().len(),
        blocks: Block::ALL
            .iter()
            .map(|b| {
                let (r, c) = params.shape(*b);
                BlockShape { name: b.name().to_string(), shape: [r, c] }
            })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in params.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<DetectorParams> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Data(format!("unknown checkpoint format {:?}", header.format)));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != header.len * 8 {
        return Err(Error::Length {
            left: header.len * 8,
            right: bytes.len(),
            context: "checkpoint payload bytes".into(),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    DetectorParams::from_flat(header.classes, header.dim, data)
}

pub fn write_loss_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "iteration,l_cls,l_reg,l_det,l_u,l_sl,certain,uncertain")?;
    for r in &report.losses {
        let l = r.loss;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.iteration, l.l_cls, l.l_reg, l.l_det, l.l_u, l.l_sl, r.certain, r.uncertain
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn report_summary(report: &TrainReport, catalog: &ClassCatalog) -> serde_json::Value {
    let named = |aps: &[Option<f64>]| {
        let mut m = serde_json::Map::new();
        for (i, ap) in aps.iter().enumerate() {
            m.insert(catalog.name(i).unwrap_or("?").to_string(), serde_json::json!(ap));
        }
        serde_json::Value::Object(m)
    };
    serde_json::json!({
        "initial_map": report.initial_map(),
        "final_map": report.final_map(),
        "final_per_class_ap": report.evaluations.last().map(|e| named(&e.per_class_ap)),
        "evaluations": report.evaluations.iter().map(|e| serde_json::json!({
            "iteration": e.iteration,
            "map": e.map,
            "per_class_ap": named(&e.per_class_ap),
        })).collect::<Vec<_>>(),
        "thresholds": report.thresholds.iter().map(|t| t.to_json(catalog)).collect::<Vec<_>>(),
        "label_counts": report.label_counts,
    })
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_pr_curve(path: &Path, eval: &ClassEval) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "rank,score,recall,precision,tp")?;
    for (i, p) in eval.curve.iter().enumerate() {
        writeln!(w, "{},{},{},{},{}", i + 1, p.score, p.recall, p.precision, u8::from(p.true_positive))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut p = DetectorParams::zeros(3, 4);
        for (i, v) in p.as_mut_slice().iter_mut().enumerate() {
            *v = (i as f64).sin() * 1e-3 + 1.0 / 3.0;
        }
        write_checkpoint(&path, &p).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), p);
        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|b| *b == b'\n').unwrap();
        assert_eq!(bytes.len() - nl - 1, p.as_slice().len() * 8);
    }

    #[test]
    fn class_ref_resolution() {
        let cat = ClassCatalog::new(["A", "B"]).unwrap();
        assert_eq!(ClassRef::Name("B".into()).resolve(&cat).unwrap(), 1);
        assert_eq!(ClassRef::Index(0).resolve(&cat).unwrap(), 0);
        assert!(ClassRef::Index(2).resolve(&cat).is_err());
        assert!(ClassRef::Name("C".into()).resolve(&cat).is_err());
        let r: GtRecord = serde_json::from_str(r#"{"class":1,"box":[0,0,1,1]}"#).unwrap();
        assert_eq!(r.class, ClassRef::Index(1));
    }

    #[test]
    fn bad_record_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        std::fs::write(&path, "{\"frame_id\":\"a\",\"proposals\":[]}\n{\"frame_id\":1}\n").unwrap();
        let err = read_dataset(&path, &ClassCatalog::numbered(1).unwrap()).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }
}
