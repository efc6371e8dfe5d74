//! Grounding datasets, IoU and accuracy at a threshold.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::BoundingBox;

/// One (image, phrase, box) triplet; the box is in original image pixels.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroundingRecord {
    pub image_path: PathBuf,
    pub phrase: String,
    pub gt_box: BoundingBox,
    pub split: Option<String>,
}

/// Which benchmark family a file belongs to; decides the default threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Flickr,
    Vg,
}

impl DatasetKind {
    pub fn default_threshold(self) -> f64 {
        match self {
            DatasetKind::Flickr => 0.5,
            DatasetKind::Vg => 0.3,
        }
    }

    /// The kind shared by every record's split tag (`flickr-s0`, `vg_s1`, ...),
    /// if there is one.
    pub fn infer(records: &[GroundingRecord]) -> Option<Self> {
        let kind = |r: &GroundingRecord| {
            let tag = r.split.as_deref()?.to_ascii_lowercase();
            if tag.starts_with("flickr") {
                Some(DatasetKind::Flickr)
            } else if tag.starts_with("vg") {
                Some(DatasetKind::Vg)
            } else {
                None
            }
        };
        let first = kind(records.first()?)?;
        records.iter().all(|r| kind(r) == Some(first)).then_some(first)
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flickr" | "flickr30k" => Ok(Self::Flickr),
            "vg" | "visualgenome" => Ok(Self::Vg),
            other => Err(Error::Config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

/// Intersection over union with inclusive pixel areas.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (t, l) = (a.y1.max(b.y1), a.y2.max(b.y2));
    let (bo, r) = (a.y3.min(b.y3), a.y4.min(b.y4));
    if t > bo || l > r {
        return 0.0;
    }
    let inter = ((bo - t + 1) * (r - l + 1)) as f64;
    inter / (a.area() as f64 + b.area() as f64 - inter)
}

#[derive(Deserialize)]
struct RawRecord {
    image: String,
    phrase: String,
    #[serde(rename = "box")]
    bbox: BoundingBox,
    #[serde(default)]
    split: Option<String>,
}

/// A malformed dataset line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// Parsed records plus the lines that failed.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub records: Vec<GroundingRecord>,
    pub errors: Vec<LineError>,
}

/// Parse JSONL text. Blank lines are skipped; relative image paths resolve
/// against `base`.
pub fn parse_dataset(text: &str, base: &Path) -> Dataset {
    let mut out = Dataset::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawRecord>(line) {
            Ok(r) => {
                let p = PathBuf::from(&r.image);
                out.records.push(GroundingRecord {
                    image_path: if p.is_absolute() { p } else { base.join(p) },
                    phrase: r.phrase,
                    gt_box: r.bbox,
                    split: r.split,
                });
            }
            Err(e) => out.errors.push(LineError {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    out
}

/// Load a JSONL dataset: one object per line with `image`, `phrase`,
/// `box: [y1, y2, y3, y4]` and an optional `split`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    Ok(parse_dataset(&text, path.parent().unwrap_or(Path::new("."))))
}

/// What a predictor returns for one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default)]
    pub score: Option<f64>,
}

/// Load precomputed predictions, one JSON object per line, aligned with the
/// dataset's well-formed records.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub index: usize,
    pub image: PathBuf,
    pub phrase: String,
    pub split: Option<String>,
    pub gt_box: BoundingBox,
    pub pred_box: Option<BoundingBox>,
    pub score: Option<f64>,
    pub iou: Option<f64>,
    pub correct: bool,
    pub error: Option<String>,
}

/// Accuracy over the records that produced a prediction; failures are
/// counted in `errors` and listed in `rows`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub threshold: f64,
    pub total: usize,
    pub evaluated: usize,
    pub correct: usize,
    pub errors: usize,
    pub rows: Vec<EvalRow>,
}

/// A prediction counts as correct when its IoU is strictly above `thr`.
pub fn evaluate<F>(records: &[GroundingRecord], predictor: F, thr: f64) -> Result<EvalReport>
where
    F: Fn(&GroundingRecord) -> Result<Prediction> + Sync,
{
    evaluate_indexed(records, |_, r| predictor(r), thr)
}

/// [`evaluate`] with the record's position passed to the predictor.
pub fn evaluate_indexed<F>(records: &[GroundingRecord], predictor: F, thr: f64) -> Result<EvalReport>
where
    F: Fn(usize, &GroundingRecord) -> Result<Prediction> + Sync,
{
    if !(thr > 0.0 && thr < 1.0) {
        return Err(Error::Parameter(format!("threshold must lie in (0, 1), got {thr}")));
    }
    let rows: Vec<EvalRow> = records
        .par_iter()
        .enumerate()
        .map(|(index, r)| {
            let mut row = EvalRow {
                index,
                image: r.image_path.clone(),
                phrase: r.phrase.clone(),
                split: r.split.clone(),
                gt_box: r.gt_box,
                pred_box: None,
                score: None,
                iou: None,
                correct: false,
                error: None,
            };
            match predictor(index, r) {
                Ok(p) => {
                    let v = iou(&p.bbox, &r.gt_box);
                    row.pred_box = Some(p.bbox);
                    row.score = p.score;
                    row.iou = Some(v);
                    row.correct = v > thr;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect();
    let errors = rows.iter().filter(|r| r.error.is_some()).count();
    let correct = rows.iter().filter(|r| r.correct).count();
    let evaluated = rows.len() - errors;
    Ok(EvalReport {
        accuracy: if evaluated == 0 { 0.0 } else { correct as f64 / evaluated as f64 },
        threshold: thr,
        total: rows.len(),
        evaluated,
        correct,
        errors,
        rows,
    })
}
