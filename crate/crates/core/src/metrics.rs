//! One-pass evaluation: precision, normalized precision, success AUC, average
//! overlap and SR at fixed IoU thresholds, with per-attribute breakdowns.
//!
//! Conventions:
//! - frames with `absent = 1` (or a zero-area ground-truth box) are not scored;
//! - success counts frames with IoU strictly above the threshold, on 21
//!   thresholds `0, 0.05, …, 1`; SR is the mean of that curve;
//! - precision counts center errors `<=` each pixel threshold `0..=50`, PR is
//!   read at 20 px;
//! - normalized precision uses thresholds `0, 0.01, …, 0.5`; NPR is the mean of
//!   that curve;
//! - dataset values are unweighted means over sequences.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{read_box_file, write_box_file, Attribute, DatasetError, SequenceAnnotation};
use crate::exec::{self, Execution};
use crate::geometry::{center_distance, iou_unchecked, normalized_center_distance, BoundingBox};

pub const SUCCESS_POINTS: usize = 21;
pub const PRECISION_POINTS: usize = 51;
pub const NORM_PRECISION_POINTS: usize = 51;
/// Pixel threshold at which PR is reported.
pub const PR_THRESHOLD_PX: usize = 20;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sequence {sequence_id}: {found} predicted boxes for {expected} annotated frames")]
    LengthMismatch {
        sequence_id: String,
        expected: usize,
        found: usize,
    },
    #[error("sequence {sequence_id}, frame {frame}: invalid predicted box [{bbox}]")]
    InvalidPrediction {
        sequence_id: String,
        frame: usize,
        bbox: BoundingBox,
    },
    #[error("no output for sequence {0}")]
    MissingOutput(String),
    #[error("cannot parse reference row {0:?}")]
    BadReference(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Tracker boxes for one sequence, one per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput {
    pub sequence_id: String,
    pub boxes: Vec<BoundingBox>,
}

/// Path of a sequence's output inside a prediction directory: `<dir>/<id>.txt`.
pub fn output_path(dir: &Path, sequence_id: &str) -> PathBuf {
    dir.join(format!("{sequence_id}.txt"))
}

pub fn write_track_output(dir: &Path, out: &TrackOutput) -> Result<PathBuf, DatasetError> {
    let path = output_path(dir, &out.sequence_id);
    write_box_file(&path, &out.boxes)?;
    Ok(path)
}

/// Reads `<dir>/<id>.txt`; `None` when the file does not exist.
pub fn load_track_output(
    dir: &Path,
    sequence_id: &str,
) -> Result<Option<TrackOutput>, DatasetError> {
    let path = output_path(dir, sequence_id);
    if !path.is_file() {
        return Ok(None);
    }
    let boxes = read_box_file(&path, false)?;
    Ok(Some(TrackOutput {
        sequence_id: sequence_id.to_owned(),
        boxes,
    }))
}

pub fn success_threshold(i: usize) -> f64 {
    i as f64 / (SUCCESS_POINTS - 1) as f64
}

pub fn precision_threshold(i: usize) -> f64 {
    i as f64
}

pub fn norm_precision_threshold(i: usize) -> f64 {
    i as f64 / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub sequence_id: String,
    pub valid_frames: usize,
    pub pr: f64,
    pub npr: f64,
    pub sr_auc: f64,
    pub ao: f64,
    pub sr_050: f64,
    pub sr_075: f64,
    pub precision_curve: Vec<f64>,
    pub norm_precision_curve: Vec<f64>,
    pub success_curve: Vec<f64>,
}

/// Outcome for one sequence; sequences without any scorable frame are kept as
/// markers and skipped during aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum SequenceResult {
    Scored(SequenceMetrics),
    Empty { sequence_id: String },
}

impl SequenceResult {
    pub fn sequence_id(&self) -> &str {
        match self {
            SequenceResult::Scored(m) => &m.sequence_id,
            SequenceResult::Empty { sequence_id } => sequence_id,
        }
    }

    pub fn metrics(&self) -> Option<&SequenceMetrics> {
        match self {
            SequenceResult::Scored(m) => Some(m),
            SequenceResult::Empty { .. } => None,
        }
    }
}

fn fraction(values: &[f64], pass: impl Fn(f64) -> bool) -> f64 {
    values.iter().filter(|v| pass(**v)).count() as f64 / values.len() as f64
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean success over an evenly spaced grid of `points` IoU thresholds on [0, 1].
pub fn success_auc_on_grid(ious: &[f64], points: usize) -> f64 {
    assert!(points >= 2, "grid needs at least two thresholds");
    let curve: Vec<f64> = (0..points)
        .map(|i| fraction(ious, |v| v > i as f64 / (points - 1) as f64))
        .collect();
    mean(&curve)
}

pub fn evaluate_sequence(
    gt: &SequenceAnnotation,
    out: &TrackOutput,
) -> Result<SequenceResult, EvalError> {
    if out.boxes.len() != gt.frame_count() {
        return Err(EvalError::LengthMismatch {
            sequence_id: gt.sequence_id.clone(),
            expected: gt.frame_count(),
            found: out.boxes.len(),
        });
    }
    let n = gt.frame_count();
    let mut ious = Vec::with_capacity(n);
    let mut center_errors = Vec::with_capacity(n);
    let mut norm_errors = Vec::with_capacity(n);
    for (frame, (g, p)) in gt.gt_boxes.iter().zip(&out.boxes).enumerate() {
        if gt.absent[frame] || !g.has_positive_area() {
            continue;
        }
        let invalid = || EvalError::InvalidPrediction {
            sequence_id: gt.sequence_id.clone(),
            frame,
            bbox: *p,
        };
        p.validate().map_err(|_| invalid())?;
        ious.push(iou_unchecked(g, p));
        center_errors.push(center_distance(p, g).map_err(|_| invalid())?);
        norm_errors.push(normalized_center_distance(p, g).map_err(|_| invalid())?);
    }
    if ious.is_empty() {
        return Ok(SequenceResult::Empty {
            sequence_id: gt.sequence_id.clone(),
        });
    }

    let success_curve: Vec<f64> = (0..SUCCESS_POINTS)
        .map(|i| fraction(&ious, |v| v > success_threshold(i)))
        .collect();
    let precision_curve: Vec<f64> = (0..PRECISION_POINTS)
        .map(|i| fraction(&center_errors, |e| e <= precision_threshold(i)))
        .collect();
    let norm_precision_curve: Vec<f64> = (0..NORM_PRECISION_POINTS)
        .map(|i| fraction(&norm_errors, |e| e <= norm_precision_threshold(i)))
        .collect();

    Ok(SequenceResult::Scored(SequenceMetrics {
        sequence_id: gt.sequence_id.clone(),
        valid_frames: ious.len(),
        pr: precision_curve[PR_THRESHOLD_PX],
        npr: mean(&norm_precision_curve),
        sr_auc: mean(&success_curve),
        ao: mean(&ious),
        sr_050: fraction(&ious, |v| v > 0.5),
        sr_075: fraction(&ious, |v| v > 0.75),
        precision_curve,
        norm_precision_curve,
        success_curve,
    }))
}

/// Evaluates every annotated sequence against its output, matched by id.
pub fn evaluate_corpus(
    annotations: &[SequenceAnnotation],
    outputs: &[TrackOutput],
    execution: Execution,
) -> Result<Vec<SequenceResult>, EvalError> {
    let by_id: BTreeMap<&str, &TrackOutput> = outputs
        .iter()
        .map(|o| (o.sequence_id.as_str(), o))
        .collect();
    let missing: Vec<&str> = annotations
        .iter()
        .map(|a| a.sequence_id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingOutput(missing.join(", ")));
    }
    exec::map(annotations, execution, |a| {
        evaluate_sequence(a, by_id[a.sequence_id.as_str()])
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeScores {
    pub sequences: usize,
    pub pr: f64,
    pub npr: f64,
    pub sr_auc: f64,
}

/// A published result row kept next to local numbers (values in percent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub name: String,
    pub pr: f64,
    pub npr: f64,
    pub sr: f64,
}

impl ReferenceRow {
    /// Accepts `name & PR & NPR & SR \\` (table-row form) or `name,PR,NPR,SR`.
    /// The name may be omitted.
    pub fn parse(line: &str) -> Result<Self, EvalError> {
        let bad = || EvalError::BadReference(line.to_owned());
        let body = line.trim().trim_end_matches('\\').trim();
        let sep = if body.contains('&') { '&' } else { ',' };
        let cells: Vec<&str> = body.split(sep).map(str::trim).collect();
        let (name, nums) = match cells.len() {
            3 => ("reference", &cells[..]),
            4 => (cells[0], &cells[1..]),
            _ => return Err(bad()),
        };
        let v: Vec<f64> = nums
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        Ok(Self {
            name: name.to_owned(),
            pr: v[0],
            npr: v[1],
            sr: v[2],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: usize,
    pub empty_sequences: Vec<String>,
    pub pr: f64,
    pub npr: f64,
    pub sr_auc: f64,
    pub ao: f64,
    pub sr_050: f64,
    pub sr_075: f64,
    pub precision_curve: Vec<f64>,
    pub norm_precision_curve: Vec<f64>,
    pub success_curve: Vec<f64>,
    /// `None` when no evaluated sequence carries the attribute.
    pub per_attribute: BTreeMap<Attribute, Option<AttributeScores>>,
    #[serde(default)]
    pub references: Vec<ReferenceRow>,
}

fn mean_by<F: Fn(&SequenceMetrics) -> f64>(ms: &[&SequenceMetrics], f: F) -> f64 {
    if ms.is_empty() {
        return 0.0;
    }
    ms.iter().map(|m| f(m)).sum::<f64>() / ms.len() as f64
}

fn mean_curve<F: Fn(&SequenceMetrics) -> &Vec<f64>>(
    ms: &[&SequenceMetrics],
    len: usize,
    f: F,
) -> Vec<f64> {
    (0..len).map(|i| mean_by(ms, |m| f(m)[i])).collect()
}

/// Combines per-sequence results; attribute flags come from `annotations`,
/// matched by sequence id.
pub fn aggregate(records: &[SequenceResult], annotations: &[SequenceAnnotation]) -> EvalReport {
    let scored: Vec<&SequenceMetrics> =
        records.iter().filter_map(SequenceResult::metrics).collect();
    let empty_sequences = records
        .iter()
        .filter(|r| r.metrics().is_none())
        .map(|r| r.sequence_id().to_owned())
        .collect();
    let flags: BTreeMap<&str, &SequenceAnnotation> = annotations
        .iter()
        .map(|a| (a.sequence_id.as_str(), a))
        .collect();

    let per_attribute = Attribute::ALL
        .iter()
        .map(|&attr| {
            let members: Vec<&SequenceMetrics> = scored
                .iter()
                .copied()
                .filter(|m| {
                    flags
                        .get(m.sequence_id.as_str())
                        .is_some_and(|a| a.attributes.has(attr))
                })
                .collect();
            let entry = (!members.is_empty()).then(|| AttributeScores {
                sequences: members.len(),
                pr: mean_by(&members, |m| m.pr),
                npr: mean_by(&members, |m| m.npr),
                sr_auc: mean_by(&members, |m| m.sr_auc),
            });
            (attr, entry)
        })
        .collect();

    EvalReport {
        sequences: scored.len(),
        empty_sequences,
        pr: mean_by(&scored, |m| m.pr),
        npr: mean_by(&scored, |m| m.npr),
        sr_auc: mean_by(&scored, |m| m.sr_auc),
        ao: mean_by(&scored, |m| m.ao),
        sr_050: mean_by(&scored, |m| m.sr_050),
        sr_075: mean_by(&scored, |m| m.sr_075),
        precision_curve: mean_curve(&scored, PRECISION_POINTS, |m| &m.precision_curve),
        norm_precision_curve: mean_curve(&scored, NORM_PRECISION_POINTS, |m| {
            &m.norm_precision_curve
        }),
        success_curve: mean_curve(&scored, SUCCESS_POINTS, |m| &m.success_curve),
        per_attribute,
        references: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Tabular,
    Structured,
    Plotdata,
}

pub const TABULAR_FILE: &str = "report.txt";
pub const STRUCTURED_FILE: &str = "report.json";
pub const SUCCESS_PLOT_FILE: &str = "success_plot.csv";
pub const PRECISION_PLOT_FILE: &str = "precision_plot.csv";
pub const NORM_PRECISION_PLOT_FILE: &str = "norm_precision_plot.csv";

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

pub fn render_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "sequences evaluated: {}", report.sequences);
    if !report.empty_sequences.is_empty() {
        let _ = writeln!(
            s,
            "sequences without scorable frames: {}",
            report.empty_sequences.join(", ")
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "", "PR", "NPR", "SR", "AO", "SR0.5", "SR0.75"
    );
    let _ = writeln!(
        s,
        "{:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "overall",
        pct(report.pr),
        pct(report.npr),
        pct(report.sr_auc),
        pct(report.ao),
        pct(report.sr_050),
        pct(report.sr_075)
    );
    for r in &report.references {
        let _ = writeln!(
            s,
            "{:<12} {:>7.1} {:>7.1} {:>7.1} {:>7} {:>7} {:>7}",
            r.name, r.pr, r.npr, r.sr, "-", "-", "-"
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<12} {:>5} {:>7} {:>7} {:>7}",
        "attribute", "n", "PR", "NPR", "SR"
    );
    for (attr, scores) in &report.per_attribute {
        match scores {
            Some(a) => {
                let _ = writeln!(
                    s,
                    "{:<12} {:>5} {:>7} {:>7} {:>7}",
                    attr.code(),
                    a.sequences,
                    pct(a.pr),
                    pct(a.npr),
                    pct(a.sr_auc)
                );
            }
            None => {
                let _ = writeln!(
                    s,
                    "{:<12} {:>5} {:>7} {:>7} {:>7}",
                    attr.code(),
                    0,
                    "-",
                    "-",
                    "-"
                );
            }
        }
    }
    s
}

fn curve_csv(header: &str, threshold: impl Fn(usize) -> f64, curve: &[f64]) -> String {
    let mut s = format!("{header},value\n");
    for (i, v) in curve.iter().enumerate() {
        let _ = writeln!(s, "{},{}", threshold(i), v);
    }
    s
}

/// Writes the report into `dir` and returns the paths written.
pub fn emit_report(
    report: &EvalReport,
    format: ReportFormat,
    dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files: Vec<(PathBuf, String)> = match format {
        ReportFormat::Tabular => vec![(dir.join(TABULAR_FILE), render_table(report))],
        ReportFormat::Structured => {
            let json = serde_json::to_string_pretty(report).expect("report serializes");
            vec![(dir.join(STRUCTURED_FILE), json + "\n")]
        }
        ReportFormat::Plotdata => vec![
            (
                dir.join(SUCCESS_PLOT_FILE),
                curve_csv("iou_threshold", success_threshold, &report.success_curve),
            ),
            (
                dir.join(PRECISION_PLOT_FILE),
                curve_csv(
                    "center_error_px",
                    precision_threshold,
                    &report.precision_curve,
                ),
            ),
            (
                dir.join(NORM_PRECISION_PLOT_FILE),
                curve_csv(
                    "normalized_center_error",
                    norm_precision_threshold,
                    &report.norm_precision_curve,
                ),
            ),
        ],
    };
    for (path, text) in &files {
        fs::write(path, text).map_err(io_err(path))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

pub fn read_structured_report(path: &Path) -> Result<EvalReport, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })
}
