//! Per-sample reward components and their weighted total.

use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::geometry::{iou, BoundingBox, GeometryError};
use crate::response_format::{format_rewards, CoTResponse, Decision};

/// IoU threshold below which the IoU reward is zero.
pub const DEFAULT_THETA: f64 = 0.61;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("IoU value {0} outside [0, 1]")]
    IouOutOfRange(f64),
    #[error("invalid reward weights: {0}")]
    InvalidWeights(String),
    #[error("cannot read reward config {path}: {source}")]
    ConfigIo { path: String, source: io::Error },
    #[error("malformed reward config {path}: {message}")]
    ConfigParse { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w_format1: f64,
    pub w_format2: f64,
    pub w_iou: f64,
    pub w_judge: f64,
    pub theta: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_format1: 1.0,
            w_format2: 1.0,
            w_iou: 1.0,
            w_judge: 1.0,
            theta: DEFAULT_THETA,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, w) in [
            ("w_format1", self.w_format1),
            ("w_format2", self.w_format2),
            ("w_iou", self.w_iou),
            ("w_judge", self.w_judge),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(RewardError::InvalidWeights(format!(
                    "{name} = {w} must be finite and >= 0"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(RewardError::InvalidWeights(format!(
                "theta = {} must lie in [0, 1]",
                self.theta
            )));
        }
        Ok(())
    }

    /// Parses the TOML config form; missing keys take their defaults.
    ///
    /// ```toml
    /// w_format1 = 1.0
    /// w_format2 = 1.0
    /// w_iou = 1.0
    /// w_judge = 1.0
    /// theta = 0.61
    /// ```
    pub fn from_toml_str(text: &str) -> Result<Self, RewardError> {
        let weights: Self = toml::from_str(text).map_err(|e| RewardError::ConfigParse {
            path: "<string>".into(),
            message: e.to_string(),
        })?;
        weights.validate()?;
        Ok(weights)
    }

    pub fn load(path: &Path) -> Result<Self, RewardError> {
        let text = std::fs::read_to_string(path).map_err(|source| RewardError::ConfigIo {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            RewardError::ConfigParse { message, .. } => RewardError::ConfigParse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("weights always serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format1: u8,
    pub format2: u8,
    pub iou_reward: f64,
    pub judge_reward: u8,
    pub overall: f64,
}

/// IoU pass-through gated by a strict `> theta`.
pub fn iou_reward(gt: &BoundingBox, pred: &BoundingBox, theta: f64) -> Result<f64, RewardError> {
    Ok(gate_iou(iou(gt, pred)?, theta))
}

pub(crate) fn gate_iou(value: f64, theta: f64) -> f64 {
    if value > theta {
        value
    } else {
        0.0
    }
}

fn check_unit(v: f64) -> Result<f64, RewardError> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(RewardError::IouOutOfRange(v))
    }
}

/// 1 when the update decision agrees with which text tracked better.
///
/// `iou_initial` comes from tracking with the initial text, `iou_refined` with
/// the refined text.
pub fn judge_reward(
    decision: Decision,
    iou_initial: f64,
    iou_refined: f64,
) -> Result<u8, RewardError> {
    let (a, b) = (check_unit(iou_initial)?, check_unit(iou_refined)?);
    let correct = match decision {
        Decision::Yes => a < b,
        Decision::No => a >= b,
        Decision::Invalid => false,
    };
    Ok(u8::from(correct))
}

/// Scores one sampled reply.
///
/// `pred_refined` is the tracker box obtained with the reply's refined text and
/// `iou_initial` the IoU the tracker achieved with the initial text.
pub fn overall_reward(
    resp: &CoTResponse,
    gt: &BoundingBox,
    pred_refined: &BoundingBox,
    iou_initial: f64,
    weights: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    weights.validate()?;
    let fmt = format_rewards(resp);
    let iou_refined = iou(gt, pred_refined)?;
    let iou_reward = gate_iou(iou_refined, weights.theta);
    let judge = judge_reward(resp.effective_decision(), iou_initial, iou_refined)?;
    let overall = weights.w_format1 * f64::from(fmt.format1)
        + weights.w_format2 * f64::from(fmt.format2)
        + weights.w_iou * iou_reward
        + weights.w_judge * f64::from(judge);
    Ok(RewardBreakdown {
        format1: fmt.format1,
        format2: fmt.format2,
        iou_reward,
        judge_reward: judge,
        overall,
    })
}

/// Inputs for scoring one sample in a batch.
#[derive(Debug, Clone)]
pub struct RewardInput {
    pub sample_id: String,
    pub response: CoTResponse,
    pub gt: BoundingBox,
    pub pred_refined: BoundingBox,
    pub iou_initial: f64,
}

pub fn score_batch(
    inputs: &[RewardInput],
    weights: &RewardWeights,
    execution: Execution,
) -> Vec<Result<RewardBreakdown, RewardError>> {
    exec::map(inputs, execution, |s| {
        overall_reward(&s.response, &s.gt, &s.pred_refined, s.iou_initial, weights)
    })
}

pub const LOG_HEADER: &str = "sample_id,format1,format2,iou_reward,judge_reward,overall";

/// Writes the comma-separated breakdown log, header first.
pub fn write_log<'a, W: Write>(
    mut out: W,
    rows: impl IntoIterator<Item = (&'a str, &'a RewardBreakdown)>,
) -> io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for (id, b) in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            id, b.format1, b.format2, b.iou_reward, b.judge_reward, b.overall
        )?;
    }
    Ok(())
}
