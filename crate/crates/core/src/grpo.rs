//! Group-relative advantages, KL divergence terms, and the value of the
//! clip-free GRPO objective over recorded log-probabilities.
//!
//! Values only; nothing here differentiates.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};

/// Samples drawn per prompt.
pub const DEFAULT_GROUP_SIZE: usize = 5;
/// Groups whose population std falls below this get all-zero advantages.
pub const STD_EPSILON: f64 = 1e-12;
const DIST_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group has {0} rewards; at least 2 are required")]
    GroupTooSmall(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("p has mass {p} at index {index} where q has none")]
    SupportMismatch { index: usize, p: f64 },
    #[error("exact KL needs full distributions on step {0}")]
    MissingDistribution(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `(r_i - mean) / population_std`, or all zeros when the group is flat.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(GrpoError::InvalidArgument(format!(
            "non-finite reward {bad}"
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < STD_EPSILON {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGroup {
    pub rewards: Vec<f64>,
    #[serde(default)]
    pub advantages: Vec<f64>,
}

impl SampleGroup {
    pub fn new(rewards: Vec<f64>) -> Self {
        Self {
            rewards,
            advantages: Vec::new(),
        }
    }

    pub fn normalize(&mut self) -> Result<&[f64], GrpoError> {
        self.advantages = group_advantages(&self.rewards)?;
        Ok(&self.advantages)
    }
}

fn check_distribution(name: &str, d: &[f64]) -> Result<(), GrpoError> {
    if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(GrpoError::InvalidArgument(format!(
            "{name} has negative or non-finite entries"
        )));
    }
    let total: f64 = d.iter().sum();
    if (total - 1.0).abs() > DIST_TOLERANCE {
        return Err(GrpoError::InvalidArgument(format!(
            "{name} sums to {total}, expected 1"
        )));
    }
    Ok(())
}

/// `sum p_i ln(p_i / q_i)` with `0 ln 0 = 0`.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64, GrpoError> {
    if p.len() != q.len() || p.is_empty() {
        return Err(GrpoError::InvalidArgument(format!(
            "distribution lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    let mut kl = 0.0;
    for (index, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(GrpoError::SupportMismatch { index, p: pi });
        }
        kl += pi * (pi / qi).ln();
    }
    // rounding can leave a tiny negative residue for p ~= q
    Ok(kl.max(0.0))
}

/// One emitted token: natural-log probabilities under the current, behaviour
/// (old) and base policies, plus optional full distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStep {
    pub logprob_current: f64,
    pub logprob_old: f64,
    pub logprob_base: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_current: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_base: Option<Vec<f64>>,
}

impl PolicyStep {
    pub fn new(logprob_current: f64, logprob_old: f64, logprob_base: f64) -> Self {
        Self {
            logprob_current,
            logprob_old,
            logprob_base,
            dist_current: None,
            dist_base: None,
        }
    }

    pub fn with_distributions(mut self, current: Vec<f64>, base: Vec<f64>) -> Self {
        self.dist_current = Some(current);
        self.dist_base = Some(base);
        self
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        for (name, v) in [
            ("current", self.logprob_current),
            ("old", self.logprob_old),
            ("base", self.logprob_base),
        ] {
            if !v.is_finite() || v > 0.0 {
                return Err(GrpoError::InvalidArgument(format!(
                    "logprob_{name} = {v} must be finite and <= 0"
                )));
            }
        }
        if let Some(d) = &self.dist_current {
            check_distribution("dist_current", d)?;
        }
        if let Some(d) = &self.dist_base {
            check_distribution("dist_base", d)?;
        }
        Ok(())
    }
}

/// Sampled KL surrogate `exp(d) - d - 1` with `d = logprob_base - logprob_current`.
///
/// Its expectation under the current policy equals the exact KL.
pub fn kl_sampled_estimate(step: &PolicyStep) -> Result<f64, GrpoError> {
    if !step.logprob_current.is_finite() || !step.logprob_base.is_finite() {
        return Err(GrpoError::InvalidArgument(
            "non-finite log-probability".into(),
        ));
    }
    let delta = step.logprob_base - step.logprob_current;
    Ok((delta.exp_m1() - delta).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    Exact,
    #[default]
    Sampled,
}

/// Mean over steps of `ratio * advantage - beta * KL_t`, where
/// `ratio = exp(logprob_current - logprob_old)`.
pub fn objective_value(
    steps: &[PolicyStep],
    advantage: f64,
    beta: f64,
    mode: KlMode,
) -> Result<f64, GrpoError> {
    if steps.is_empty() {
        return Err(GrpoError::InvalidArgument("no policy steps".into()));
    }
    if !beta.is_finite() || beta < 0.0 {
        return Err(GrpoError::InvalidArgument(format!(
            "beta = {beta} must be finite and >= 0"
        )));
    }
    if !advantage.is_finite() {
        return Err(GrpoError::InvalidArgument(format!(
            "advantage = {advantage}"
        )));
    }
    let mut total = 0.0;
    for (i, step) in steps.iter().enumerate() {
        step.validate()?;
        let kl = match mode {
            KlMode::Sampled => kl_sampled_estimate(step)?,
            KlMode::Exact => match (&step.dist_current, &step.dist_base) {
                (Some(p), Some(q)) => kl_categorical(p, q)?,
                _ => return Err(GrpoError::MissingDistribution(i)),
            },
        };
        let ratio = (step.logprob_current - step.logprob_old).exp();
        total += ratio * advantage - beta * kl;
    }
    Ok(total / steps.len() as f64)
}

/// One record of the group batch file (JSON lines).
///
/// Input lines need `question_id` and `rewards`; output lines add `advantages`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub question_id: String,
    pub rewards: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantages: Option<Vec<f64>>,
}

pub fn read_groups<R: BufRead>(reader: R) -> Result<Vec<GroupRecord>, GrpoError> {
    let mut groups = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| GrpoError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        groups.push(rec);
    }
    Ok(groups)
}

pub fn write_groups<W: Write>(mut out: W, groups: &[GroupRecord]) -> Result<(), GrpoError> {
    for g in groups {
        serde_json::to_writer(&mut out, g).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Fills `advantages` on every record.
pub fn normalize_groups(groups: &mut [GroupRecord], execution: Execution) -> Result<(), GrpoError> {
    let results = exec::map(groups, execution, |g| group_advantages(&g.rewards));
    for (g, adv) in groups.iter_mut().zip(results) {
        g.advantages = Some(adv.map_err(|e| match e {
            GrpoError::GroupTooSmall(n) => GrpoError::InvalidArgument(format!(
                "group {} has {n} rewards; at least 2 are required",
                g.question_id
            )),
            other => other,
        })?);
    }
    Ok(())
}
