//! `--config` file. Every key is optional; flags win over the file, the file
//! wins over built-in defaults.
//!
//! ```toml
//! seed = 7
//!
//! [eval]
//! format = ["tabular", "plotdata"]
//!
//! [reward]
//! weights = "weights.toml"
//! theta = 0.61
//!
//! [track]
//! u = 50
//! strategy = "dynamic_static"
//! refiner = "remote"
//! refiner_url = "http://127.0.0.1:8000/v1/chat/completions"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{
    AnchorPolicyArg, CliError, FormatArg, RefinerKind, StrategyArg, TemplatePolicyArg, TrackerKind,
};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub eval: EvalSection,
    pub reward: RewardSection,
    pub track: TrackSection,
    pub build: BuildSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub format: Option<Vec<FormatArg>>,
    pub references: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub weights: Option<PathBuf>,
    pub theta: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackSection {
    pub tracker: Option<TrackerKind>,
    pub refiner: Option<RefinerKind>,
    pub u: Option<usize>,
    pub strategy: Option<StrategyArg>,
    pub noise_px: Option<f64>,
    pub gate_threshold: Option<f64>,
    pub template_policy: Option<TemplatePolicyArg>,
    pub anchor_policy: Option<AnchorPolicyArg>,
    pub tracker_url: Option<String>,
    pub refiner_url: Option<String>,
    pub model: Option<String>,
    pub timeout_ms: Option<u64>,
    pub max_in_flight: Option<usize>,
    pub stub_reply: Option<String>,
    pub system_prompt: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildSection {
    pub image_root: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }
}
