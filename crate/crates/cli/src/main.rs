mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

/// Reward scoring, advantage normalization, dataset building, tracking runs and
/// one-pass evaluation for language-refreshing visual trackers.
#[derive(Debug, Parser)]
#[command(name = "vltrack", version)]
pub struct Cli {
    /// TOML file with per-subcommand defaults; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Run per-sequence and per-sample work on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score tracker outputs against annotations (PR, NPR, SR, AO, SR@0.5, SR@0.75).
    Eval(EvalArgs),
    /// Compute the reward breakdown of each refiner reply.
    Reward(RewardArgs),
    /// Append group-normalized advantages to reward groups.
    Advantage(AdvantageArgs),
    /// Run the tracking loop over one sequence or a corpus.
    Track(TrackArgs),
    /// Sample template/search pairs for supervised fine-tuning.
    BuildSft(BuildArgs),
    /// Sample template/search pairs with boxes for reinforcement learning.
    BuildRl(BuildArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Tabular,
    Structured,
    Plotdata,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Annotation corpus root, or a single sequence directory.
    #[arg(long, value_name = "DIR")]
    pub gt_dir: PathBuf,
    /// Directory holding one `<sequence_id>.txt` per sequence.
    #[arg(long, value_name = "DIR")]
    pub pred_dir: PathBuf,
    /// Report directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Report formats, comma separated [default: tabular]
    #[arg(long, value_enum, value_delimiter = ',')]
    pub format: Vec<FormatArg>,
    /// Reference rows (`name & pr & npr & sr` or CSV) shown next to the results.
    #[arg(long, value_name = "FILE")]
    pub references: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RewardArgs {
    /// JSONL records: {"sample_id", "response", optional "gt", "pred_opt", "iou1"}.
    #[arg(long, value_name = "FILE")]
    pub responses: PathBuf,
    /// Ground-truth box `x,y,w,h` for records that carry none.
    #[arg(long, value_name = "BOX", allow_hyphen_values = true)]
    pub gt: Option<String>,
    /// Box predicted with the refined language, for records that carry none.
    #[arg(long, value_name = "BOX", allow_hyphen_values = true)]
    pub pred_opt: Option<String>,
    /// IoU obtained with the initial language, for records that carry none.
    #[arg(long)]
    pub iou1: Option<f64>,
    /// TOML file with w_format1, w_format2, w_iou, w_judge, theta [default: all weights 1.0]
    #[arg(long, value_name = "FILE")]
    pub weights: Option<PathBuf>,
    /// IoU gate of the IoU reward; overrides the weights file [default: 0.61]
    #[arg(long)]
    pub theta: Option<f64>,
    /// Output CSV; standard output when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdvantageArgs {
    /// JSONL groups: {"question_id", "rewards": [..]}; each group needs at least 2 rewards (5 per question by default sampling).
    #[arg(long, value_name = "FILE")]
    pub groups_file: PathBuf,
    /// Output JSONL; standard output when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackerKind {
    Oracle,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinerKind {
    Stub,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum StrategyArg {
    Static,
    Dynamic1,
    Dynamic2,
    DynamicStatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum TemplatePolicyArg {
    InitialOnly,
    InitialPlusRecent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AnchorPolicyArg {
    OnAccept,
    OnInvoke,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// A sequence directory, or a corpus root holding several.
    #[arg(long, value_name = "DIR")]
    pub sequence_dir: PathBuf,
    /// Output directory for `<id>.txt`, `events/<id>.jsonl` and the manifest.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Tracker backend [default: oracle]
    #[arg(long, value_enum)]
    pub tracker: Option<TrackerKind>,
    /// Refiner backend [default: stub]
    #[arg(long, value_enum)]
    pub refiner: Option<RefinerKind>,
    /// Update interval in frames [default: 100]
    #[arg(long)]
    pub u: Option<usize>,
    /// Language update strategy [default: dynamic1]
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Seed for every random choice [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Oracle tracker jitter in pixels [default: 0]
    #[arg(long)]
    pub noise_px: Option<f64>,
    /// Refiner runs only while tracker confidence is below this; 1.0 disables the gate [default: 1.0]
    #[arg(long)]
    pub gate_threshold: Option<f64>,
    /// Template frames passed to the tracker [default: initial_plus_recent]
    #[arg(long, value_enum)]
    pub template_policy: Option<TemplatePolicyArg>,
    /// When the refiner's anchor frame moves forward [default: on_accept]
    #[arg(long, value_enum)]
    pub anchor_policy: Option<AnchorPolicyArg>,
    /// Base URL of the remote tracker (`/init`, `/track`).
    #[arg(long, value_name = "URL")]
    pub tracker_url: Option<String>,
    /// Chat-completions URL of the remote refiner; REFINER_URL overrides the config file.
    #[arg(long, value_name = "URL")]
    pub refiner_url: Option<String>,
    /// Model name sent to the remote refiner [default: refiner]
    #[arg(long)]
    pub model: Option<String>,
    /// Request timeout for remote endpoints in milliseconds [default: 60000]
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    /// Reply returned by the stub refiner [default: a well-formed "no"]
    #[arg(long, value_name = "TEXT")]
    pub stub_reply: Option<String>,
    /// System prompt file for the remote refiner [default: bundled prompt]
    #[arg(long, value_name = "FILE")]
    pub system_prompt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Annotation corpus root.
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    /// Number of records to draw.
    #[arg(long)]
    pub count: usize,
    /// Sampling seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output JSONL file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Root used in image paths [default: the corpus root]
    #[arg(long, value_name = "DIR")]
    pub image_root: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Unavailable(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
