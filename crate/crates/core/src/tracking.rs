//! Test-time tracking loop with periodic language refreshes.
//!
//! Every frame is tracked with the active language. On frames where
//! `t % u == 0` and the confidence gate is open, the refiner compares the
//! anchor frame `N_pre` with frame `t`; a well-formed `yes` reply with a
//! non-empty answer replaces the dynamic language.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{frame_image_path, write_jsonl, SequenceAnnotation};
use crate::geometry::{iou_unchecked, BoundingBox};
use crate::metrics::TrackOutput;
use crate::model_client::{
    ChatClient, ClientError, EndpointConfig, ImagePayload, JsonTransport, RefinerRequest, Sampling,
    DEFAULT_SYSTEM_PROMPT,
};
use crate::response_format::{format_rewards, parse, CoTResponse, Decision, FormatLevel};
use crate::reward::{RewardError, RewardWeights};

pub const DEFAULT_UPDATE_INTERVAL: usize = 100;
/// Separator between the dynamic and static sentences under `dynamic_static`.
pub const LANGUAGE_SEPARATOR: &str = "; ";

/// A frame handed to the endpoints. `number` is 1-based; `image` is opaque.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub number: usize,
    pub image: String,
}

/// Frame refs for every frame of an annotated sequence under `root`.
pub fn sequence_frames(root: &Path, ann: &SequenceAnnotation) -> Vec<FrameRef> {
    (0..ann.frame_count())
        .map(|i| FrameRef {
            number: i + 1,
            image: frame_image_path(root, &ann.sequence_id, i),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PortError {
    #[error("endpoint unavailable: {0}")]
    Unavailable(String),
    #[error("{0}")]
    Failed(String),
}

impl From<ClientError> for PortError {
    fn from(e: ClientError) -> Self {
        if e.is_unavailable() {
            PortError::Unavailable(e.to_string())
        } else {
            PortError::Failed(e.to_string())
        }
    }
}

pub trait TrackerPort {
    fn initialize(
        &mut self,
        frame: &FrameRef,
        bbox: &BoundingBox,
        language: &str,
    ) -> Result<(), PortError>;
    fn track(
        &mut self,
        templates: &[FrameRef; 3],
        search: &FrameRef,
        language: &str,
    ) -> Result<TrackResult, PortError>;
}

pub trait RefinerPort {
    fn refine(
        &mut self,
        anchor: &FrameRef,
        current: &FrameRef,
        language: &str,
    ) -> Result<CoTResponse, PortError>;
}

impl<T: TrackerPort + ?Sized> TrackerPort for &mut T {
    fn initialize(
        &mut self,
        frame: &FrameRef,
        bbox: &BoundingBox,
        language: &str,
    ) -> Result<(), PortError> {
        (**self).initialize(frame, bbox, language)
    }
    fn track(
        &mut self,
        templates: &[FrameRef; 3],
        search: &FrameRef,
        language: &str,
    ) -> Result<TrackResult, PortError> {
        (**self).track(templates, search, language)
    }
}

impl<R: RefinerPort + ?Sized> RefinerPort for &mut R {
    fn refine(
        &mut self,
        anchor: &FrameRef,
        current: &FrameRef,
        language: &str,
    ) -> Result<CoTResponse, PortError> {
        (**self).refine(anchor, current, language)
    }
}

impl<T: TrackerPort + ?Sized> TrackerPort for Box<T> {
    fn initialize(
        &mut self,
        frame: &FrameRef,
        bbox: &BoundingBox,
        language: &str,
    ) -> Result<(), PortError> {
        (**self).initialize(frame, bbox, language)
    }
    fn track(
        &mut self,
        templates: &[FrameRef; 3],
        search: &FrameRef,
        language: &str,
    ) -> Result<TrackResult, PortError> {
        (**self).track(templates, search, language)
    }
}

impl<R: RefinerPort + ?Sized> RefinerPort for Box<R> {
    fn refine(
        &mut self,
        anchor: &FrameRef,
        current: &FrameRef,
        language: &str,
    ) -> Result<CoTResponse, PortError> {
        (**self).refine(anchor, current, language)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Never refresh; the tracker always sees the initial sentence.
    Static,
    /// Refiner always receives the initial sentence.
    #[default]
    Dynamic1,
    /// Refiner receives the current dynamic sentence.
    Dynamic2,
    /// As `Dynamic1`, but the tracker sees `dynamic; static`.
    DynamicStatic,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Static,
        Strategy::Dynamic1,
        Strategy::Dynamic2,
        Strategy::DynamicStatic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Static => "static",
            Strategy::Dynamic1 => "dynamic1",
            Strategy::Dynamic2 => "dynamic2",
            Strategy::DynamicStatic => "dynamic_static",
        }
    }

    pub fn calls_refiner(self) -> bool {
        self != Strategy::Static
    }

    /// Language the tracker is queried with.
    pub fn tracker_language(self, dynamic: &str, initial: &str) -> String {
        match self {
            Strategy::Static => initial.to_owned(),
            Strategy::Dynamic1 | Strategy::Dynamic2 => dynamic.to_owned(),
            Strategy::DynamicStatic => format!("{dynamic}{LANGUAGE_SEPARATOR}{initial}"),
        }
    }

    /// Language the refiner is asked to revise.
    pub fn refiner_language<'a>(self, dynamic: &'a str, initial: &'a str) -> &'a str {
        match self {
            Strategy::Dynamic2 => dynamic,
            _ => initial,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplatePolicy {
    /// First frame, repeated.
    InitialOnly,
    /// First frame, anchor frame, previous frame.
    #[default]
    InitialPlusRecent,
}

/// When the anchor frame `N_pre` moves to the current frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// Only after an accepted update.
    #[default]
    OnAccept,
    /// After every refiner call, accepted or not.
    OnInvoke,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub update_interval: usize,
    pub strategy: Strategy,
    pub template_policy: TemplatePolicy,
    pub anchor_policy: AnchorPolicy,
    /// Refiner runs only when the latest confidence is below this; 1.0 keeps it always open.
    pub gate_threshold: f64,
    /// When set, events carry the weighted format reward of each reply.
    pub reward_weights: Option<RewardWeights>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            update_interval: DEFAULT_UPDATE_INTERVAL,
            strategy: Strategy::default(),
            template_policy: TemplatePolicy::default(),
            anchor_policy: AnchorPolicy::default(),
            gate_threshold: 1.0,
            reward_weights: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("sequence has no frames")]
    NoFrames,
    #[error("update interval must be at least 1")]
    ZeroInterval,
    #[error("gate threshold must be finite, got {0}")]
    BadThreshold(f64),
    #[error("initial language is empty")]
    EmptyLanguage,
    #[error("frame {position} is numbered {number}; frames must be numbered 1..=N in order")]
    FrameNumbering { position: usize, number: usize },
    #[error("initial box: {0}")]
    InitialBox(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Weights(#[from] RewardError),
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        if self.update_interval == 0 {
            return Err(LoopError::ZeroInterval);
        }
        if !self.gate_threshold.is_finite() {
            return Err(LoopError::BadThreshold(self.gate_threshold));
        }
        if let Some(w) = &self.reward_weights {
            w.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub frame_index: usize,
    pub previous_anchor_frame: usize,
    pub decision: Decision,
    pub level: FormatLevel,
    pub accepted: bool,
    pub old_language: String,
    pub new_language: String,
    pub think: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format_reward: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// One box per tracked frame; shorter than the sequence when aborted.
    pub output: TrackOutput,
    pub events: Vec<UpdateEvent>,
    pub refiner_calls: usize,
    /// Refiner calls that failed because the endpoint was unreachable.
    pub refiner_unavailable: usize,
    /// Dynamic language at the end of the run.
    pub final_language: String,
    /// Language the tracker would be queried with after the last frame.
    pub final_tracker_language: String,
    /// Set when a tracker failure ended the run early.
    pub aborted: Option<PortError>,
}

impl RunResult {
    pub fn is_complete(&self) -> bool {
        self.aborted.is_none()
    }
}

/// Gate: open when the latest confidence is below `threshold`. A threshold of
/// 1.0 or more keeps it always open, as does an empty history.
pub fn preliminary_gate(history: &[f64], threshold: f64) -> bool {
    threshold >= 1.0 || history.last().is_none_or(|&c| c < threshold)
}

fn template_set(
    frames: &[FrameRef],
    policy: TemplatePolicy,
    anchor: usize,
    t: usize,
) -> [FrameRef; 3] {
    let first = &frames[0];
    match policy {
        TemplatePolicy::InitialOnly => [first.clone(), first.clone(), first.clone()],
        TemplatePolicy::InitialPlusRecent => [
            first.clone(),
            frames[anchor - 1].clone(),
            frames[t.saturating_sub(1).max(1) - 1].clone(),
        ],
    }
}

fn weighted_format(resp: &CoTResponse, weights: &RewardWeights) -> f64 {
    let f = format_rewards(resp);
    weights.w_format1 * f64::from(f.format1) + weights.w_format2 * f64::from(f.format2)
}

/// Runs one sequence. `frames` must be numbered `1..=N` in order.
pub fn run<T: TrackerPort, R: RefinerPort>(
    sequence_id: &str,
    frames: &[FrameRef],
    initial_box: &BoundingBox,
    initial_language: &str,
    mut tracker: T,
    mut refiner: R,
    config: &LoopConfig,
) -> Result<RunResult, LoopError> {
    config.validate()?;
    if frames.is_empty() {
        return Err(LoopError::NoFrames);
    }
    if initial_language.trim().is_empty() {
        return Err(LoopError::EmptyLanguage);
    }
    initial_box.validate()?;
    if let Some((position, f)) = frames.iter().enumerate().find(|(i, f)| f.number != i + 1) {
        return Err(LoopError::FrameNumbering {
            position,
            number: f.number,
        });
    }

    let strategy = config.strategy;
    let u = config.update_interval;
    let mut dynamic = initial_language.to_owned();
    let mut anchor = 1usize;
    let mut boxes = Vec::with_capacity(frames.len());
    let mut confidences = Vec::with_capacity(frames.len());
    let mut events = Vec::new();
    let mut refiner_calls = 0;
    let mut refiner_unavailable = 0;
    let mut aborted = None;

    if let Err(e) = tracker.initialize(&frames[0], initial_box, initial_language) {
        log::error!("{sequence_id}: tracker initialization failed: {e}");
        aborted = Some(e);
    }

    if aborted.is_none() {
        for (i, frame) in frames.iter().enumerate() {
            let t = i + 1;
            let templates = template_set(frames, config.template_policy, anchor, t);
            let language = strategy.tracker_language(&dynamic, initial_language);
            match tracker.track(&templates, frame, &language) {
                Ok(r) => {
                    boxes.push(r.bbox);
                    confidences.push(r.confidence);
                }
                Err(e) => {
                    log::error!("{sequence_id}: tracker failed at frame {t}: {e}");
                    aborted = Some(e);
                    break;
                }
            }

            if !strategy.calls_refiner()
                || t % u != 0
                || !preliminary_gate(&confidences, config.gate_threshold)
            {
                continue;
            }
            refiner_calls += 1;
            let previous_anchor = anchor;
            let old = dynamic.clone();
            let ask = strategy
                .refiner_language(&dynamic, initial_language)
                .to_owned();
            let event = match refiner.refine(&frames[anchor - 1], frame, &ask) {
                Ok(resp) => {
                    let accepted = resp.accepts_update() && !resp.answer.is_empty();
                    let decision = match resp.effective_decision() {
                        Decision::Yes if !accepted => Decision::Invalid,
                        d => d,
                    };
                    if accepted {
                        dynamic = resp.answer.clone();
                    }
                    if accepted || config.anchor_policy == AnchorPolicy::OnInvoke {
                        anchor = t;
                    }
                    UpdateEvent {
                        frame_index: t,
                        previous_anchor_frame: previous_anchor,
                        decision,
                        level: resp.level,
                        accepted,
                        old_language: old,
                        new_language: dynamic.clone(),
                        think: resp.think.clone(),
                        error: None,
                        format_reward: config
                            .reward_weights
                            .as_ref()
                            .map(|w| weighted_format(&resp, w)),
                    }
                }
                Err(e) => {
                    log::warn!("{sequence_id}: refiner failed at frame {t}: {e}");
                    if matches!(e, PortError::Unavailable(_)) {
                        refiner_unavailable += 1;
                    }
                    if config.anchor_policy == AnchorPolicy::OnInvoke {
                        anchor = t;
                    }
                    UpdateEvent {
                        frame_index: t,
                        previous_anchor_frame: previous_anchor,
                        decision: Decision::Invalid,
                        level: FormatLevel::Malformed,
                        accepted: false,
                        old_language: old.clone(),
                        new_language: old,
                        think: String::new(),
                        error: Some(e.to_string()),
                        format_reward: None,
                    }
                }
            };
            events.push(event);
        }
    }

    Ok(RunResult {
        output: TrackOutput {
            sequence_id: sequence_id.to_owned(),
            boxes,
        },
        events,
        refiner_calls,
        refiner_unavailable,
        final_tracker_language: strategy.tracker_language(&dynamic, initial_language),
        final_language: dynamic,
        aborted,
    })
}

pub fn write_events<W: Write>(out: W, events: &[UpdateEvent]) -> std::io::Result<()> {
    write_jsonl(out, events)
}

/// Returns the ground truth jittered by uniform noise in `[-noise_px, noise_px]`
/// per coordinate; width and height are clamped at 0. Confidence is the IoU
/// with the ground truth. The jitter of frame `t` depends only on `seed` and `t`.
#[derive(Debug, Clone)]
pub struct OracleTracker {
    gt: Vec<BoundingBox>,
    noise_px: f64,
    seed: u64,
}

impl OracleTracker {
    pub fn new(gt: Vec<BoundingBox>, noise_px: f64, seed: u64) -> Self {
        assert!(
            noise_px.is_finite() && noise_px >= 0.0,
            "noise_px must be finite and non-negative"
        );
        Self { gt, noise_px, seed }
    }

    pub fn predict(&self, number: usize) -> Option<TrackResult> {
        let gt = *self.gt.get(number.checked_sub(1)?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(number as u64);
        let mut jitter = || rng.random_range(-1.0..=1.0) * self.noise_px;
        let bbox = BoundingBox {
            x: gt.x + jitter(),
            y: gt.y + jitter(),
            w: (gt.w + jitter()).max(0.0),
            h: (gt.h + jitter()).max(0.0),
        };
        Some(TrackResult {
            bbox,
            confidence: iou_unchecked(&bbox, &gt),
        })
    }
}

impl TrackerPort for OracleTracker {
    fn initialize(
        &mut self,
        _frame: &FrameRef,
        _bbox: &BoundingBox,
        _language: &str,
    ) -> Result<(), PortError> {
        Ok(())
    }

    fn track(
        &mut self,
        _templates: &[FrameRef; 3],
        search: &FrameRef,
        _language: &str,
    ) -> Result<TrackResult, PortError> {
        self.predict(search.number).ok_or_else(|| {
            PortError::Failed(format!("no ground truth for frame {}", search.number))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackerCall {
    pub templates: [usize; 3],
    pub search: usize,
    pub language: String,
}

/// Wraps a tracker and records every `track` call.
#[derive(Debug)]
pub struct RecordingTracker<T> {
    pub inner: T,
    pub calls: Vec<TrackerCall>,
}

impl<T> RecordingTracker<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            calls: Vec::new(),
        }
    }
}

impl<T: TrackerPort> TrackerPort for RecordingTracker<T> {
    fn initialize(
        &mut self,
        frame: &FrameRef,
        bbox: &BoundingBox,
        language: &str,
    ) -> Result<(), PortError> {
        self.inner.initialize(frame, bbox, language)
    }

    fn track(
        &mut self,
        templates: &[FrameRef; 3],
        search: &FrameRef,
        language: &str,
    ) -> Result<TrackResult, PortError> {
        self.calls.push(TrackerCall {
            templates: [
                templates[0].number,
                templates[1].number,
                templates[2].number,
            ],
            search: search.number,
            language: language.to_owned(),
        });
        self.inner.track(templates, search, language)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptStep {
    Reply(String),
    Fail(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinerCall {
    pub anchor: usize,
    pub current: usize,
    pub language: String,
}

/// Replays a fixed script, repeating the last step, and records its calls.
#[derive(Debug, Clone)]
pub struct ScriptedRefiner {
    script: Vec<ScriptStep>,
    pub calls: Vec<RefinerCall>,
}

impl ScriptedRefiner {
    pub fn new(script: Vec<ScriptStep>) -> Self {
        assert!(!script.is_empty(), "empty script");
        Self {
            script,
            calls: Vec::new(),
        }
    }

    pub fn always(reply: &str) -> Self {
        Self::new(vec![ScriptStep::Reply(reply.to_owned())])
    }

    pub fn replies<S: AsRef<str>>(replies: &[S]) -> Self {
        Self::new(
            replies
                .iter()
                .map(|r| ScriptStep::Reply(r.as_ref().to_owned()))
                .collect(),
        )
    }
}

impl RefinerPort for ScriptedRefiner {
    fn refine(
        &mut self,
        anchor: &FrameRef,
        current: &FrameRef,
        language: &str,
    ) -> Result<CoTResponse, PortError> {
        let step = self.script[self.calls.len().min(self.script.len() - 1)].clone();
        self.calls.push(RefinerCall {
            anchor: anchor.number,
            current: current.number,
            language: language.to_owned(),
        });
        match step {
            ScriptStep::Reply(text) => Ok(parse(&text)),
            ScriptStep::Fail(msg) => Err(PortError::Failed(msg)),
        }
    }
}

/// Refiner backed by a chat-completions endpoint. Frame images are sent as
/// file references.
pub struct ChatRefiner {
    client: Arc<ChatClient>,
    pub system_prompt: String,
    pub sampling: Sampling,
}

impl ChatRefiner {
    pub fn new(config: EndpointConfig) -> Self {
        Self::shared(Arc::new(ChatClient::new(config)))
    }

    /// Several refiners on one client share its in-flight limit.
    pub fn shared(client: Arc<ChatClient>) -> Self {
        Self {
            client,
            system_prompt: DEFAULT_SYSTEM_PROMPT.to_owned(),
            sampling: Sampling::default(),
        }
    }

    pub fn with_system_prompt(mut self, prompt: String) -> Self {
        self.system_prompt = prompt;
        self
    }
}

impl RefinerPort for ChatRefiner {
    fn refine(
        &mut self,
        anchor: &FrameRef,
        current: &FrameRef,
        language: &str,
    ) -> Result<CoTResponse, PortError> {
        let req = RefinerRequest {
            template_image: ImagePayload::Path(anchor.image.clone()),
            search_image: ImagePayload::Path(current.image.clone()),
            initial_language: language.to_owned(),
            system_prompt: self.system_prompt.clone(),
            sampling: self.sampling,
        };
        Ok(self.client.refine(&req)?)
    }
}

#[derive(Serialize)]
struct InitBody<'a> {
    session: &'a str,
    image: &'a str,
    #[serde(rename = "box")]
    bbox: &'a BoundingBox,
    language: &'a str,
}

#[derive(Serialize)]
struct TrackBody<'a> {
    session: &'a str,
    templates: [&'a str; 3],
    search: &'a str,
    frame: usize,
    language: &'a str,
}

/// Tracker served over HTTP: `POST {base}/init` then `POST {base}/track` per
/// frame, the latter answering `{"box": [x, y, w, h], "confidence": c}`.
/// Every body carries a `session` field so one server can track several
/// sequences at once.
pub struct RemoteTracker {
    transport: Arc<JsonTransport>,
    base: String,
    session: String,
}

impl RemoteTracker {
    pub fn new(base: &str, session: &str, config: EndpointConfig) -> Self {
        Self::shared(base, session, Arc::new(JsonTransport::new(config)))
    }

    pub fn shared(base: &str, session: &str, transport: Arc<JsonTransport>) -> Self {
        Self {
            transport,
            base: base.trim_end_matches('/').to_owned(),
            session: session.to_owned(),
        }
    }
}

impl TrackerPort for RemoteTracker {
    fn initialize(
        &mut self,
        frame: &FrameRef,
        bbox: &BoundingBox,
        language: &str,
    ) -> Result<(), PortError> {
        let body = InitBody {
            session: &self.session,
            image: &frame.image,
            bbox,
            language,
        };
        self.transport
            .post_json(&format!("{}/init", self.base), &body)?;
        Ok(())
    }

    fn track(
        &mut self,
        templates: &[FrameRef; 3],
        search: &FrameRef,
        language: &str,
    ) -> Result<TrackResult, PortError> {
        let body = TrackBody {
            session: &self.session,
            templates: [
                &templates[0].image,
                &templates[1].image,
                &templates[2].image,
            ],
            search: &search.image,
            frame: search.number,
            language,
        };
        let text = self
            .transport
            .post_json(&format!("{}/track", self.base), &body)?;
        let r: TrackResult = serde_json::from_str(&text)
            .map_err(|e| PortError::Failed(format!("bad tracker reply: {e}")))?;
        if !r.confidence.is_finite() || !(0.0..=1.0).contains(&r.confidence) || !r.bbox.is_valid() {
            return Err(PortError::Failed(format!(
                "tracker reply out of range: {text}"
            )));
        }
        Ok(r)
    }
}
