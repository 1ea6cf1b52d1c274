//! Chat-completions client for the language refiner, plus the JSON transport
//! shared with the remote tracker.
//!
//! Requests follow the common chat-completions shape: a `model` name, a
//! `messages` array holding the system prompt and a user turn made of text and
//! `image_url` parts, and the sampling fields `temperature` and `max_tokens`.
//! The reply text is read from `choices[0].message.content` and handed to
//! [`response_format::parse`](crate::response_format::parse).

pub mod stub;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::response_format::{parse, CoTResponse};

pub const ENV_URL: &str = "REFINER_URL";
pub const ENV_KEY: &str = "REFINER_KEY";

/// Default system prompt; replace it through configuration.
pub const DEFAULT_SYSTEM_PROMPT: &str = include_str!("../../assets/system_prompt.txt");

const EXCERPT_LEN: usize = 200;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("endpoint unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: usize, last: String },
    #[error("endpoint returned HTTP {status}: {excerpt}")]
    Endpoint { status: u16, excerpt: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed endpoint reply: {0}")]
    MalformedReply(String),
}

impl ClientError {
    /// True for failures that mean the endpoint could not be reached or kept failing.
    pub fn is_unavailable(&self) -> bool {
        matches!(self, ClientError::Unavailable { .. })
    }
}

fn excerpt(body: &str) -> String {
    body.chars().take(EXCERPT_LEN).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    /// Sleep before attempt `attempt` (1-based); doubles each retry.
    pub fn delay_before(&self, attempt: usize) -> Duration {
        if attempt <= 1 {
            return Duration::ZERO;
        }
        Duration::from_millis(
            self.base_delay_ms
                .saturating_mul(1 << (attempt - 2).min(16)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Full URL requests are POSTed to.
    pub url: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model: String,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            api_key: None,
            model: "refiner".into(),
            timeout_ms: 60_000,
            retry: RetryPolicy::default(),
            max_in_flight: 4,
        }
    }
}

impl EndpointConfig {
    pub fn with_url(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            ..Self::default()
        }
    }

    /// Applies `REFINER_URL` / `REFINER_KEY` when set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(url) = std::env::var(ENV_URL) {
            if !url.is_empty() {
                self.url = url;
            }
        }
        if let Ok(key) = std::env::var(ENV_KEY) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
        self
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *p == 0 {
            p = self.freed.wait(p).unwrap_or_else(|e| e.into_inner());
        }
        *p -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

/// Blocking JSON-over-HTTP transport with retries and an in-flight limit.
/// Shareable across threads.
pub struct JsonTransport {
    agent: ureq::Agent,
    config: EndpointConfig,
    in_flight: Semaphore,
}

impl JsonTransport {
    pub fn new(config: EndpointConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        let in_flight = Semaphore::new(config.max_in_flight);
        Self {
            agent,
            config,
            in_flight,
        }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// POSTs `body` to `url`. Transport failures, 429 and 5xx are retried;
    /// other non-2xx statuses fail immediately.
    pub fn post(&self, url: &str, body: &[u8]) -> Result<String, ClientError> {
        let _permit = self.in_flight.acquire();
        let retry = self.config.retry;
        let attempts = retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            thread::sleep(retry.delay_before(attempt));
            let mut req = self
                .agent
                .post(url)
                .header("Content-Type", "application/json");
            if let Some(key) = &self.config.api_key {
                req = req.header("Authorization", format!("Bearer {key}"));
            }
            match req.send(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if (200..300).contains(&status) {
                        return Ok(text);
                    }
                    if status == 429 || status >= 500 {
                        last = format!("HTTP {status}: {}", excerpt(&text));
                        log::warn!("{url}: attempt {attempt}/{attempts} failed with {last}");
                        continue;
                    }
                    return Err(ClientError::Endpoint {
                        status,
                        excerpt: excerpt(&text),
                    });
                }
                Err(e) => {
                    last = e.to_string();
                    log::warn!("{url}: attempt {attempt}/{attempts} failed: {last}");
                }
            }
        }
        Err(ClientError::Unavailable { attempts, last })
    }

    pub fn post_json<T: Serialize>(&self, url: &str, payload: &T) -> Result<String, ClientError> {
        let body =
            serde_json::to_vec(payload).map_err(|e| ClientError::InvalidRequest(e.to_string()))?;
        self.post(url, &body)
    }
}

/// An image handed to the refiner, by reference or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImagePayload {
    /// Local path, sent as a `file://` URL.
    Path(String),
    /// Any URL the endpoint can fetch (`http(s)://`, `file://`, `data:`).
    Url(String),
    Base64 {
        mime: String,
        data: String,
    },
}

impl ImagePayload {
    /// Reads a file and embeds it as base64.
    pub fn inline_file(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        let mime = match ext.as_str() {
            "png" => "image/png",
            "webp" => "image/webp",
            "gif" => "image/gif",
            _ => "image/jpeg",
        };
        Ok(ImagePayload::Base64 {
            mime: mime.into(),
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        })
    }

    pub fn url(&self) -> String {
        match self {
            ImagePayload::Path(p) => format!("file://{p}"),
            ImagePayload::Url(u) => u.clone(),
            ImagePayload::Base64 { mime, data } => format!("data:{mime};base64,{data}"),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            ImagePayload::Path(s) | ImagePayload::Url(s) => s.is_empty(),
            ImagePayload::Base64 { data, .. } => data.is_empty(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerRequest {
    pub template_image: ImagePayload,
    pub search_image: ImagePayload,
    pub initial_language: String,
    pub system_prompt: String,
    pub sampling: Sampling,
}

impl RefinerRequest {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.template_image.is_empty() || self.search_image.is_empty() {
            return Err(ClientError::InvalidRequest(
                "both images are required".into(),
            ));
        }
        if self.initial_language.trim().is_empty() || self.system_prompt.trim().is_empty() {
            return Err(ClientError::InvalidRequest(
                "language and system prompt must be non-empty".into(),
            ));
        }
        if !self.sampling.temperature.is_finite() || self.sampling.temperature < 0.0 {
            return Err(ClientError::InvalidRequest(format!(
                "temperature {}",
                self.sampling.temperature
            )));
        }
        Ok(())
    }
}

/// The user-turn instruction that follows the two images.
pub fn user_instruction(initial_language: &str) -> String {
    format!(
        "Initial description of the target: {initial_language}\n\
         The first image is the template frame and the second is the current search frame. \
         Reason about how the target has changed inside <think></think>, answer yes or no inside <d></d> \
         to say whether the description should be updated, and give the description to use inside <answer></answer>."
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: MessageContent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MessageContent {
    Text(String),
    Parts(Vec<ContentPart>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

/// Builds the wire request. Pure: equal inputs give byte-identical JSON.
pub fn compose_request(req: &RefinerRequest, model: &str) -> ChatRequest {
    let text = |t: &str| ContentPart::Text { text: t.to_owned() };
    let image = |p: &ImagePayload| ContentPart::ImageUrl {
        image_url: ImageUrl { url: p.url() },
    };
    ChatRequest {
        model: model.to_owned(),
        messages: vec![
            ChatMessage {
                role: "system".into(),
                content: MessageContent::Text(req.system_prompt.clone()),
            },
            ChatMessage {
                role: "user".into(),
                content: MessageContent::Parts(vec![
                    text("Template frame:"),
                    image(&req.template_image),
                    text("Search frame:"),
                    image(&req.search_image),
                    text(&user_instruction(&req.initial_language)),
                ]),
            },
        ],
        temperature: req.sampling.temperature,
        max_tokens: req.sampling.max_tokens,
    }
}

/// Pulls the assistant text out of a chat-completions reply body.
pub fn extract_reply_text(body: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(body).ok()?;
    let content = v.get("choices")?.get(0)?.get("message")?.get("content")?;
    match content {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(|t| t.as_str()))
                .collect::<Vec<_>>()
                .concat(),
        ),
        _ => None,
    }
}

/// Result of sampling several replies for one request.
#[derive(Debug)]
pub struct GroupSample {
    /// Successful replies in request order.
    pub responses: Vec<CoTResponse>,
    /// `(call index, error)` for each failed call.
    pub failures: Vec<(usize, ClientError)>,
}

pub struct ChatClient {
    transport: JsonTransport,
}

impl ChatClient {
    pub fn new(config: EndpointConfig) -> Self {
        Self {
            transport: JsonTransport::new(config),
        }
    }

    pub fn config(&self) -> &EndpointConfig {
        self.transport.config()
    }

    /// One exchange. A reply that is not a chat completion, or whose text
    /// lacks the tags, comes back as a level-0 response rather than an error.
    pub fn refine(&self, req: &RefinerRequest) -> Result<CoTResponse, ClientError> {
        req.validate()?;
        let payload = compose_request(req, &self.config().model);
        let body = self.transport.post_json(&self.config().url, &payload)?;
        Ok(match extract_reply_text(&body) {
            Some(text) => parse(&text),
            None => parse(&body),
        })
    }

    /// `n` independent exchanges, at most `max_in_flight` at a time.
    pub fn sample_group(&self, req: &RefinerRequest, n: usize) -> Result<GroupSample, ClientError> {
        if n == 0 {
            return Err(ClientError::InvalidRequest(
                "group size must be at least 1".into(),
            ));
        }
        req.validate()?;
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<CoTResponse, ClientError>>>> =
            Mutex::new((0..n).map(|_| None).collect());
        let workers = n.min(self.config().max_in_flight.max(1));
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let r = self.refine(req);
                    slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
                });
            }
        });
        let mut responses = Vec::with_capacity(n);
        let mut failures = Vec::new();
        for (i, slot) in slots
            .into_inner()
            .unwrap_or_else(|e| e.into_inner())
            .into_iter()
            .enumerate()
        {
            match slot.expect("every slot is filled") {
                Ok(r) => responses.push(r),
                Err(e) => {
                    log::warn!("sample {i} of {n} failed: {e}");
                    failures.push((i, e));
                }
            }
        }
        Ok(GroupSample {
            responses,
            failures,
        })
    }
}
