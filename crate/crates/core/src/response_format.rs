//! Parser for the tagged reasoning reply `<think>…</think><d>…</d><answer>…</answer>`
//! and the two format rewards derived from it.
//!
//! Well-formedness levels:
//!
//! * **0**: at least one of the opening identifiers `<think>`, `<d>`, `<answer>` is missing.
//! * **1**: all three opening identifiers occur somewhere in the reply.
//! * **2**: additionally each tag pair is closed, the three spans are disjoint and
//!   appear in the order think, d, answer, and the `<d>` content (trimmed,
//!   lowercased) is exactly `yes` or `no`.
//!
//! Tags are case-sensitive and whitespace between spans is allowed. For each tag
//! the span runs from its first opening identifier to the first matching closing
//! identifier after it.

use std::fmt;

use serde::{Deserialize, Serialize};

const THINK: (&str, &str) = ("<think>", "</think>");
const DECISION: (&str, &str) = ("<d>", "</d>");
const ANSWER: (&str, &str) = ("<answer>", "</answer>");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Yes,
    No,
    Invalid,
}

impl Decision {
    fn from_content(content: &str) -> Self {
        match content.trim().to_lowercase().as_str() {
            "yes" => Decision::Yes,
            "no" => Decision::No,
            _ => Decision::Invalid,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Yes => "yes",
            Decision::No => "no",
            Decision::Invalid => "invalid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum FormatLevel {
    Malformed = 0,
    TagsPresent = 1,
    WellFormed = 2,
}

impl From<FormatLevel> for u8 {
    fn from(l: FormatLevel) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for FormatLevel {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(FormatLevel::Malformed),
            1 => Ok(FormatLevel::TagsPresent),
            2 => Ok(FormatLevel::WellFormed),
            other => Err(format!("format level must be 0, 1 or 2, got {other}")),
        }
    }
}

/// A parsed reply. `raw` is kept verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoTResponse {
    pub raw: String,
    pub think: String,
    pub decision: Decision,
    pub answer: String,
    pub level: FormatLevel,
}

impl CoTResponse {
    pub fn is_well_formed(&self) -> bool {
        self.level == FormatLevel::WellFormed
    }

    /// True when the reply is well formed and asks for a language update.
    pub fn accepts_update(&self) -> bool {
        self.is_well_formed() && self.decision == Decision::Yes
    }

    /// Decision usable for the judge reward: anything below level 2 counts as invalid.
    pub fn effective_decision(&self) -> Decision {
        if self.is_well_formed() {
            self.decision
        } else {
            Decision::Invalid
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Span {
    open: usize,
    content_start: usize,
    content_end: usize,
    close_end: usize,
}

fn find_span(raw: &str, (open_tag, close_tag): (&str, &str)) -> Option<Span> {
    let open = raw.find(open_tag)?;
    let content_start = open + open_tag.len();
    let rel = raw[content_start..].find(close_tag)?;
    let content_end = content_start + rel;
    Some(Span {
        open,
        content_start,
        content_end,
        close_end: content_end + close_tag.len(),
    })
}

pub fn parse(raw: &str) -> CoTResponse {
    let all_open = [THINK.0, DECISION.0, ANSWER.0]
        .iter()
        .all(|t| raw.contains(t));
    if !all_open {
        return CoTResponse {
            raw: raw.to_owned(),
            think: String::new(),
            decision: Decision::Invalid,
            answer: String::new(),
            level: FormatLevel::Malformed,
        };
    }

    let think = find_span(raw, THINK);
    let decision = find_span(raw, DECISION);
    let answer = find_span(raw, ANSWER);
    let text = |s: Option<Span>| {
        s.map(|s| raw[s.content_start..s.content_end].trim().to_owned())
            .unwrap_or_default()
    };
    let parsed_decision = decision
        .map(|s| Decision::from_content(&raw[s.content_start..s.content_end]))
        .unwrap_or(Decision::Invalid);

    let ordered = match (think, decision, answer) {
        (Some(t), Some(d), Some(a)) => t.close_end <= d.open && d.close_end <= a.open,
        _ => false,
    };
    let level = if ordered && parsed_decision != Decision::Invalid {
        FormatLevel::WellFormed
    } else {
        FormatLevel::TagsPresent
    };

    CoTResponse {
        raw: raw.to_owned(),
        think: text(think),
        decision: parsed_decision,
        answer: text(answer),
        level,
    }
}

/// Lossy entry point for replies that may not be valid UTF-8.
pub fn parse_bytes(raw: &[u8]) -> CoTResponse {
    parse(&String::from_utf8_lossy(raw))
}

/// Reassembles the canonical tag order from the extracted fields.
pub fn render(resp: &CoTResponse) -> String {
    format!(
        "{}{}{}{}{}{}{}{}{}",
        THINK.0,
        resp.think,
        THINK.1,
        DECISION.0,
        resp.decision,
        DECISION.1,
        ANSWER.0,
        resp.answer,
        ANSWER.1
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatRewards {
    pub format1: u8,
    pub format2: u8,
}

pub fn format_rewards(resp: &CoTResponse) -> FormatRewards {
    FormatRewards {
        format1: u8::from(resp.level >= FormatLevel::TagsPresent),
        format2: u8::from(resp.level == FormatLevel::WellFormed),
    }
}
