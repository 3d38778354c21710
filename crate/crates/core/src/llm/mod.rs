//! Text-level guards: paraphrase, few-shot and two-stage chained rewriting
//! through a chat-completion client.

mod client;
mod extract;
mod guard;
mod template;

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{read_journal, ChatClient, FnClient, HttpChatClient, JournalRecord, JournaledClient, ScriptedClient};
pub use extract::{extract_rewrite, parse_bullets, ExtractRules};
pub use guard::{LlmGuard, RunSummary};
pub use template::{render_prompt, PromptTemplate, TemplateId, PLACEHOLDER};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("template {template}: {message}")]
    Template { template: TemplateId, message: String },
    #[error("invalid transcript: {0}")]
    Transcript(String),
    #[error("chat request failed: {0}")]
    Request(String),
    #[error("chat client gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("nothing left after extracting the rewrite from {0:?}")]
    EmptyExtraction(String),
    #[error("review {review}: {source}")]
    Review {
        review: String,
        #[source]
        source: Box<LlmError>,
    },
    #[error("processed corpus record {index}: {message}")]
    Processed { index: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Sampling defaults favour reproducibility: greedy decoding and a fixed seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
            seed: Some(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTranscript {
    pub model_id: String,
    pub sampling: SamplingParams,
    pub messages: Vec<ChatMessage>,
}

impl ChatTranscript {
    /// Optional leading system message, then strictly alternating user and
    /// assistant turns starting with a user turn.
    pub fn validate(&self) -> Result<(), LlmError> {
        let mut turns = self.messages.iter().peekable();
        if turns.peek().is_some_and(|m| m.role == Role::System) {
            turns.next();
        }
        let mut expected = Role::User;
        let mut any = false;
        for m in turns {
            if m.role != expected {
                return Err(LlmError::Transcript(format!(
                    "expected a {expected:?} turn, found {:?}",
                    m.role
                )));
            }
            expected = if expected == Role::User {
                Role::Assistant
            } else {
                Role::User
            };
            any = true;
        }
        if !any {
            return Err(LlmError::Transcript("no user turn".into()));
        }
        Ok(())
    }

    /// Whether the transcript ends with a user turn awaiting a reply.
    pub fn awaiting_reply(&self) -> bool {
        self.messages.last().is_some_and(|m| m.role == Role::User)
    }

    /// Content-address of the request: model, sampling and every message.
    pub fn cache_key(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("transcript serializes");
        crate::digest::sha256_hex(canonical)
    }
}

/// Text-level rewriting strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextStrategy {
    Paraphrase,
    FewShot,
    Chain,
}

impl TextStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            TextStrategy::Paraphrase => "paraphrase",
            TextStrategy::FewShot => "few_shot",
            TextStrategy::Chain => "chain",
        }
    }
}

impl fmt::Display for TextStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TextStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paraphrase" => Ok(TextStrategy::Paraphrase),
            "few_shot" | "few-shot" => Ok(TextStrategy::FewShot),
            "chain" => Ok(TextStrategy::Chain),
            other => Err(format!("unknown text strategy {other:?}")),
        }
    }
}

/// A guard's rewrite of one review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessedReview {
    pub id: String,
    pub source_id: String,
    pub setting_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_spans: Option<Vec<String>>,
    #[serde(default)]
    pub raw_responses: Vec<String>,
}

impl ProcessedReview {
    pub fn processed_id(setting_id: &str, source_id: &str) -> String {
        format!("{setting_id}:{source_id}")
    }
}

pub fn write_processed(mut out: impl Write, reviews: &[ProcessedReview]) -> std::io::Result<()> {
    for r in reviews {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_processed(path: impl AsRef<Path>, reviews: &[ProcessedReview]) -> Result<(), LlmError> {
    let path = path.as_ref();
    let io_err = |source| LlmError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    write_processed(std::io::BufWriter::new(file), reviews).map_err(io_err)
}

/// Reads and validates a processed corpus: non-empty texts, unique ids and
/// source ids.
pub fn read_processed(reader: impl BufRead) -> Result<Vec<ProcessedReview>, LlmError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    let mut sources = HashSet::new();
    let mut index = 0;
    for line in reader.lines() {
        let line = line.map_err(|source| LlmError::Io {
            path: String::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        index += 1;
        let bad = |message: String| LlmError::Processed { index, message };
        let r: ProcessedReview = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if r.text.trim().is_empty() {
            return Err(bad("empty text".into()));
        }
        if !ids.insert(r.id.clone()) {
            return Err(bad(format!("duplicate id {:?}", r.id)));
        }
        if !sources.insert(r.source_id.clone()) {
            return Err(bad(format!("duplicate source id {:?}", r.source_id)));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn load_processed(path: impl AsRef<Path>) -> Result<Vec<ProcessedReview>, LlmError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| LlmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_processed(BufReader::new(file))
}
