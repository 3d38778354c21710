use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChatMessage, ChatTranscript, LlmError, SamplingParams};
use crate::retry::RetryPolicy;

/// One chat-completion round trip: the transcript must end with a user turn,
/// and the assistant's reply text is returned.
pub trait ChatClient: Send + Sync {
    fn complete(&self, transcript: &ChatTranscript) -> Result<String, LlmError>;
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

/// OpenAI-compatible `chat/completions` endpoint.
pub struct HttpChatClient {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub const DEFAULT_ENDPOINT: &'static str = "https://api.openai.com/v1/chat/completions";

    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(180)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            api_key,
            agent,
        }
    }

    /// Reads the API key from the named environment variable, if set.
    pub fn from_env(endpoint: impl Into<String>, api_key_var: &str) -> Self {
        Self::new(endpoint, std::env::var(api_key_var).ok().filter(|k| !k.is_empty()))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, transcript: &ChatTranscript) -> Result<String, LlmError> {
        let body = WireRequest {
            model: &transcript.model_id,
            messages: &transcript.messages,
            temperature: transcript.sampling.temperature,
            max_tokens: transcript.sampling.max_tokens,
            seed: transcript.sampling.seed,
        };
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(&body).map_err(|e| LlmError::Request(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.body_mut().read_to_string().unwrap_or_default();
            return Err(LlmError::Request(format!("endpoint returned {status}: {text}")));
        }
        let parsed: WireResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::Request(format!("malformed response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Request("response has no message content".into()))
    }
}

/// Journal line: one completed round trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub key: String,
    pub model_id: String,
    pub sampling: SamplingParams,
    pub messages: Vec<ChatMessage>,
    pub response: String,
}

impl JournalRecord {
    pub fn transcript(&self) -> ChatTranscript {
        ChatTranscript {
            model_id: self.model_id.clone(),
            sampling: self.sampling,
            messages: self.messages.clone(),
        }
    }
}

/// Wraps a client with retries, a content-addressed response cache and an
/// append-only transcript journal. Reopening the journal restores the cache,
/// so interrupted corpus runs resume where they stopped.
pub struct JournaledClient<C> {
    inner: C,
    retry: RetryPolicy,
    cache: RwLock<HashMap<String, String>>,
    journal: Option<Mutex<File>>,
    network_calls: AtomicUsize,
}

impl<C: ChatClient> JournaledClient<C> {
    pub fn in_memory(inner: C, retry: RetryPolicy) -> Self {
        Self {
            inner,
            retry,
            cache: RwLock::default(),
            journal: None,
            network_calls: AtomicUsize::new(0),
        }
    }

    pub fn open(inner: C, retry: RetryPolicy, journal: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = journal.as_ref();
        let io_err = |source| LlmError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut cache = HashMap::new();
        if path.exists() {
            for record in read_journal(path)? {
                cache.insert(record.key, record.response);
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        Ok(Self {
            inner,
            retry,
            cache: RwLock::new(cache),
            journal: Some(Mutex::new(file)),
            network_calls: AtomicUsize::new(0),
        })
    }

    /// Round trips that reached the inner client, retries included.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    fn append(&self, record: &JournalRecord) -> Result<(), LlmError> {
        if let Some(journal) = &self.journal {
            let mut line = serde_json::to_vec(record).expect("record serializes");
            line.push(b'\n');
            let mut file = journal.lock().expect("poisoned");
            file.write_all(&line)
                .and_then(|_| file.flush())
                .map_err(|source| LlmError::Io {
                    path: "transcript journal".into(),
                    source,
                })?;
        }
        Ok(())
    }
}

impl<C: ChatClient> ChatClient for JournaledClient<C> {
    fn complete(&self, transcript: &ChatTranscript) -> Result<String, LlmError> {
        transcript.validate()?;
        if !transcript.awaiting_reply() {
            return Err(LlmError::Transcript("last turn must be a user turn".into()));
        }
        let key = transcript.cache_key();
        if let Some(hit) = self.cache.read().expect("poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let mut attempts = 0;
        let response = self
            .retry
            .run("chat completion", |attempt| {
                attempts = attempt;
                self.network_calls.fetch_add(1, Ordering::SeqCst);
                self.inner.complete(transcript)
            })
            .map_err(|e| LlmError::Exhausted {
                attempts,
                last: e.to_string(),
            })?;
        self.append(&JournalRecord {
            key: key.clone(),
            model_id: transcript.model_id.clone(),
            sampling: transcript.sampling,
            messages: transcript.messages.clone(),
            response: response.clone(),
        })?;
        self.cache.write().expect("poisoned").insert(key, response.clone());
        Ok(response)
    }
}

pub fn read_journal(path: impl AsRef<Path>) -> Result<Vec<JournalRecord>, LlmError> {
    let path = path.as_ref();
    let io_err = |source| LlmError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => records.push(r),
            // A torn final line from an interrupted run is dropped.
            Err(e) => log::warn!("{}: skipping journal line {}: {e}", path.display(), n + 1),
        }
    }
    Ok(records)
}

/// Replays canned replies in order; errors once the script runs out.
#[derive(Default)]
pub struct ScriptedClient {
    replies: Mutex<VecDeque<Result<String, String>>>,
    seen: Mutex<Vec<ChatTranscript>>,
}

impl ScriptedClient {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            replies: Mutex::new(replies.into_iter().map(|r| Ok(r.into())).collect()),
            seen: Mutex::default(),
        }
    }

    pub fn push_failure(&self, message: impl Into<String>) {
        self.replies.lock().expect("poisoned").push_back(Err(message.into()));
    }

    /// Every transcript received, in order.
    pub fn requests(&self) -> Vec<ChatTranscript> {
        self.seen.lock().expect("poisoned").clone()
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&self, transcript: &ChatTranscript) -> Result<String, LlmError> {
        self.seen.lock().expect("poisoned").push(transcript.clone());
        match self.replies.lock().expect("poisoned").pop_front() {
            Some(Ok(r)) => Ok(r),
            Some(Err(e)) => Err(LlmError::Request(e)),
            None => Err(LlmError::Request("script exhausted".into())),
        }
    }
}

/// Client backed by a closure, for deterministic offline runs.
pub struct FnClient<F>(pub F);

impl<F> ChatClient for FnClient<F>
where
    F: Fn(&ChatTranscript) -> Result<String, LlmError> + Send + Sync,
{
    fn complete(&self, transcript: &ChatTranscript) -> Result<String, LlmError> {
        (self.0)(transcript)
    }
}

impl<T: ChatClient + ?Sized> ChatClient for &T {
    fn complete(&self, transcript: &ChatTranscript) -> Result<String, LlmError> {
        (**self).complete(transcript)
    }
}

impl<T: ChatClient + ?Sized> ChatClient for std::sync::Arc<T> {
    fn complete(&self, transcript: &ChatTranscript) -> Result<String, LlmError> {
        (**self).complete(transcript)
    }
}

impl<T: ChatClient + ?Sized> ChatClient for Box<T> {
    fn complete(&self, transcript: &ChatTranscript) -> Result<String, LlmError> {
        (**self).complete(transcript)
    }
}
