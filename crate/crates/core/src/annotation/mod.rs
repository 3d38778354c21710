//! Two-stage human rewriting: annotators list the sentiment-bearing spans of
//! a review, then write a neutral version of it. State lives in memory and
//! every change is appended to a JSON-lines journal, synced to disk before it
//! is acknowledged and replayed on open.

mod http;

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Review;
use crate::llm::ProcessedReview;

pub use http::{router, serve};

pub const HUMAN_SETTING: &str = "human";

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("a session needs at least one review")]
    EmptySubset,
    #[error("review {0:?} appears twice in the subset")]
    DuplicateReview(String),
    #[error("review {review:?} is already assigned in session {session:?}")]
    AlreadyAssigned { review: String, session: String },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("task {task:?} is {state}; cannot accept {stage}")]
    OutOfOrder {
        task: String,
        state: TaskState,
        stage: &'static str,
    },
    #[error("the rewrite is empty")]
    EmptyRewrite,
    #[error("journal {path} line {line}: {message}")]
    Journal { path: String, line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Pending,
    Stage1Done,
    Complete,
}

impl std::fmt::Display for TaskState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskState::Pending => "pending",
            TaskState::Stage1Done => "stage1_done",
            TaskState::Complete => "complete",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub task_id: String,
    pub annotator_id: String,
    pub stage1_spans: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<String>,
    pub stage1_at_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_at_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub session_id: String,
    pub review: Review,
    pub state: TaskState,
    pub assigned_annotator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<AnnotationRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    SessionCreated {
        session_id: String,
        annotator_id: String,
        reviews: Vec<Review>,
        at_ms: u64,
    },
    Stage1 {
        task_id: String,
        spans: Vec<String>,
        at_ms: u64,
    },
    Stage2 {
        task_id: String,
        rewrite: String,
        at_ms: u64,
    },
}

#[derive(Debug, Default, Clone, PartialEq)]
struct State {
    /// Tasks in creation order.
    tasks: Vec<AnnotationTask>,
    by_id: HashMap<String, usize>,
    review_session: HashMap<String, String>,
    sessions: BTreeMap<String, Vec<usize>>,
}

impl State {
    fn check(&self, event: &Event) -> Result<(), AnnotationError> {
        match event {
            Event::SessionCreated { reviews, .. } => {
                if reviews.is_empty() {
                    return Err(AnnotationError::EmptySubset);
                }
                let mut seen = std::collections::HashSet::new();
                for r in reviews {
                    if !seen.insert(r.id.as_str()) {
                        return Err(AnnotationError::DuplicateReview(r.id.clone()));
                    }
                    if let Some(s) = self.review_session.get(&r.id) {
                        return Err(AnnotationError::AlreadyAssigned {
                            review: r.id.clone(),
                            session: s.clone(),
                        });
                    }
                }
            }
            Event::Stage1 { task_id, .. } => {
                let task = self.task(task_id)?;
                if task.state != TaskState::Pending {
                    return Err(AnnotationError::OutOfOrder {
                        task: task_id.clone(),
                        state: task.state,
                        stage: "stage 1",
                    });
                }
            }
            Event::Stage2 { task_id, rewrite, .. } => {
                let task = self.task(task_id)?;
                if task.state != TaskState::Stage1Done {
                    return Err(AnnotationError::OutOfOrder {
                        task: task_id.clone(),
                        state: task.state,
                        stage: "stage 2",
                    });
                }
                if rewrite.trim().is_empty() {
                    return Err(AnnotationError::EmptyRewrite);
                }
            }
        }
        Ok(())
    }

    fn task(&self, task_id: &str) -> Result<&AnnotationTask, AnnotationError> {
        self.by_id
            .get(task_id)
            .map(|&i| &self.tasks[i])
            .ok_or_else(|| AnnotationError::UnknownTask(task_id.to_string()))
    }

    /// Applies an event that passed [`State::check`].
    fn apply(&mut self, event: Event) {
        match event {
            Event::SessionCreated {
                session_id,
                annotator_id,
                reviews,
                ..
            } => {
                let mut indices = Vec::with_capacity(reviews.len());
                for (k, review) in reviews.into_iter().enumerate() {
                    let task_id = format!("{session_id}.{k:04}");
                    let i = self.tasks.len();
                    self.by_id.insert(task_id.clone(), i);
                    self.review_session.insert(review.id.clone(), session_id.clone());
                    self.tasks.push(AnnotationTask {
                        task_id,
                        session_id: session_id.clone(),
                        review,
                        state: TaskState::Pending,
                        assigned_annotator: Some(annotator_id.clone()),
                        record: None,
                    });
                    indices.push(i);
                }
                self.sessions.insert(session_id, indices);
            }
            Event::Stage1 { task_id, spans, at_ms } => {
                let task = &mut self.tasks[self.by_id[&task_id]];
                task.state = TaskState::Stage1Done;
                task.record = Some(AnnotationRecord {
                    task_id,
                    annotator_id: task.assigned_annotator.clone().unwrap_or_default(),
                    stage1_spans: spans,
                    rewrite: None,
                    stage1_at_ms: at_ms,
                    stage2_at_ms: None,
                });
            }
            Event::Stage2 {
                task_id,
                rewrite,
                at_ms,
            } => {
                let task = &mut self.tasks[self.by_id[&task_id]];
                task.state = TaskState::Complete;
                let record = task.record.as_mut().expect("stage 1 precedes stage 2");
                record.rewrite = Some(rewrite);
                record.stage2_at_ms = Some(at_ms);
            }
        }
    }
}

/// Result of an export: complete tasks as processed reviews, plus how many
/// tasks were left out because they were not complete.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Export {
    pub reviews: Vec<ProcessedReview>,
    pub skipped: usize,
}

impl Export {
    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        crate::llm::write_processed(&mut buf, &self.reviews).expect("writing to a Vec cannot fail");
        buf
    }
}

struct Inner {
    state: State,
    journal: Option<(PathBuf, File)>,
}

pub struct AnnotationStore {
    inner: Mutex<Inner>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl AnnotationStore {
    /// A store without persistence.
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(Inner {
                state: State::default(),
                journal: None,
            }),
        }
    }

    /// Opens or creates the journal at `path` and replays it. A torn final
    /// line from an interrupted write is dropped; any other bad line is an
    /// error.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, AnnotationError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| AnnotationError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        let mut state = State::default();
        let mut good_len = 0u64;
        let mut reader = BufReader::new(&file);
        let mut line_no = 0;
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(io_err)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            let complete = line.ends_with('\n');
            if line.trim().is_empty() {
                good_len += n as u64;
                continue;
            }
            let bad = |message: String| AnnotationError::Journal {
                path: path.display().to_string(),
                line: line_no,
                message,
            };
            match serde_json::from_str::<Event>(line.trim_end()) {
                Ok(event) => {
                    state.check(&event).map_err(|e| bad(e.to_string()))?;
                    state.apply(event);
                    good_len += n as u64;
                }
                Err(_) if !complete => {
                    log::warn!("dropping torn final line {line_no} of {}", path.display());
                    break;
                }
                Err(e) => return Err(bad(e.to_string())),
            }
        }
        drop(reader);
        if file.metadata().map_err(io_err)?.len() != good_len {
            file.set_len(good_len).map_err(io_err)?;
            file.seek(SeekFrom::End(0)).map_err(io_err)?;
        }
        Ok(Self {
            inner: Mutex::new(Inner {
                state,
                journal: Some((path, file)),
            }),
        })
    }

    fn commit(&self, event: Event) -> Result<(), AnnotationError> {
        self.commit_with(|_| event)
    }

    /// Builds, validates, persists and applies an event under one lock.
    fn commit_with(&self, build: impl FnOnce(&State) -> Event) -> Result<(), AnnotationError> {
        let mut inner = self.inner.lock().expect("annotation store poisoned");
        let event = build(&inner.state);
        inner.state.check(&event)?;
        if let Some((path, file)) = inner.journal.as_mut() {
            let mut line = serde_json::to_vec(&event).expect("event serializes");
            line.push(b'\n');
            file.write_all(&line)
                .and_then(|_| file.sync_data())
                .map_err(|source| AnnotationError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
        }
        inner.state.apply(event);
        Ok(())
    }

    /// Queues one pending task per review, in the given order, all assigned
    /// to `annotator_id`. Returns the session id.
    pub fn create_session(&self, reviews: &[Review], annotator_id: &str) -> Result<String, AnnotationError> {
        let mut session_id = String::new();
        self.commit_with(|state| {
            session_id = format!("s{}", state.sessions.len() + 1);
            Event::SessionCreated {
                session_id: session_id.clone(),
                annotator_id: annotator_id.to_string(),
                reviews: reviews.to_vec(),
                at_ms: now_ms(),
            }
        })?;
        Ok(session_id)
    }

    /// First unfinished task assigned to `annotator_id`, in queue order.
    pub fn next_task(&self, annotator_id: &str) -> Option<AnnotationTask> {
        let inner = self.inner.lock().expect("annotation store poisoned");
        inner
            .state
            .tasks
            .iter()
            .find(|t| t.state != TaskState::Complete && t.assigned_annotator.as_deref() == Some(annotator_id))
            .cloned()
    }

    pub fn task(&self, task_id: &str) -> Result<AnnotationTask, AnnotationError> {
        let inner = self.inner.lock().expect("annotation store poisoned");
        inner.state.task(task_id).cloned()
    }

    pub fn tasks(&self) -> Vec<AnnotationTask> {
        self.inner
            .lock()
            .expect("annotation store poisoned")
            .state
            .tasks
            .clone()
    }

    pub fn submit_stage1(&self, task_id: &str, spans: Vec<String>) -> Result<AnnotationTask, AnnotationError> {
        let spans = spans
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        self.commit(Event::Stage1 {
            task_id: task_id.to_string(),
            spans,
            at_ms: now_ms(),
        })?;
        self.task(task_id)
    }

    pub fn submit_stage2(&self, task_id: &str, rewrite: &str) -> Result<AnnotationTask, AnnotationError> {
        self.commit(Event::Stage2 {
            task_id: task_id.to_string(),
            rewrite: rewrite.trim().to_string(),
            at_ms: now_ms(),
        })?;
        self.task(task_id)
    }

    /// Complete tasks as `human` processed reviews, in queue order.
    pub fn export_processed(&self) -> Export {
        let inner = self.inner.lock().expect("annotation store poisoned");
        let mut reviews = Vec::new();
        let mut skipped = 0;
        for task in &inner.state.tasks {
            match (&task.state, &task.record) {
                (TaskState::Complete, Some(record)) => reviews.push(ProcessedReview {
                    id: ProcessedReview::processed_id(HUMAN_SETTING, &task.review.id),
                    source_id: task.review.id.clone(),
                    setting_id: HUMAN_SETTING.to_string(),
                    text: record.rewrite.clone().unwrap_or_default(),
                    stage1_spans: Some(record.stage1_spans.clone()),
                    raw_responses: Vec::new(),
                }),
                _ => skipped += 1,
            }
        }
        Export { reviews, skipped }
    }
}
