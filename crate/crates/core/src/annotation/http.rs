use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use super::{AnnotationError, AnnotationStore, AnnotationTask, TaskState};

type Shared = Arc<AnnotationStore>;

/// What an annotator sees for the current task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub review_text: String,
    pub stage: u8,
    /// Stage-1 spans, present once stage 1 is submitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<String>>,
    pub state: TaskState,
}

impl From<AnnotationTask> for TaskView {
    fn from(t: AnnotationTask) -> Self {
        Self {
            task_id: t.task_id,
            review_text: t.review.text,
            stage: if t.state == TaskState::Pending { 1 } else { 2 },
            spans: t.record.map(|r| r.stage1_spans),
            state: t.state,
        }
    }
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

#[derive(Deserialize)]
struct Stage1Body {
    spans: Vec<String>,
}

#[derive(Deserialize)]
struct Stage2Body {
    rewrite: String,
}

struct ApiError(AnnotationError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            AnnotationError::UnknownTask(_) => StatusCode::NOT_FOUND,
            AnnotationError::OutOfOrder { .. } => StatusCode::CONFLICT,
            AnnotationError::EmptyRewrite
            | AnnotationError::EmptySubset
            | AnnotationError::DuplicateReview(_)
            | AnnotationError::AlreadyAssigned { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            AnnotationError::Journal { .. } | AnnotationError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

async fn next_task(State(store): State<Shared>, Query(q): Query<NextQuery>) -> Response {
    match store.next_task(&q.annotator) {
        Some(task) => Json(TaskView::from(task)).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn stage1(
    State(store): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<Stage1Body>,
) -> Result<Json<TaskView>, ApiError> {
    let task = tokio::task::block_in_place(|| store.submit_stage1(&id, body.spans)).map_err(ApiError)?;
    Ok(Json(task.into()))
}

async fn stage2(
    State(store): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<Stage2Body>,
) -> Result<Json<TaskView>, ApiError> {
    let task = tokio::task::block_in_place(|| store.submit_stage2(&id, &body.rewrite)).map_err(ApiError)?;
    Ok(Json(task.into()))
}

async fn export(State(store): State<Shared>) -> Response {
    let export = store.export_processed();
    (
        [
            (header::CONTENT_TYPE, "application/x-ndjson".to_string()),
            (
                header::HeaderName::from_static("x-skipped-count"),
                export.skipped.to_string(),
            ),
        ],
        export.to_jsonl(),
    )
        .into_response()
}

/// API routes, plus static files from `ui_dir` for every other path.
pub fn router(store: Arc<AnnotationStore>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}/stage1", post(stage1))
        .route("/api/tasks/{id}/stage2", post(stage2))
        .route("/api/export", get(export))
        .with_state(store);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(store: Arc<AnnotationStore>, addr: SocketAddr, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(store, ui_dir)).await
}
