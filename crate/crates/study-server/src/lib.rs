//! HTTP JSON API over a [`StudyStore`].
//!
//! | method | path | body / query |
//! |--------|------|--------------|
//! | POST | `/studies` | [`CreateStudy`] |
//! | GET | `/studies` | |
//! | POST | `/annotators` | `{"annotator_id"}` |
//! | GET | `/studies/{id}/tasks/next` | `?annotator=` |
//! | POST | `/studies/{id}/votes` | `{"sample_id", "annotator_id", "label"}` |
//! | GET | `/studies/{id}/report` | |
//! | GET | `/media/{sample_id}/{original,overlay}` | optional `?study=` |
//!
//! Errors are `{"error": <kind>, "message": <text>}` with a matching status.

use std::future::Future;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use eventxai_core::study::{CreateStudy, Progress, StudyError, StudyStore, StudyTask, TaskStatus};
use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Characters escaped in media URLs; `/` is kept so sample ids stay readable.
const PATH_SEGMENT: &AsciiSet = &NON_ALPHANUMERIC.remove(b'/').remove(b'-').remove(b'_').remove(b'.').remove(b'~');

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

#[derive(Serialize, Deserialize, Debug, PartialEq, Eq)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self { status, kind, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }
}

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> Self {
        let (status, kind) = match &e {
            StudyError::UnknownStudy(_) => (StatusCode::NOT_FOUND, "UnknownStudy"),
            StudyError::UnknownAnnotator(_) => (StatusCode::NOT_FOUND, "UnknownAnnotator"),
            StudyError::UnknownTask(_) => (StatusCode::NOT_FOUND, "UnknownTask"),
            StudyError::InvalidAnnotator => (StatusCode::UNPROCESSABLE_ENTITY, "InvalidAnnotator"),
            StudyError::DuplicateVote { .. } => (StatusCode::CONFLICT, "DuplicateVote"),
            StudyError::ResolvedTask(_) => (StatusCode::CONFLICT, "ResolvedTask"),
            StudyError::InvalidLabel(_) => (StatusCode::UNPROCESSABLE_ENTITY, "InvalidLabel"),
            StudyError::MissingOverlay(_) => (StatusCode::UNPROCESSABLE_ENTITY, "MissingOverlay"),
            StudyError::EmptyStudy => (StatusCode::UNPROCESSABLE_ENTITY, "EmptyStudy"),
            StudyError::InvalidQuorum(_) => (StatusCode::UNPROCESSABLE_ENTITY, "InvalidQuorum"),
            StudyError::NoResolvedTasks => (StatusCode::CONFLICT, "NoResolvedTasks"),
            StudyError::Io(_) | StudyError::Format(_) => (StatusCode::INTERNAL_SERVER_ERROR, "Internal"),
        };
        Self::new(status, kind, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.kind.to_string(), message: self.message };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

/// Runs a store call off the async workers; votes fsync the log.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, StudyError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
        .map_err(ApiError::from)
}

/// A task as shown to an annotator; media come from the media endpoints.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
pub struct TaskView {
    pub study_id: String,
    pub sample_id: String,
    pub class_id: usize,
    pub class_name: String,
    pub votes_needed: usize,
    pub votes_received: usize,
    pub image_url: String,
    pub overlay_url: String,
}

impl TaskView {
    fn new(study_id: &str, status: TaskStatus) -> Self {
        let TaskStatus { task, votes_received } = status;
        let media = |kind: &str| {
            format!(
                "/media/{}/{kind}?study={}",
                utf8_percent_encode(&task.sample_id, PATH_SEGMENT),
                utf8_percent_encode(study_id, NON_ALPHANUMERIC)
            )
        };
        Self {
            study_id: study_id.to_string(),
            image_url: media("original"),
            overlay_url: media("overlay"),
            sample_id: task.sample_id,
            class_id: task.class_id,
            class_name: task.class_name,
            votes_needed: task.votes_needed,
            votes_received,
        }
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
pub struct NextTask {
    /// `None` once no eligible task remains for this annotator.
    pub task: Option<TaskView>,
    pub progress: Progress,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
pub struct CreatedStudy {
    pub study_id: String,
    pub tasks: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
pub struct AnnotatorBody {
    pub annotator_id: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
pub struct VoteBody {
    pub sample_id: String,
    pub annotator_id: String,
    /// Kept wide so that out-of-range labels report `InvalidLabel`.
    pub label: i64,
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

#[derive(Deserialize)]
struct MediaQuery {
    study: Option<String>,
}

type Store = Arc<StudyStore>;

async fn create_study(State(store): State<Store>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let request: CreateStudy = parse(&body)?;
    let created = blocking(move || {
        let id = store.create_study(&request)?;
        let tasks = store.state(&id)?.definition.tasks.len();
        Ok(CreatedStudy { study_id: id, tasks })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn list_studies(State(store): State<Store>) -> Json<Vec<String>> {
    Json(store.study_ids())
}

async fn register_annotator(State(store): State<Store>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let AnnotatorBody { annotator_id } = parse(&body)?;
    let id = annotator_id.clone();
    blocking(move || store.register_annotator(&id)).await?;
    Ok((StatusCode::CREATED, Json(AnnotatorBody { annotator_id })))
}

async fn next_task(
    State(store): State<Store>,
    UrlPath(study_id): UrlPath<String>,
    Query(query): Query<NextQuery>,
) -> ApiResult<Json<NextTask>> {
    let annotator = query.annotator.ok_or_else(|| ApiError::bad_request("missing ?annotator="))?;
    let id = study_id.clone();
    let (task, progress) = blocking(move || store.next_task_with_progress(&id, &annotator)).await?;
    Ok(Json(NextTask { task: task.map(|t| TaskView::new(&study_id, t)), progress }))
}

async fn submit_vote(
    State(store): State<Store>,
    UrlPath(study_id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let vote: VoteBody = parse(&body)?;
    let ack = blocking(move || store.submit_vote(&study_id, &vote.annotator_id, &vote.sample_id, vote.label)).await?;
    Ok((StatusCode::CREATED, Json(ack)))
}

async fn report(State(store): State<Store>, UrlPath(study_id): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    let report = blocking(move || store.report(&study_id)).await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], report.to_json()))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    }
}

/// Serves only files referenced by a study task, never arbitrary paths.
async fn media(
    State(store): State<Store>,
    UrlPath(path): UrlPath<String>,
    Query(query): Query<MediaQuery>,
) -> ApiResult<Response> {
    let (sample_id, kind) = path
        .rsplit_once('/')
        .ok_or_else(|| ApiError::bad_request("expected /media/{sample_id}/{original|overlay}"))?;
    if kind != "original" && kind != "overlay" {
        return Err(ApiError::bad_request(format!("unknown media kind {kind:?}")));
    }
    let (sample_id, kind) = (sample_id.to_string(), kind.to_string());
    let bytes = blocking(move || {
        let task: StudyTask = match query.study {
            Some(study) => store.task(&study, &sample_id)?,
            None => store.find_task(&sample_id).ok_or_else(|| StudyError::UnknownTask(sample_id.clone()))?,
        };
        let file = if kind == "original" { task.image } else { task.overlay };
        let data = std::fs::read(&file)?;
        Ok((content_type(&file), data))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, bytes.0)], bytes.1).into_response())
}

pub fn router(store: Arc<StudyStore>) -> Router {
    Router::new()
        .route("/studies", post(create_study).get(list_studies))
        .route("/annotators", post(register_annotator))
        .route("/studies/{id}/tasks/next", get(next_task))
        .route("/studies/{id}/votes", post(submit_vote))
        .route("/studies/{id}/report", get(report))
        .route("/media/{*path}", get(media))
        .with_state(store)
}

/// Serves the API on `addr` until `shutdown` resolves.
pub async fn serve(
    store: Arc<StudyStore>,
    addr: SocketAddr,
    shutdown: impl Future<Output = ()> + Send + 'static,
    on_bound: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(store)).with_graceful_shutdown(shutdown).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn media_urls_escape_sample_ids() {
        let task = StudyTask {
            sample_id: "thunder storm/a#1.jpg".into(),
            class_id: 2,
            class_name: "thunder storm".into(),
            image: "/data/thunder storm/a#1.jpg".into(),
            overlay: "/out/thunder storm/a#1.png".into(),
            votes_needed: 3,
        };
        let view = TaskView::new("abc", TaskStatus { task, votes_received: 1 });
        assert_eq!(view.image_url, "/media/thunder%20storm/a%231.jpg/original?study=abc");
        assert_eq!(view.overlay_url, "/media/thunder%20storm/a%231.jpg/overlay?study=abc");
    }

    #[test]
    fn content_types_follow_extensions() {
        assert_eq!(content_type(Path::new("a/b.PNG")), "image/png");
        assert_eq!(content_type(Path::new("a/b.jpeg")), "image/jpeg");
        assert_eq!(content_type(Path::new("a/b")), "application/octet-stream");
    }

    #[test]
    fn study_errors_map_to_statuses() {
        let status = |e| ApiError::from(e).status;
        assert_eq!(status(StudyError::UnknownStudy("x".into())), StatusCode::NOT_FOUND);
        assert_eq!(
            status(StudyError::DuplicateVote { sample_id: "s".into(), annotator_id: "a".into() }),
            StatusCode::CONFLICT
        );
        assert_eq!(status(StudyError::InvalidLabel(7)), StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(status(StudyError::NoResolvedTasks), StatusCode::CONFLICT);
    }
}
