//! HTTP routes. Handlers parse requests and run the blocking work in
//! [`AppState`](crate::state::AppState) on the blocking pool.

use axum::body::Bytes;
use axum::extract::multipart::Multipart;
use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{header, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use kalchas::LineBox;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};
use crate::jobs::{start_finetune, FinetuneRequest};
use crate::state::{ModelInfo, OcrResponse, SegmentRequest, SharedState};
use crate::store::{DocumentRecord, JobRecord, LineRecord, PageRecord};

pub fn router(state: SharedState) -> Router {
    let limit = state.config.upload_limit_bytes;
    Router::new()
        .route("/api/documents", post(upload).layer(DefaultBodyLimit::max(limit)))
        .route("/api/documents/{id}", get(get_document))
        .route("/api/pages/{id}", get(get_page))
        .route("/api/pages/{id}/image", get(get_page_image))
        .route("/api/pages/{id}/segment", post(segment))
        .route("/api/pages/{id}/lines", put(put_lines))
        .route("/api/lines/{id}", get(get_line))
        .route("/api/lines/{id}/ocr", post(ocr))
        .route("/api/lines/{id}/text", put(put_text))
        .route("/api/export", get(export))
        .route("/api/jobs/finetune", post(finetune))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/models", get(models))
        .fallback(not_found)
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Rejects mutating requests without the configured bearer token.
async fn require_token(State(state): State<SharedState>, req: Request, next: Next) -> Response {
    let Some(token) = state.config.token.as_deref() else {
        return next.run(req).await;
    };
    if matches!(*req.method(), Method::GET | Method::HEAD | Method::OPTIONS) {
        return next.run(req).await;
    }
    let presented = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    let ok = presented.is_some_and(|p| {
        p.len() == token.len() && p.bytes().zip(token.bytes()).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
    });
    if ok {
        next.run(req).await
    } else {
        let mut resp = ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
        resp.headers_mut()
            .insert(header::WWW_AUTHENTICATE, header::HeaderValue::from_static("Bearer"));
        resp
    }
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await?
}

/// Parses an optional JSON body; an empty body yields the default.
fn optional_json<T: DeserializeOwned + Default>(body: &[u8]) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    parse_json(body)
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

#[derive(Serialize)]
struct UploadResponse {
    document_id: String,
    n_pages: usize,
}

async fn upload(State(state): State<SharedState>, mut multipart: Multipart) -> ApiResult<impl IntoResponse> {
    let mut file = None;
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::new(e.status(), e.body_text()))?
    {
        if field.name() == Some("file") || (file.is_none() && field.file_name().is_some()) {
            let name = field.file_name().unwrap_or("upload").to_string();
            let data = field.bytes().await.map_err(|e| ApiError::new(e.status(), e.body_text()))?;
            file = Some((name, data));
        }
    }
    let (name, data) = file.ok_or_else(|| ApiError::bad_request("multipart body has no \"file\" field"))?;
    let doc = blocking(move || state.create_document(&name, &data)).await?;
    Ok((
        StatusCode::CREATED,
        Json(UploadResponse {
            n_pages: doc.page_ids.len(),
            document_id: doc.id,
        }),
    ))
}

async fn get_document(State(state): State<SharedState>, Path(id): Path<String>) -> ApiResult<Json<DocumentRecord>> {
    state.document(&id).map(Json)
}

#[derive(Serialize)]
struct PageView {
    #[serde(flatten)]
    page: PageRecord,
    lines: Vec<LineRecord>,
}

async fn get_page(State(state): State<SharedState>, Path(id): Path<String>) -> ApiResult<Json<PageView>> {
    let store = state.store();
    let page = store.page(&id).cloned().ok_or_else(|| ApiError::not_found("page", &id))?;
    let lines = store.page_lines(&page);
    Ok(Json(PageView { page, lines }))
}

async fn get_page_image(State(state): State<SharedState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let page = state.page(&id)?;
    let bytes = state.store().blob(&page.image)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes))
}

async fn segment(
    State(state): State<SharedState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Vec<LineRecord>>> {
    let req: SegmentRequest = optional_json(&body)?;
    blocking(move || state.segment_page(&id, &req)).await.map(Json)
}

async fn put_lines(
    State(state): State<SharedState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Vec<LineRecord>>> {
    let boxes: Vec<LineBox> = parse_json(&body)?;
    blocking(move || state.replace_lines(&id, &boxes)).await.map(Json)
}

async fn get_line(State(state): State<SharedState>, Path(id): Path<String>) -> ApiResult<Json<LineRecord>> {
    state.line(&id).map(Json)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OcrRequest {
    model: Option<String>,
}

async fn ocr(State(state): State<SharedState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<OcrResponse>> {
    let req: OcrRequest = optional_json(&body)?;
    blocking(move || state.ocr_line(&id, req.model.as_deref())).await.map(Json)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextRequest {
    text: String,
}

async fn put_text(State(state): State<SharedState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<LineRecord>> {
    let req: TextRequest = parse_json(&body)?;
    blocking(move || state.correct_line(&id, &req.text)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    document: String,
    status: Option<String>,
}

async fn export(State(state): State<SharedState>, Query(q): Query<ExportQuery>) -> ApiResult<impl IntoResponse> {
    if let Some(status) = q.status.as_deref().filter(|s| *s != "corrected") {
        return Err(ApiError::unprocessable(format!(
            "only corrected lines can be exported, not status {status:?}"
        )));
    }
    let doc = state.document(&q.document)?;
    let disposition = format!("attachment; filename=\"{}-export.tar\"", doc.id);
    let archive = blocking(move || state.export_archive(&doc.id)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/x-tar".to_string()),
            (header::CONTENT_DISPOSITION, disposition),
        ],
        archive,
    ))
}

#[derive(Serialize)]
struct JobCreated {
    job_id: String,
}

async fn finetune(State(state): State<SharedState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: FinetuneRequest = parse_json(&body)?;
    let job = start_finetune(state, req).await?;
    Ok((StatusCode::ACCEPTED, Json(JobCreated { job_id: job.id })))
}

async fn get_job(State(state): State<SharedState>, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    state
        .store()
        .job(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found("job", &id))
}

async fn models(State(state): State<SharedState>) -> ApiResult<Json<Vec<ModelInfo>>> {
    blocking(move || state.list_models()).await.map(Json)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such endpoint")
}
