use axum::body::Bytes;
use axum::extract::multipart::MultipartError;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use http_body_util::BodyExt;
use serde::Serialize;
use serde_json::json;

use super::{ArtifactKind, EditJob, JobRequest, JobState, Service};
use crate::adapter::{resolve_target_layers, LoraAdapter};
use crate::concept::{BenignProbeSet, ConceptSpec};
use crate::container::read_container;
use crate::error::{Error, ErrorClass};

/// JSON error body `{code, message, field?}` with its status.
#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_string(),
            message: message.into(),
            field: None,
        }
    }

    fn with_field(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", what)
    }

    /// A problem with the uploaded `part`: 400 unless it is an internal I/O failure.
    fn upload(part: &str, e: Error) -> Self {
        let mut err = Self::from(e);
        if err.status == StatusCode::INTERNAL_SERVER_ERROR && err.code != "Io" {
            err.status = StatusCode::BAD_REQUEST;
        }
        if err.field.is_none() {
            err.field = Some(part.to_string());
        }
        err
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e.class() {
            ErrorClass::Validation => StatusCode::BAD_REQUEST,
            ErrorClass::Numerical | ErrorClass::Io => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let field = match &e {
            Error::InvalidConfig { field, .. } => Some(field.clone()),
            _ => None,
        };
        Self {
            status,
            code: e.kind().to_string(),
            message: e.to_string(),
            field,
        }
    }
}

impl From<MultipartError> for ApiError {
    fn from(e: MultipartError) -> Self {
        let status = e.status();
        if status == StatusCode::PAYLOAD_TOO_LARGE {
            Self::new(status, "PayloadTooLarge", e.body_text())
        } else {
            Self::new(StatusCode::BAD_REQUEST, "BadRequest", e.body_text())
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(service: Service) -> Router {
    let limit = service.config().max_upload_bytes;
    Router::new()
        .route("/v1/edits", post(submit))
        .route("/v1/edits/{id}", get(get_job))
        .route("/v1/edits/{id}/artifacts/{kind}", get(download))
        .route("/v1/bases", get(bases))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(limit))
        .layer(middleware::from_fn_with_state(limit, refuse_oversized))
        .with_state(service)
}

/// Bodies past this are not drained; the client may see a reset instead of 413.
const DRAIN_LIMIT: usize = 64 << 20;

/// Answers 413 for a declared length over `limit`, reading the body first so
/// closing the connection does not discard the response.
async fn refuse_oversized(State(limit): State<usize>, request: Request, next: Next) -> Response {
    let declared = request
        .headers()
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok());
    let Some(declared) = declared.filter(|&n| n > limit) else {
        return next.run(request).await;
    };
    let mut body = request.into_body();
    let mut drained = 0;
    while drained < DRAIN_LIMIT {
        match body.frame().await {
            Some(Ok(frame)) => drained += frame.data_ref().map_or(0, |d| d.len()),
            _ => break,
        }
    }
    ApiError::new(
        StatusCode::PAYLOAD_TOO_LARGE,
        "PayloadTooLarge",
        format!("upload of {declared} bytes exceeds the {limit}-byte limit"),
    )
    .into_response()
}

#[derive(Default)]
struct Upload {
    adapter: Option<Bytes>,
    concept: Option<Bytes>,
    probes: Option<Bytes>,
    config: Option<Bytes>,
}

async fn read_upload(mut multipart: Multipart) -> ApiResult<Upload> {
    let mut upload = Upload::default();
    while let Some(field) = multipart.next_field().await? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await?;
        let slot = match name.as_str() {
            "adapter" => &mut upload.adapter,
            "concept" => &mut upload.concept,
            "probes" => &mut upload.probes,
            "config" => &mut upload.config,
            other => {
                return Err(ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", format!("unexpected part `{other}`"))
                    .with_field(other))
            }
        };
        if slot.replace(bytes).is_some() {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", format!("part `{name}` given twice"))
                .with_field(name));
        }
    }
    Ok(upload)
}

fn required(part: Option<Bytes>, name: &str) -> ApiResult<Bytes> {
    part.ok_or_else(|| {
        ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", format!("missing multipart part `{name}`")).with_field(name)
    })
}

async fn submit(State(service): State<Service>, multipart: Multipart) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let upload = read_upload(multipart).await?;
    let config = required(upload.config, "config")?;
    let request = JobRequest::from_json(&config).map_err(ApiError::from)?;
    let Some(base) = service.inner.bases.get(&request.base) else {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "UnknownBase",
            format!("no registered base model named `{}`", request.base),
        )
        .with_field("base"));
    };

    let adapter_bytes = required(upload.adapter, "adapter")?;
    let concept_bytes = required(upload.concept, "concept")?;
    let adapter = read_container(&adapter_bytes)
        .and_then(|m| LoraAdapter::from_tensor_map(&m))
        .map_err(|e| ApiError::upload("adapter", e))?;
    let spec = read_container(&concept_bytes)
        .and_then(|m| ConceptSpec::from_tensor_map(&m))
        .map_err(|e| ApiError::upload("concept", e))?;
    if let Some(p) = &upload.probes {
        read_container(p)
            .and_then(|m| BenignProbeSet::from_tensor_map(&m))
            .and_then(|probes| probes.check_against(&spec))
            .map_err(|e| ApiError::upload("probes", e))?;
    }
    let targets = resolve_target_layers(&adapter, &request.patterns).map_err(|e| ApiError::upload("patterns", e))?;
    for name in &targets {
        let layer = &adapter.layers[name];
        match base.get(name) {
            None => return Err(ApiError::upload("adapter", Error::MissingBaseWeight(name.clone()))),
            Some(w) if w.shape() != (layer.in_features(), layer.out_features()) => {
                return Err(ApiError::upload(
                    "adapter",
                    Error::ShapeMismatch(format!("layer `{name}` does not fit base `{}`", request.base)),
                ))
            }
            Some(_) => {}
        }
        if spec.embedding_shape().1 != layer.in_features() {
            return Err(ApiError::upload(
                "concept",
                Error::ShapeMismatch(format!(
                    "embeddings have width {} but layer `{name}` takes {}",
                    spec.embedding_shape().1,
                    layer.in_features()
                )),
            ));
        }
    }

    let permit = service.inner.queue.try_reserve().map_err(|_| {
        ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "QueueFull", "the edit queue is full; retry later")
    })?;
    let job_id = uuid::Uuid::new_v4().to_string();
    let job = EditJob {
        job_id: job_id.clone(),
        state: JobState::Queued,
        submitted_at: Utc::now(),
        started_at: None,
        completed_at: None,
        base: request.base,
        patterns: request.patterns,
        config: request.config,
        failure: None,
        artifacts: None,
    };
    let persisted = service
        .spool()
        .write_inputs(&job_id, &adapter_bytes, &concept_bytes, upload.probes.as_deref())
        .and_then(|()| service.publish(job));
    if let Err(e) = persisted {
        let _ = service.spool().remove(&job_id);
        return Err(e.into());
    }
    permit.send(job_id.clone());
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({
            "job_id": job_id,
            "state": JobState::Queued,
            "url": format!("/v1/edits/{job_id}"),
        })),
    ))
}

async fn get_job(State(service): State<Service>, Path(id): Path<String>) -> ApiResult<Json<EditJob>> {
    service
        .job(&id)
        .map(|job| Json((*job).clone()))
        .ok_or_else(|| ApiError::not_found(format!("no job `{id}`")))
}

async fn download(
    State(service): State<Service>,
    Path((id, kind)): Path<(String, String)>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let kind = ArtifactKind::parse(&kind).ok_or_else(|| ApiError::not_found(format!("no artifact kind `{kind}`")))?;
    let job = service.job(&id).ok_or_else(|| ApiError::not_found(format!("no job `{id}`")))?;
    let artifact = match (&job.state, &job.artifacts) {
        (JobState::Succeeded, Some(a)) => a.get(kind.as_str()).cloned(),
        _ => None,
    };
    let Some(artifact) = artifact else {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "NotReady",
            format!("job `{id}` is {:?}; artifacts exist only for succeeded jobs", job.state),
        ));
    };
    let etag = format!("\"{}\"", artifact.sha256);
    if headers
        .get(header::IF_NONE_MATCH)
        .is_some_and(|v| v.as_bytes() == etag.as_bytes())
    {
        return Ok((StatusCode::NOT_MODIFIED, [(header::ETAG, etag)]).into_response());
    }
    let bytes = tokio::fs::read(service.spool().artifact_path(&id, kind))
        .await
        .map_err(|e| ApiError::from(Error::Io(e)))?;
    let mut response = bytes.into_response();
    let h = response.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static(kind.content_type()));
    h.insert(header::ETAG, HeaderValue::from_str(&etag).expect("hex etag"));
    Ok(response)
}

async fn bases(State(service): State<Service>) -> Json<serde_json::Value> {
    Json(json!({ "bases": service.base_names() }))
}

async fn healthz(State(service): State<Service>) -> Json<serde_json::Value> {
    let jobs = service.jobs();
    let count = |s: JobState| jobs.iter().filter(|j| j.state == s).count();
    Json(json!({
        "status": "ok",
        "queued": count(JobState::Queued),
        "running": count(JobState::Running),
    }))
}
