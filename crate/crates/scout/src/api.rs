//! HTTP routes, request bodies and error mapping.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use schemars::JsonSchema;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use scout_core::analysis::{CategoryDistribution, GroupKey, ReviewVerdict, Scaling};
use scout_core::digest::{digest_json, is_digest};
use scout_core::domain::{sniff_media_type, EnvironmentInput, Feedback};
use scout_core::elicitation::Annotation;
use scout_core::providers::ImageAttachment;

use crate::batch::BatchManifest;
use crate::engine::{EngineError, ModelSource, GENERIC_MODEL_ID};
use crate::jobs::{JobInput, JobRegistry};

/// Largest accepted request body.
pub const BODY_LIMIT: usize = 32 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    pub jobs: Arc<JobRegistry>,
    /// Bearer token every request must carry, when set.
    pub token: Option<Arc<str>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    /// JSON path of the offending field, for invalid bodies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug)]
pub enum ApiError {
    Engine(EngineError),
    Unauthorized,
    UnsupportedMedia(String),
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        ApiError::Engine(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code, message, path, retry) = match self {
            ApiError::Unauthorized => (
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or invalid bearer token".to_string(),
                None,
                None,
            ),
            ApiError::UnsupportedMedia(m) => (StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported_media_type", m, None, None),
            ApiError::Engine(e) => {
                let status = match &e {
                    EngineError::NotFound(_) => StatusCode::NOT_FOUND,
                    EngineError::Invalid { .. } => StatusCode::UNPROCESSABLE_ENTITY,
                    EngineError::Conflict(_) => StatusCode::CONFLICT,
                    EngineError::Provider(_) => StatusCode::BAD_GATEWAY,
                    EngineError::Budget { .. } => StatusCode::SERVICE_UNAVAILABLE,
                    EngineError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
                };
                let retry = match &e {
                    EngineError::Budget { retry_after } => Some(*retry_after),
                    _ => None,
                };
                let (message, path) = match &e {
                    EngineError::Invalid { path, message } => (message.clone(), Some(path.clone())),
                    other => (other.to_string(), None),
                };
                (status, e.code(), message, path, retry)
            }
        };
        let body = ErrorBody {
            code: code.into(),
            message,
            path,
        };
        let mut resp = (status, Json(body)).into_response();
        if let Some(s) = retry {
            resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(s));
        }
        if status == StatusCode::UNAUTHORIZED {
            resp.headers_mut()
                .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
        }
        resp
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// JSON body whose decoding errors become 422 with the failing field path.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let bytes = Bytes::from_request(req, state)
            .await
            .map_err(|e| EngineError::invalid("", e.body_text()))?;
        parse_json(&bytes).map(Body).map_err(ApiError::from)
    }
}

pub fn parse_json<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, EngineError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        EngineError::invalid(if path == "." { String::new() } else { path }, e.inner().to_string())
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ScanRequest {
    /// Digest of an image uploaded to `/v1/blobs`.
    pub image_digest: String,
    pub env_description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct JobAccepted {
    pub job_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct BatchAccepted {
    pub batch_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct BlobRef {
    pub digest: String,
    pub media_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct NewConcernRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ApplyFeedbackRequest {
    pub scan_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AnnotationsInput {
    pub image_digest: String,
    pub annotations: Vec<Annotation>,
}

/// Exactly one of `self_description` and `annotations`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CreateModelRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<AnnotationsInput>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct ModelVersions {
    pub id: String,
    pub versions: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DiffRequest {
    pub scan_a: String,
    pub scan_b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct GroupDistribution {
    pub group: String,
    pub scaling: Scaling,
    pub distribution: CategoryDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct WassersteinResult {
    pub a: String,
    pub b: String,
    pub distance: f64,
}

#[derive(Debug, Deserialize)]
struct VersionQuery {
    version: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct DistributionQuery {
    group: Option<String>,
    scaling: Option<Scaling>,
}

#[derive(Debug, Deserialize)]
struct WassersteinQuery {
    a: String,
    b: String,
    scaling: Option<Scaling>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/blobs", post(put_blob))
        .route("/v1/blobs/{digest}", get(get_blob))
        .route("/v1/scans", post(post_scan))
        .route("/v1/scans/jobs/{job_id}", get(get_job))
        .route("/v1/scans/{scan_id}", get(get_scan))
        .route("/v1/scans/{scan_id}/feedback", post(post_feedback).get(get_feedback))
        .route("/v1/scans/{scan_id}/concerns", post(post_concern))
        .route("/v1/scans/{scan_id}/verdicts", post(post_verdicts).get(get_verdicts))
        .route("/v1/models", post(post_model))
        .route("/v1/models/{id}", get(get_model))
        .route("/v1/models/{id}/versions", get(get_versions))
        .route("/v1/models/{id}/apply-feedback", post(apply_feedback))
        .route("/v1/batch", post(post_batch))
        .route("/v1/batch/{id}", get(get_batch))
        .route("/v1/analysis/distribution", get(get_distribution))
        .route("/v1/analysis/wasserstein", get(get_wasserstein))
        .route("/v1/analysis/diff", post(post_diff))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token.as_ref());
        if !ok {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

fn media_type_of(bytes: &[u8]) -> Result<&'static str, EngineError> {
    sniff_media_type(bytes).ok_or_else(|| EngineError::invalid("image", "not a PNG or JPEG image"))
}

async fn put_blob(State(s): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<BlobRef>)> {
    let media = media_type_of(&body)?;
    let digest = s.jobs.engine().store.put_blob(&body).map_err(EngineError::from)?;
    Ok((
        StatusCode::CREATED,
        Json(BlobRef {
            digest,
            media_type: media.into(),
        }),
    ))
}

async fn get_blob(State(s): State<AppState>, Path(digest): Path<String>) -> ApiResult<Response> {
    if !is_digest(&digest) {
        return Err(EngineError::NotFound(format!("blob {digest}")).into());
    }
    let bytes = s.jobs.engine().store.get_blob(&digest).map_err(EngineError::from)?;
    let media = sniff_media_type(&bytes).unwrap_or("application/octet-stream");
    Ok(([(header::CONTENT_TYPE, media)], bytes).into_response())
}

struct ParsedScan {
    env: EnvironmentInput,
    model_id: String,
}

async fn parse_multipart(mut form: Multipart) -> Result<ParsedScan, EngineError> {
    let mut image = None;
    let (mut desc, mut intent, mut model_id) = (None, None, None);
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| EngineError::invalid("", e.body_text()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "image" => {
                let bytes = field.bytes().await.map_err(|e| EngineError::invalid("image", e.body_text()))?;
                image = Some(bytes.to_vec());
            }
            "env_description" | "intent" | "model_id" => {
                let text = field.text().await.map_err(|e| EngineError::invalid(&name, e.body_text()))?;
                match name.as_str() {
                    "env_description" => desc = Some(text),
                    "intent" => intent = Some(text),
                    _ => model_id = Some(text),
                }
            }
            other => return Err(EngineError::invalid(other, "unknown field")),
        }
    }
    let image = image.ok_or_else(|| EngineError::invalid("image", "missing field"))?;
    let desc = desc.ok_or_else(|| EngineError::invalid("env_description", "missing field"))?;
    let media = media_type_of(&image)?;
    let mut env = EnvironmentInput::new(image, media, desc);
    if let Some(i) = intent.filter(|i| !i.trim().is_empty()) {
        env = env.with_intent(i);
    }
    Ok(ParsedScan {
        env,
        model_id: model_id.filter(|m| !m.is_empty()).unwrap_or_else(|| GENERIC_MODEL_ID.into()),
    })
}

fn parse_scan_json(s: &AppState, bytes: &[u8]) -> Result<ParsedScan, EngineError> {
    let req: ScanRequest = parse_json(bytes)?;
    if !is_digest(&req.image_digest) {
        return Err(EngineError::invalid("image_digest", "expected a sha-256 hex digest"));
    }
    let image = s.jobs.engine().store.get_blob(&req.image_digest).map_err(|e| match e {
        scout_core::store::StoreError::NotFound(_) => EngineError::invalid("image_digest", "no such blob"),
        other => other.into(),
    })?;
    let media = media_type_of(&image)?;
    let mut env = EnvironmentInput::new(image, media, req.env_description);
    if let Some(i) = req.intent.filter(|i| !i.trim().is_empty()) {
        env = env.with_intent(i);
    }
    Ok(ParsedScan {
        env,
        model_id: req.model_id.unwrap_or_else(|| GENERIC_MODEL_ID.into()),
    })
}

async fn post_scan(State(s): State<AppState>, req: Request) -> ApiResult<(StatusCode, Json<JobAccepted>)> {
    let key = req
        .headers()
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let is_form = content_type(req.headers()).starts_with("multipart/form-data");
    let is_json = content_type(req.headers()).starts_with("application/json");
    let parsed = if is_form {
        let form = Multipart::from_request(req, &s)
            .await
            .map_err(|e| EngineError::invalid("", e.body_text()))?;
        parse_multipart(form).await?
    } else if is_json {
        let bytes = Bytes::from_request(req, &s)
            .await
            .map_err(|e| EngineError::invalid("", e.body_text()))?;
        parse_scan_json(&s, &bytes)?
    } else {
        return Err(ApiError::UnsupportedMedia(
            "expected multipart/form-data or application/json".into(),
        ));
    };
    parsed
        .env
        .validate()
        .map_err(|e| EngineError::invalid("env_description", e.to_string()))?;
    s.jobs.engine().model(&parsed.model_id, None)?;
    s.jobs.engine().admit()?;
    let body_digest = digest_json(&json!({
        "image": parsed.env.digest(),
        "description": parsed.env.env_description,
        "intent": parsed.env.intent,
        "model": parsed.model_id,
    }));
    let input = JobInput::Ready {
        env: parsed.env,
        model_id: parsed.model_id,
    };
    let job_id = s
        .jobs
        .submit(input, key.map(|k| (k, body_digest)))
        .map_err(|e| EngineError::Conflict(e.to_string()))?;
    Ok((StatusCode::ACCEPTED, Json(JobAccepted { job_id })))
}

fn content_type(h: &HeaderMap) -> String {
    h.get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_ascii_lowercase()
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = s.jobs.job(&id).ok_or_else(|| EngineError::NotFound(format!("job {id}")))?;
    Ok(Json(job).into_response())
}

async fn get_scan(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(s.jobs.engine().store.get_scan(&id).map_err(EngineError::from)?).into_response())
}

async fn post_feedback(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(feedback): Body<Vec<Feedback>>,
) -> ApiResult<StatusCode> {
    s.jobs.engine().add_feedback(&id, &feedback)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn get_feedback(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(s.jobs.engine().store.feedback(&id).map_err(EngineError::from)?).into_response())
}

async fn post_concern(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<NewConcernRequest>,
) -> ApiResult<Response> {
    let c = s.jobs.engine().add_concern(&id, req.name.as_deref(), &req.text).await?;
    Ok((StatusCode::CREATED, Json(c)).into_response())
}

async fn post_verdicts(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(verdicts): Body<Vec<ReviewVerdict>>,
) -> ApiResult<StatusCode> {
    s.jobs.engine().add_verdicts(&id, &verdicts)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn get_verdicts(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    s.jobs.engine().store.get_scan(&id).map_err(EngineError::from)?;
    Ok(Json(s.jobs.engine().store.verdicts(&id).map_err(EngineError::from)?).into_response())
}

async fn post_model(State(s): State<AppState>, Body(req): Body<CreateModelRequest>) -> ApiResult<Response> {
    let engine = s.jobs.engine();
    let source = match (req.self_description, req.annotations) {
        (Some(text), None) => ModelSource::SelfDescription(text),
        (None, Some(a)) => {
            if !is_digest(&a.image_digest) {
                return Err(EngineError::invalid("annotations.image_digest", "expected a sha-256 hex digest").into());
            }
            let bytes = engine.store.get_blob(&a.image_digest).map_err(|e| match e {
                scout_core::store::StoreError::NotFound(_) => {
                    EngineError::invalid("annotations.image_digest", "no such blob")
                }
                other => other.into(),
            })?;
            let media = media_type_of(&bytes)?;
            ModelSource::Annotations {
                image: ImageAttachment::new(media, bytes),
                annotations: a.annotations,
            }
        }
        _ => {
            return Err(EngineError::invalid("", "give exactly one of self_description and annotations").into());
        }
    };
    let model = engine.create_model(req.id, source).await?;
    Ok((StatusCode::CREATED, Json(model)).into_response())
}

async fn get_model(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<VersionQuery>,
) -> ApiResult<Response> {
    Ok(Json(s.jobs.engine().model(&id, q.version)?).into_response())
}

async fn get_versions(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let versions = s.jobs.engine().store.model_versions(&id).map_err(EngineError::from)?;
    if versions.is_empty() {
        return Err(EngineError::NotFound(format!("model {id}")).into());
    }
    Ok(Json(ModelVersions { id, versions }).into_response())
}

async fn apply_feedback(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<ApplyFeedbackRequest>,
) -> ApiResult<Response> {
    Ok(Json(s.jobs.engine().apply_feedback(&id, &req.scan_id).await?).into_response())
}

async fn post_batch(State(s): State<AppState>, Body(manifest): Body<BatchManifest>) -> ApiResult<Response> {
    manifest.validate()?;
    for (i, r) in manifest.rows.iter().enumerate() {
        let remote = r.image.starts_with("http://") || r.image.starts_with("https://");
        if !is_digest(&r.image) && !remote {
            return Err(EngineError::invalid(format!("rows[{i}].image"), "expected a blob digest or an http(s) URL").into());
        }
        s.jobs.engine().model(&r.model_id, None)?;
    }
    s.jobs.engine().admit()?;
    let batch_id = s.jobs.submit_batch(manifest);
    Ok((StatusCode::ACCEPTED, Json(BatchAccepted { batch_id })).into_response())
}

async fn get_batch(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let b = s.jobs.batch(&id).ok_or_else(|| EngineError::NotFound(format!("batch {id}")))?;
    Ok(Json(b).into_response())
}

fn group(raw: &str, field: &str) -> Result<GroupKey, EngineError> {
    raw.parse().map_err(|e: scout_core::analysis::AnalysisError| EngineError::invalid(field, e.to_string()))
}

async fn get_distribution(State(s): State<AppState>, Query(q): Query<DistributionQuery>) -> ApiResult<Response> {
    let raw = q.group.unwrap_or_else(|| "all".into());
    let g = group(&raw, "group")?;
    let scaling = q.scaling.unwrap_or_default();
    let distribution = s.jobs.engine().distribution(&g, scaling).await?;
    Ok(Json(GroupDistribution {
        group: raw,
        scaling,
        distribution,
    })
    .into_response())
}

async fn get_wasserstein(State(s): State<AppState>, Query(q): Query<WassersteinQuery>) -> ApiResult<Response> {
    let a = group(&q.a, "a")?;
    let b = group(&q.b, "b")?;
    let distance = s.jobs.engine().wasserstein(&a, &b, q.scaling.unwrap_or_default()).await?;
    Ok(Json(WassersteinResult { a: q.a, b: q.b, distance }).into_response())
}

async fn post_diff(State(s): State<AppState>, Body(req): Body<DiffRequest>) -> ApiResult<Response> {
    Ok(Json(s.jobs.engine().diff(&req.scan_a, &req.scan_b).await?).into_response())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_errors_carry_field_paths() {
        let e = parse_json::<Vec<Feedback>>(br#"[{"concern_id":"t0c0","is_concern":"yes"}]"#).unwrap_err();
        match e {
            EngineError::Invalid { path, .. } => assert_eq!(path, "[0].is_concern"),
            other => panic!("{other:?}"),
        }
        let e = parse_json::<ApplyFeedbackRequest>(b"{}").unwrap_err();
        assert!(matches!(e, EngineError::Invalid { .. }));
    }
}
