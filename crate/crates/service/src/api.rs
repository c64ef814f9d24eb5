use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::header::{CONTENT_TYPE, ETAG, IF_MATCH, LOCATION};
use axum::http::{HeaderMap, HeaderValue, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use qualcode_core::adapter::AdapterHyperparams;
use qualcode_core::audit::{self, AuditSummary, CodeSource, Resolution};
use qualcode_core::classifier::{ClassifyMode, DEFAULT_TEMPERATURE};
use qualcode_core::corpus::{
    ClassificationRun, Codebook, EmbeddingBinding, ImportMapping, Project, SourceFormat,
};
use qualcode_core::embedder::{InstructionPreset, ProviderConfig};
use qualcode_core::engine::{self, render_json, EvaluateOptions, ResampleSpec};
use qualcode_core::projection::{ProjectionMethod, TsneParams};
use qualcode_core::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::jobs::{JobKind, JobState};
use crate::AppState;

type Shared = State<Arc<AppState>>;
type ApiResult = Result<Response, ApiError>;

pub fn routes(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/projects", get(list_projects).post(create_project))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/responses", get(get_responses).post(post_responses))
        .route("/projects/{id}/codebook", get(get_codebook).put(put_codebook))
        .route("/projects/{id}/embed", post(embed))
        .route("/projects/{id}/classify", post(classify))
        .route("/projects/{id}/assignments", get(get_assignments))
        .route("/projects/{id}/metrics", get(get_metrics))
        .route("/projects/{id}/audit", get(get_audit).post(post_audit))
        .route("/projects/{id}/audit/summary", get(get_audit_summary))
        .route("/projects/{id}/audit/resolutions", post(post_resolutions))
        .route("/projects/{id}/adapter", get(get_adapter))
        .route("/projects/{id}/adapter/train", post(train_adapter))
        .route("/projects/{id}/adapter/apply", post(apply_adapter))
        .route("/projects/{id}/projection", get(get_projection).post(post_projection))
        .route("/projects/{id}/export", get(export))
        .route("/jobs", get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .fallback(unknown_endpoint);
    Router::new()
        .route("/health", get(health))
        .nest("/api/v1", api)
        .with_state(state)
}

/// Fallback for `/` when no UI bundle is configured.
pub async fn root(uri: Uri) -> Response {
    if uri.path() == "/" {
        return text(StatusCode::OK, "application/json", render_json(&json!({"service": "qualcode", "api": "/api/v1"})), None);
    }
    unknown_endpoint(uri).await
}

async fn unknown_endpoint(uri: Uri) -> Response {
    ApiError::not_found(format!("no endpoint at {}", uri.path())).into_response()
}

async fn health() -> Response {
    text(StatusCode::OK, "application/json", render_json(&json!({"status": "ok"})), None)
}

fn text(status: StatusCode, content_type: &'static str, body: String, revision: Option<u64>) -> Response {
    let mut resp = (status, [(CONTENT_TYPE, content_type)], body).into_response();
    if let Some(rev) = revision {
        resp.headers_mut()
            .insert(ETAG, HeaderValue::from_str(&format!("\"{rev}\"")).expect("ascii etag"));
    }
    resp
}

fn json_ok<T: Serialize>(value: &T, revision: u64) -> Response {
    text(StatusCode::OK, "application/json", render_json(value), Some(revision))
}

/// A mutation outcome tagged with the revision it produced.
#[derive(Serialize)]
struct Revised<T> {
    revision: u64,
    #[serde(flatten)]
    inner: T,
}

fn revised<T: Serialize>(inner: T, revision: u64) -> Response {
    json_ok(&Revised { revision, inner }, revision)
}

fn if_match(headers: &HeaderMap) -> Result<Option<u64>, ApiError> {
    let Some(value) = headers.get(IF_MATCH) else {
        return Ok(None);
    };
    let raw = value
        .to_str()
        .map_err(|_| ApiError::validation("If-Match header is not valid text"))?
        .trim();
    let bare = raw.strip_prefix("W/").unwrap_or(raw).trim_matches('"');
    bare.parse()
        .map(Some)
        .map_err(|_| ApiError::validation(format!("If-Match must carry a revision number, got `{raw}`")))
}

fn body_or_default<T: DeserializeOwned + Default>(bytes: &Bytes) -> Result<T, ApiError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    body_required(bytes)
}

fn body_required<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::validation(format!("invalid JSON body: {e}")))
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> Result<T, ApiError> {
    q.map(|Query(v)| v)
        .map_err(|e| ApiError::validation(format!("invalid query: {}", e.body_text())))
}

fn content_type(headers: &HeaderMap) -> String {
    headers
        .get(CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase()
}

// ---- projects ------------------------------------------------------------

#[derive(Deserialize, Default)]
struct CreateProject {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    name: String,
}

fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.trim().chars() {
        if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

#[derive(Serialize)]
struct ProjectInfo {
    id: String,
    name: String,
    revision: u64,
    responses: usize,
    human_coded: usize,
    codebook: Codebook,
    embedding: Option<EmbeddingBinding>,
    classification: Option<ClassificationRun>,
    assignments: usize,
    adapter_trained: bool,
    adapter_active: bool,
    audit: Option<AuditSummary>,
    has_projection: bool,
}

fn project_info(p: &Project, dir: &Path) -> qualcode_core::Result<ProjectInfo> {
    Ok(ProjectInfo {
        id: p.id.clone(),
        name: p.name.clone(),
        revision: p.revision,
        responses: p.responses.len(),
        human_coded: p.responses.iter().filter(|r| r.human_code.is_some()).count(),
        codebook: p.codebook.clone(),
        embedding: p.embedding.clone(),
        classification: p.classification.clone(),
        assignments: p.assignments.len(),
        adapter_trained: engine::adapter_dir(dir).exists(),
        adapter_active: p.adapter_active,
        audit: engine::summary(p)?,
        has_projection: dir.join(engine::PROJECTION_FILE).exists(),
    })
}

async fn list_projects(State(state): Shared) -> ApiResult {
    let store = state.store.clone();
    let listed = tokio::task::spawn_blocking(move || -> qualcode_core::Result<Vec<Value>> {
        let mut out = Vec::new();
        for id in store.list()? {
            let p = store.load(&id)?;
            out.push(json!({"id": p.id, "name": p.name, "revision": p.revision, "responses": p.responses.len()}));
        }
        Ok(out)
    })
    .await??;
    Ok(text(StatusCode::OK, "application/json", render_json(&listed), None))
}

async fn create_project(State(state): Shared, body: Bytes) -> ApiResult {
    let req: CreateProject = body_or_default(&body)?;
    let name = req.name.trim().to_string();
    if name.is_empty() {
        return Err(ApiError::validation("project name must not be empty"));
    }
    let id = req.id.unwrap_or_else(|| slug(&name));
    let dir = state.store.project_dir(&id)?;
    let lock = state.project_lock(&id);
    let _guard = lock.lock().await;
    if state.store.exists(&id) {
        return Err(Error::Integrity(format!("project `{id}` already exists")).into());
    }
    let store = state.store.clone();
    let info = tokio::task::spawn_blocking(move || {
        let project = Project::new(id, name);
        store.save(&project)?;
        project_info(&project, &dir)
    })
    .await??;
    let mut resp = json_ok(&info, info.revision);
    *resp.status_mut() = StatusCode::CREATED;
    Ok(resp)
}

async fn get_project(State(state): Shared, UrlPath(id): UrlPath<String>) -> ApiResult {
    let (info, rev) = state.read(&id, project_info).await?;
    Ok(json_ok(&info, rev))
}

async fn get_responses(State(state): Shared, UrlPath(id): UrlPath<String>) -> ApiResult {
    let (responses, rev) = state.read(&id, |p, _| Ok(p.responses.clone())).await?;
    Ok(json_ok(&responses, rev))
}

#[derive(Deserialize, Default)]
struct ImportQuery {
    format: Option<SourceFormat>,
    id_column: Option<String>,
    text_column: Option<String>,
    code_column: Option<String>,
}

fn detect_format(q: &ImportQuery, headers: &HeaderMap, body: &[u8]) -> SourceFormat {
    if let Some(f) = q.format {
        return f;
    }
    let ct = content_type(headers);
    if ct.contains("csv") {
        return SourceFormat::Csv;
    }
    if ct.contains("ndjson") || ct.contains("jsonl") || ct.contains("json") {
        return SourceFormat::Jsonl;
    }
    match body.iter().find(|b| !b.is_ascii_whitespace()) {
        Some(b'{') => SourceFormat::Jsonl,
        _ => SourceFormat::Csv,
    }
}

async fn post_responses(
    State(state): Shared,
    UrlPath(id): UrlPath<String>,
    q: Result<Query<ImportQuery>, QueryRejection>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let q = query(q)?;
    let expected = if_match(&headers)?;
    let format = detect_format(&q, &headers, &body);
    let mut mapping = ImportMapping::default();
    if let Some(c) = q.id_column {
        mapping.id_column = Some(c).filter(|c| !c.is_empty());
    }
    if let Some(c) = q.text_column {
        mapping.text_column = c;
    }
    if let Some(c) = q.code_column {
        mapping.code_column = Some(c).filter(|c| !c.is_empty());
    }
    let (n, rev) = state
        .mutate(&id, expected, move |p, _| engine::import_into(p, &body[..], format, &mapping))
        .await?;
    Ok(revised(json!({"imported": n}), rev))
}

async fn get_codebook(State(state): Shared, UrlPath(id): UrlPath<String>) -> ApiResult {
    let (cb, rev) = state.read(&id, |p, _| Ok(p.codebook.clone())).await?;
    Ok(json_ok(&cb, rev))
}

async fn put_codebook(
    State(state): Shared,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let expected = if_match(&headers)?;
    let codebook: Codebook = body_required(&body)?;
    let (cb, rev) = state
        .mutate(&id, expected, move |p, _| {
            engine::set_codebook(p, codebook)?;
            Ok(p.codebook.clone())
        })
        .await?;
    Ok(revised(json!({"codebook": cb}), rev))
}

// ---- jobs ----------------------------------------------------------------

async fn start_job<F>(
    state: Arc<AppState>,
    id: String,
    kind: JobKind,
    expected: Option<u64>,
    result_ref: Option<String>,
    op: F,
) -> ApiResult
where
    F: FnOnce(&mut Project, &Path) -> qualcode_core::Result<Value> + Send + 'static,
{
    let (_, current) = state.read(&id, |_, _| Ok(())).await?;
    if let Some(given) = expected {
        if given != current {
            return Err(Error::StaleRevision { given, current }.into());
        }
    }
    let job = state.jobs.create(kind, &id);
    let job_id = job.id.clone();
    let st = state.clone();
    tokio::spawn(async move {
        let _permit = st.workers.clone().acquire_owned().await.expect("worker pool open");
        st.jobs.advance(&job_id, JobState::Running, 0.0);
        match st.mutate(&id, expected, op).await {
            Ok((mut summary, revision)) => {
                if let Value::Object(map) = &mut summary {
                    map.insert("revision".into(), json!(revision));
                }
                st.jobs.finish(&job_id, result_ref, summary);
            }
            Err(e) => st.jobs.fail(&job_id, &e.body.code, e.body.message),
        }
    });
    let location = format!("/api/v1/jobs/{}", job.id);
    let mut resp = text(StatusCode::ACCEPTED, "application/json", render_json(&job), None);
    resp.headers_mut()
        .insert(LOCATION, HeaderValue::from_str(&location).expect("ascii location"));
    Ok(resp)
}

#[derive(Deserialize)]
struct JobsQuery {
    project: Option<String>,
}

async fn list_jobs(State(state): Shared, q: Result<Query<JobsQuery>, QueryRejection>) -> ApiResult {
    let q = query(q)?;
    let jobs = state.jobs.list(q.project.as_deref());
    Ok(text(StatusCode::OK, "application/json", render_json(&jobs), None))
}

async fn get_job(State(state): Shared, UrlPath(id): UrlPath<String>) -> ApiResult {
    let job = state
        .jobs
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("job `{id}`")))?;
    Ok(text(StatusCode::OK, "application/json", render_json(&job), None))
}

fn summary_value<T: Serialize>(value: &T) -> qualcode_core::Result<Value> {
    Ok(serde_json::to_value(value)?)
}

// ---- pipeline steps ------------------------------------------------------

#[derive(Deserialize, Default)]
struct EmbedRequest {
    #[serde(default)]
    provider: Option<ProviderConfig>,
    #[serde(default)]
    instruction: Option<InstructionPreset>,
}

async fn embed(State(state): Shared, UrlPath(id): UrlPath<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let expected = if_match(&headers)?;
    let req: EmbedRequest = body_or_default(&body)?;
    let mut provider = req
        .provider
        .or_else(|| state.provider.clone())
        .ok_or_else(|| ApiError::validation("no embedding provider configured; pass one in the request body"))?;
    if let Some(preset) = req.instruction {
        provider = provider.with_instruction(preset);
    }
    provider.validate()?;
    start_job(state.clone(), id, JobKind::Embed, expected, None, move |p, dir| {
        summary_value(&engine::embed_project(p, dir, provider)?)
    })
    .await
}

#[derive(Deserialize, Default)]
struct ClassifyRequest {
    #[serde(default)]
    mode: ClassifyMode,
    #[serde(default)]
    temperature: Option<f64>,
}

async fn classify(State(state): Shared, UrlPath(id): UrlPath<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let expected = if_match(&headers)?;
    let req: ClassifyRequest = body_or_default(&body)?;
    let temperature = req.temperature.unwrap_or(DEFAULT_TEMPERATURE);
    let (summary, rev) = state
        .mutate(&id, expected, move |p, dir| engine::classify_project(p, dir, req.mode, temperature))
        .await?;
    Ok(revised(summary, rev))
}

async fn get_assignments(State(state): Shared, UrlPath(id): UrlPath<String>) -> ApiResult {
    let (assignments, rev) = state
        .read(&id, |p, _| Ok(p.assignments.values().cloned().collect::<Vec<_>>()))
        .await?;
    Ok(json_ok(&assignments, rev))
}

#[derive(Deserialize, Default)]
struct MetricsQuery {
    #[serde(default)]
    drop_other: bool,
    #[serde(default)]
    exclude_exemplars: bool,
    /// `k=3,runs=20,seed=42`
    resample: Option<String>,
    mode: Option<ClassifyMode>,
    temperature: Option<f64>,
}

async fn get_metrics(
    State(state): Shared,
    UrlPath(id): UrlPath<String>,
    q: Result<Query<MetricsQuery>, QueryRejection>,
) -> ApiResult {
    let q = query(q)?;
    let opts = EvaluateOptions {
        drop_other: q.drop_other,
        exclude_exemplars: q.exclude_exemplars,
        resample: q.resample.as_deref().map(ResampleSpec::parse).transpose()?,
        mode: q.mode,
        temperature: q.temperature,
    };
    let (report, rev) = state.read(&id, move |p, dir| engine::evaluate(p, dir, &opts)).await?;
    Ok(json_ok(&report, rev))
}

#[derive(Deserialize)]
#[serde(default)]
struct AuditRequest {
    threshold: f64,
    code_source: CodeSource,
}

impl Default for AuditRequest {
    fn default() -> Self {
        Self {
            threshold: audit::DEFAULT_THRESHOLD,
            code_source: CodeSource::Human,
        }
    }
}

async fn post_audit(State(state): Shared, UrlPath(id): UrlPath<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let expected = if_match(&headers)?;
    let req: AuditRequest = body_or_default(&body)?;
    let result_ref = format!("/api/v1/projects/{id}/audit");
    start_job(state.clone(), id, JobKind::Audit, expected, Some(result_ref), move |p, dir| {
        let report = engine::audit_project(p, dir, req.threshold, req.code_source)?;
        Ok(json!({
            "flags": report.flags.len(),
            "conflict_components": report.conflict_components.len(),
        }))
    })
    .await
}

#[derive(Deserialize, Default)]
struct FormatQuery {
    format: Option<String>,
}

async fn get_audit(
    State(state): Shared,
    UrlPath(id): UrlPath<String>,
    q: Result<Query<FormatQuery>, QueryRejection>,
) -> ApiResult {
    let q = query(q)?;
    let format = q.format.unwrap_or_else(|| "json".into());
    let (body, rev) = state
        .read(&id, move |p, _| {
            let report = p
                .audit
                .as_ref()
                .ok_or_else(|| Error::NotFound("no audit report; run an audit first".into()))?;
            match format.as_str() {
                "json" => Ok((render_json(report), "application/json")),
                "csv" => Ok((engine::audit_review_csv(p, report)?, "text/csv")),
                other => Err(Error::Invalid(format!("unknown audit format `{other}`"))),
            }
        })
        .await?;
    Ok(text(StatusCode::OK, body.1, body.0, Some(rev)))
}

async fn get_audit_summary(State(state): Shared, UrlPath(id): UrlPath<String>) -> ApiResult {
    let (summary, rev) = state
        .read(&id, |p, _| {
            engine::summary(p)?.ok_or_else(|| Error::NotFound("no audit report; run an audit first".into()))
        })
        .await?;
    Ok(json_ok(&summary, rev))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ResolutionBody {
    List(Vec<Resolution>),
    Wrapped { resolutions: Vec<Resolution> },
}

async fn post_resolutions(
    State(state): Shared,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let expected = if_match(&headers)?.ok_or_else(|| {
        ApiError::new(
            StatusCode::PRECONDITION_REQUIRED,
            "precondition_required",
            "resolutions require an If-Match header carrying the project revision",
        )
    })?;
    let resolutions = if content_type(&headers).contains("csv") {
        engine::parse_resolutions_csv(&body[..])?
    } else {
        match body_required::<ResolutionBody>(&body)? {
            ResolutionBody::List(r) | ResolutionBody::Wrapped { resolutions: r } => r,
        }
    };
    let (summary, rev) = state
        .mutate(&id, Some(expected), move |p, _| engine::resolve(p, resolutions, Some(expected)))
        .await?;
    Ok(revised(json!({"summary": summary}), rev))
}

// ---- adapter -------------------------------------------------------------

#[derive(Deserialize, Default)]
struct TrainRequest {
    #[serde(default)]
    hyperparams: AdapterHyperparams,
    /// Switch classification over to the adapted space once trained.
    #[serde(default)]
    activate: bool,
}

async fn train_adapter(
    State(state): Shared,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let expected = if_match(&headers)?;
    let req: TrainRequest = body_or_default(&body)?;
    req.hyperparams.validate()?;
    let result_ref = format!("/api/v1/projects/{id}/adapter");
    start_job(state.clone(), id, JobKind::AdapterTrain, expected, Some(result_ref), move |p, dir| {
        let trained = engine::train_adapter(p, dir, &req.hyperparams)?;
        if req.activate {
            engine::set_adapter_active(p, dir, true)?;
        }
        Ok(json!({
            "model_id": trained.adapted_model_id(),
            "pair_count": trained.manifest.pair_count,
            "initial_loss": trained.manifest.initial_loss,
            "final_loss": trained.manifest.final_loss,
            "active": p.adapter_active,
        }))
    })
    .await
}

#[derive(Deserialize)]
struct ApplyRequest {
    #[serde(default = "yes")]
    active: bool,
}

fn yes() -> bool {
    true
}

impl Default for ApplyRequest {
    fn default() -> Self {
        Self { active: true }
    }
}

async fn apply_adapter(
    State(state): Shared,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let expected = if_match(&headers)?;
    let req: ApplyRequest = body_or_default(&body)?;
    let (active, rev) = state
        .mutate(&id, expected, move |p, dir| {
            engine::set_adapter_active(p, dir, req.active)?;
            Ok(p.adapter_active)
        })
        .await?;
    Ok(revised(json!({"adapter_active": active}), rev))
}

async fn get_adapter(State(state): Shared, UrlPath(id): UrlPath<String>) -> ApiResult {
    let (info, rev) = state
        .read(&id, |p, dir| {
            let adapter = engine::load_adapter(p, dir)?;
            Ok(json!({
                "model_id": adapter.model_id,
                "adapted_model_id": adapter.adapted_model_id(),
                "dim": adapter.dim,
                "active": p.adapter_active,
                "manifest": adapter.manifest,
            }))
        })
        .await?;
    Ok(json_ok(&info, rev))
}

// ---- projection and export -----------------------------------------------

#[derive(Deserialize)]
struct ProjectionRequest {
    method: ProjectionMethod,
    #[serde(default)]
    params: TsneParams,
}

async fn post_projection(
    State(state): Shared,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let expected = if_match(&headers)?;
    let req: ProjectionRequest = body_required(&body)?;
    let result_ref = format!("/api/v1/projects/{id}/projection");
    start_job(state.clone(), id, JobKind::Projection, expected, Some(result_ref), move |p, dir| {
        let result = engine::project_2d(p, dir, req.method, &req.params)?;
        Ok(json!({"method": result.projection.method, "points": result.points.len()}))
    })
    .await
}

async fn get_projection(
    State(state): Shared,
    UrlPath(id): UrlPath<String>,
    q: Result<Query<FormatQuery>, QueryRejection>,
) -> ApiResult {
    let q = query(q)?;
    let format = q.format.unwrap_or_else(|| "json".into());
    let (body, rev) = state
        .read(&id, move |_, dir| {
            let result = engine::load_projection(dir)?
                .ok_or_else(|| Error::NotFound("no projection; run one first".into()))?;
            match format.as_str() {
                "json" => Ok((render_json(&result), "application/json")),
                "csv" => Ok((engine::projection_csv(&result.points)?, "text/csv")),
                other => Err(Error::Invalid(format!("unknown projection format `{other}`"))),
            }
        })
        .await?;
    Ok(text(StatusCode::OK, body.1, body.0, Some(rev)))
}

#[derive(Deserialize, Default)]
struct ExportQuery {
    format: Option<String>,
    /// assignments (default), responses, audit or projection
    data: Option<String>,
}

async fn export(
    State(state): Shared,
    UrlPath(id): UrlPath<String>,
    q: Result<Query<ExportQuery>, QueryRejection>,
) -> ApiResult {
    let q = query(q)?;
    let format = q.format.unwrap_or_else(|| "csv".into());
    let data = q.data.unwrap_or_else(|| "assignments".into());
    let (body, rev) = state
        .read(&id, move |p, dir| {
            let body = match (data.as_str(), format.as_str()) {
                ("assignments", "csv") => engine::assignments_csv(p)?,
                ("assignments", "jsonl") => engine::assignments_jsonl(p)?,
                ("responses", "jsonl") => engine::responses_jsonl(p)?,
                ("audit", "csv") => {
                    let report = p
                        .audit
                        .as_ref()
                        .ok_or_else(|| Error::NotFound("no audit report; run an audit first".into()))?;
                    engine::audit_review_csv(p, report)?
                }
                ("projection", "csv") => {
                    let result = engine::load_projection(dir)?
                        .ok_or_else(|| Error::NotFound("no projection; run one first".into()))?;
                    engine::projection_csv(&result.points)?
                }
                (d, f) => return Err(Error::Invalid(format!("cannot export `{d}` as `{f}`"))),
            };
            let ct = if format == "csv" { "text/csv" } else { "application/x-ndjson" };
            Ok((body, ct))
        })
        .await?;
    Ok(text(StatusCode::OK, body.1, body.0, Some(rev)))
}
