use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::multipart::MultipartError;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mrp_core::data::{parse_records, SchemaConfig};
use mrp_core::model::ModelSpec;
use mrp_core::pipeline::{model_dir_name, RunConfig, RunManifest};
use mrp_core::poststrat::EstimateSeries;
use mrp_core::sampler::SamplerConfig;
use mrp_core::Error;
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::jobs::{JobKind, JobState};
use crate::{AppState, DatasetMeta, FitMeta, UPLOAD_FIELDS};

const OPENAPI: &str = include_str!("../../../docs/openapi.json");

/// Rejected rows echoed back in an upload response.
const REJECTS_SHOWN: usize = 100;

pub struct ApiError(StatusCode, Value);

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError(status, json!({ "error": message.into() }))
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} `{id}`"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<MultipartError> for ApiError {
    fn from(e: MultipartError) -> Self {
        ApiError::new(e.status(), e.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> ApiResult<T> {
    let text = std::fs::read_to_string(path).map_err(ApiError::internal)?;
    serde_json::from_str(&text).map_err(ApiError::internal)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> ApiResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(ApiError::internal)?;
    std::fs::write(path, text).map_err(ApiError::internal)
}

/// Serves a persisted JSON artifact byte for byte.
fn json_file(path: &Path) -> ApiResult<Response> {
    let bytes = std::fs::read(path)
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, format!("no artifact {}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

fn dataset_dir(s: &AppState, id: &str) -> ApiResult<PathBuf> {
    let dir = s.datasets_dir().join(id);
    if id.starts_with("ds-") && dir.join("meta.json").exists() {
        Ok(dir)
    } else {
        Err(ApiError::not_found("dataset", id))
    }
}

fn fit_meta(s: &AppState, id: &str) -> ApiResult<(PathBuf, FitMeta)> {
    let dir = s.fits_dir().join(id);
    if !id.starts_with("fit-") || !dir.join("meta.json").exists() {
        return Err(ApiError::not_found("fit", id));
    }
    let meta = read_json(&dir.join("meta.json"))?;
    Ok((dir, meta))
}

fn upload_digest(parts: &BTreeMap<&str, Bytes>) -> String {
    let mut h = Sha256::new();
    for (name, _) in UPLOAD_FIELDS {
        let data = &parts[name];
        h.update(name.as_bytes());
        h.update((data.len() as u64).to_le_bytes());
        h.update(data);
    }
    hex::encode(h.finalize())
}

fn find_digest(s: &AppState, digest: &str) -> Option<String> {
    let mut ids: Vec<(u64, String)> = std::fs::read_dir(s.datasets_dir())
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_str()?.to_string();
            Some((name.strip_prefix("ds-")?.parse().ok()?, name))
        })
        .collect();
    ids.sort();
    ids.into_iter().map(|(_, id)| id).find(|id| {
        read_json::<DatasetMeta>(&s.datasets_dir().join(id).join("meta.json"))
            .is_ok_and(|m| m.digest == digest)
    })
}

async fn upload(State(s): State<Arc<AppState>>, mut form: Multipart) -> ApiResult<(StatusCode, Json<DatasetMeta>)> {
    let mut parts: BTreeMap<&str, Bytes> = BTreeMap::new();
    while let Some(field) = form.next_field().await? {
        let name = field.name().unwrap_or_default().to_string();
        let key = match name.as_str() {
            "population" => "acs",
            n => match UPLOAD_FIELDS.iter().find(|(f, _)| *f == n) {
                Some((f, _)) => *f,
                None => {
                    return Err(ApiError::new(
                        StatusCode::BAD_REQUEST,
                        format!("unexpected multipart field `{name}`"),
                    ))
                }
            },
        };
        parts.insert(key, field.bytes().await?);
    }
    if let Some((missing, _)) = UPLOAD_FIELDS.iter().find(|(f, _)| !parts.contains_key(f)) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("missing multipart field `{missing}`"),
        ));
    }

    let parsed = match parse_records(&parts["records"][..], &SchemaConfig::default()) {
        Ok(p) => p,
        Err(Error::TooManyRejects { rejected, total, summary }) => {
            return Err(ApiError(
                StatusCode::BAD_REQUEST,
                json!({
                    "error": format!("{rejected} of {total} rows rejected"),
                    "rejects": { "rejected": rejected, "total_rows": total, "summary": summary },
                }),
            ))
        }
        Err(e) => return Err(ApiError::new(StatusCode::BAD_REQUEST, e.to_string())),
    };

    let digest = upload_digest(&parts);
    let duplicate_of = find_digest(&s, &digest);
    let (id, dir) = s.new_dir(&s.datasets_dir(), "ds").map_err(ApiError::internal)?;
    for (field, file) in UPLOAD_FIELDS {
        std::fs::write(dir.join(file), &parts[field]).map_err(ApiError::internal)?;
    }
    let mut reject_reasons = BTreeMap::new();
    for r in &parsed.rejects {
        *reject_reasons.entry(r.reason.clone()).or_insert(0) += 1;
    }
    let meta = DatasetMeta {
        id,
        digest,
        total_rows: parsed.total_rows,
        accepted: parsed.records.len(),
        rejected: parsed.rejects.len(),
        reject_reasons,
        rejects: parsed
            .rejects
            .iter()
            .take(REJECTS_SHOWN)
            .map(|r| json!({ "line": r.line, "record_id": r.record_id, "reason": r.reason }))
            .collect(),
        duplicate_of,
    };
    write_json(&dir.join("meta.json"), &meta)?;
    Ok((StatusCode::CREATED, Json(meta)))
}

fn preprocess_state(s: &AppState, id: &str) -> Option<JobState> {
    s.registry.latest(JobKind::Preprocess, id).map(|j| j.state)
}

async fn get_dataset(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let dir = dataset_dir(&s, &id)?;
    let meta: Value = read_json(&dir.join("meta.json"))?;
    let job = s.registry.latest(JobKind::Preprocess, &id);
    let report = match job.as_ref().map(|j| j.state) {
        Some(JobState::Succeeded) => read_json::<Value>(&dir.join("run/preprocess/report.json")).ok(),
        _ => None,
    };
    Ok(Json(json!({ "dataset": meta, "preprocess_job": job, "preprocess_report": report })))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PreprocessRequest {
    #[serde(default)]
    seed: Option<u64>,
}

async fn preprocess(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let dir = dataset_dir(&s, &id)?;
    let req: PreprocessRequest = if body.iter().all(u8::is_ascii_whitespace) {
        PreprocessRequest::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?
    };
    if let Some(job) = s.registry.latest(JobKind::Preprocess, &id) {
        if !job.state.is_terminal() {
            return Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job.id, "dataset_id": id }))));
        }
    }
    let cfg = s.preprocess_config(&dir, req.seed.unwrap_or(1));
    let job = s
        .enqueue(JobKind::Preprocess, &id, dir.join("run"), cfg)
        .map_err(ApiError::internal)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job.id, "dataset_id": id }))))
}

async fn describe(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let dir = dataset_dir(&s, &id)?;
    if preprocess_state(&s, &id) != Some(JobState::Succeeded) {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("dataset `{id}` is not preprocessed")));
    }
    json_file(&dir.join("run/describe/describe.json"))
}

fn field_error(field: &str, message: impl Into<String>) -> Value {
    json!({ "field": field, "message": message.into() })
}

fn unprocessable(errors: Vec<Value>) -> ApiError {
    ApiError(
        StatusCode::UNPROCESSABLE_ENTITY,
        json!({ "error": "invalid fit request", "errors": errors }),
    )
}

/// Zip predictor columns of a preprocessed dataset.
fn geo_columns(dataset: &Path) -> ApiResult<Vec<String>> {
    let text = std::fs::read_to_string(dataset.join("run/preprocess/geo.csv")).map_err(ApiError::internal)?;
    let header = text.lines().next().unwrap_or_default();
    Ok(header.split(',').skip(2).map(str::to_string).collect())
}

async fn submit_fit(State(s): State<Arc<AppState>>, Json(body): Json<Value>) -> ApiResult<(StatusCode, Json<Value>)> {
    let mut errors = Vec::new();
    let known = ["dataset_id", "preset", "spec", "sampler", "seed"];
    if let Some(obj) = body.as_object() {
        for k in obj.keys().filter(|k| !known.contains(&k.as_str())) {
            errors.push(field_error(k, "unknown field"));
        }
    } else {
        return Err(unprocessable(vec![field_error("", "expected a JSON object")]));
    }
    let dataset_id = match body.get("dataset_id").and_then(Value::as_str) {
        Some(d) => d.to_string(),
        None => {
            errors.push(field_error("dataset_id", "required"));
            String::new()
        }
    };
    let preset = body.get("preset").and_then(Value::as_str);
    let mut spec = match (preset, body.get("spec")) {
        (Some(_), Some(_)) => {
            errors.push(field_error("spec", "give either `spec` or `preset`, not both"));
            None
        }
        (Some(p), None) => {
            let s = ModelSpec::preset(p);
            if s.is_none() {
                errors.push(field_error("preset", format!("unknown preset `{p}` (A, B or C)")));
            }
            s
        }
        // parsed without the built-in check so each field error is reported
        (None, Some(v)) => match serde_json::from_value::<ModelSpec>(v.clone()) {
            Ok(s) => Some(s),
            Err(e) => {
                errors.push(field_error("spec", e.to_string()));
                None
            }
        },
        (None, None) => {
            errors.push(field_error("spec", "give a `spec` object or a `preset` name"));
            None
        }
    };
    if let Some(sp) = &spec {
        for e in sp.check() {
            errors.push(field_error(&format!("spec.{}", e.field), e.message));
        }
    }
    let sampler = match body.get("sampler") {
        None => SamplerConfig::default(),
        Some(v) => match serde_json::from_value::<SamplerConfig>(v.clone()) {
            Ok(c) => c,
            Err(e) => {
                errors.push(field_error("sampler", e.to_string()));
                SamplerConfig::default()
            }
        },
    };
    if let Err(e) = sampler.validate() {
        errors.push(field_error("sampler", e.to_string()));
    }
    let seed = match body.get("seed") {
        None => 1,
        Some(v) => v.as_u64().unwrap_or_else(|| {
            errors.push(field_error("seed", "expected a non-negative integer"));
            1
        }),
    };
    if !errors.is_empty() {
        return Err(unprocessable(errors));
    }

    let dataset = dataset_dir(&s, &dataset_id)?;
    if preprocess_state(&s, &dataset_id) != Some(JobState::Succeeded) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("dataset `{dataset_id}` is not preprocessed; POST /datasets/{dataset_id}/preprocess first"),
        ));
    }
    let columns = geo_columns(&dataset)?;
    let mut spec = spec.take().expect("validated above");
    if preset.is_some() {
        spec = spec.with_predictors(&columns);
    }
    for f in spec.fixed_effects.iter().filter(|f| *f != "male") {
        if !columns.contains(f) {
            errors.push(field_error("spec.fixed_effects", format!("unknown predictor `{f}`")));
        }
    }
    for v in &spec.varying_slopes {
        if !columns.contains(&v.predictor) {
            errors.push(field_error("spec.varying_slopes", format!("unknown predictor `{}`", v.predictor)));
        }
    }
    if !errors.is_empty() {
        return Err(unprocessable(errors));
    }
    if spec.name.trim().is_empty() {
        spec.name = "model".into();
    }

    let (fit_id, dir) = s.new_dir(&s.fits_dir(), "fit").map_err(ApiError::internal)?;
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, spec.to_json()).map_err(ApiError::internal)?;
    let meta = FitMeta {
        id: fit_id.clone(),
        dataset_id: dataset_id.clone(),
        model: model_dir_name(&spec.name),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    let mut cfg = RunConfig {
        seed,
        models: vec![spec_path.display().to_string()],
        sampler: SamplerConfig { seed, ..sampler },
        ..RunConfig::default()
    };
    cfg.inputs.preprocessed = Some(dataset.join("run"));
    let job = s
        .enqueue(JobKind::Fit, &fit_id, dir.join("run"), cfg)
        .map_err(ApiError::internal)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "fit_id": fit_id, "job_id": job.id }))))
}

async fn get_fit(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let (dir, meta) = fit_meta(&s, &id)?;
    let spec: Value = read_json(&dir.join("spec.json"))?;
    let job = s.registry.latest(JobKind::Fit, &id);
    Ok(Json(json!({ "fit": meta, "spec": spec, "job": job })))
}

async fn get_job(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    s.registry
        .get(&id)
        .map(|j| Json(json!(j)))
        .ok_or_else(|| ApiError::not_found("job", &id))
}

#[derive(Debug, Deserialize)]
struct EstimatesQuery {
    group: Option<String>,
    week: Option<String>,
}

/// Grouping whose artifact answers `group`, given whether a week filter
/// applies.
fn grouping_for(group: &str, week: bool) -> Option<&'static str> {
    Some(match group {
        "overall" if week => "week",
        "overall" => "overall",
        "week" => "week",
        "sex" => "sex:week",
        "race" => "race:week",
        "age" => "age:week",
        "county" => "county:week",
        _ => return None,
    })
}

async fn fit_resource(
    State(s): State<Arc<AppState>>,
    UrlPath((id, resource)): UrlPath<(String, String)>,
    Query(q): Query<EstimatesQuery>,
) -> ApiResult<Response> {
    let (dir, meta) = fit_meta(&s, &id)?;
    if !["summary", "loo", "ppc", "estimates"].contains(&resource.as_str()) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown resource `{resource}`")));
    }
    let state = s.registry.latest(JobKind::Fit, &id).map(|j| j.state);
    if state != Some(JobState::Succeeded) {
        return Err(ApiError(
            StatusCode::CONFLICT,
            json!({ "error": format!("fit `{id}` has not succeeded"), "state": state }),
        ));
    }
    let run = dir.join("run");
    let model = &meta.model;
    match resource.as_str() {
        "summary" => json_file(&run.join("fit").join(model).join("summary.json")),
        "loo" => json_file(&run.join("diagnose").join(model).join("loo.json")),
        "ppc" => json_file(&run.join("diagnose").join(model).join("ppc.json")),
        _ => {
            let group = q.group.as_deref().unwrap_or("overall");
            let grouping = grouping_for(group, q.week.is_some()).ok_or_else(|| {
                ApiError::new(
                    StatusCode::BAD_REQUEST,
                    format!("group must be one of overall, week, sex, race, age, county; got `{group}`"),
                )
            })?;
            let file = run
                .join("poststratify")
                .join(model)
                .join(format!("{}.json", grouping.replace(':', "_by_")));
            let series: EstimateSeries = read_json(&file)?;
            let series = match &q.week {
                Some(w) => series.filter_week(w),
                None => series,
            };
            Ok(Json(series).into_response())
        }
    }
}

async fn openapi() -> Response {
    ([(header::CONTENT_TYPE, "application/json")], OPENAPI).into_response()
}

async fn manifest(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<RunManifest>> {
    let (dir, _) = fit_meta(&s, &id)?;
    RunManifest::load(&dir.join("run"))
        .map(Json)
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, e.to_string()))
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload;
    let static_dir = state.config.static_dir.clone();
    let mut r = Router::new()
        .route("/datasets", post(upload))
        .route("/datasets/{id}", get(get_dataset))
        .route("/datasets/{id}/preprocess", post(preprocess))
        .route("/datasets/{id}/describe", get(describe))
        .route("/fits", post(submit_fit))
        .route("/fits/{id}", get(get_fit))
        .route("/fits/{id}/manifest", get(manifest))
        .route("/fits/{id}/{resource}", get(fit_resource))
        .route("/jobs/{id}", get(get_job))
        .route("/openapi.json", get(openapi))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state);
    if let Some(dir) = static_dir {
        r = r.nest_service("/ui", tower_http::services::ServeDir::new(dir));
    }
    r
}
