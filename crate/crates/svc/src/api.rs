//! HTTP/JSON API. Request and response bodies are documented in
//! `docs/api.md`; every response carries an `x-correlation-id` header and
//! errors repeat it in the body.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, FromRequest, Path, Request, State};
use axum::http::{HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use qrgmm::datagen::{csv_ingest_reader, BadRowPolicy, Dataset, RawValue, SchemaConfig};
use qrgmm::eval::ModelSpec;
use qrgmm::generator::covariate_hash;
use qrgmm::model::QuantileModel;
use qrgmm::risk::{risk_curve, Estimator, GeneralizedLoss, RiskCurve, RiskSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ServeConfig;
use crate::error::{ApiError, ErrorBody, ErrorDetail};
use crate::jobs::{Job, JobStatus, JobStore};
use crate::registry::{ModelRegistryEntry, Registered, Registry};

pub const API_VERSION: u32 = 1;
const CORRELATION_HEADER: &str = "x-correlation-id";

#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<Registry>,
    pub jobs: Arc<JobStore>,
    pub config: Arc<ServeConfig>,
}

impl AppState {
    pub fn new(registry: Registry, config: ServeConfig) -> Self {
        AppState {
            registry: Arc::new(registry),
            jobs: Arc::new(JobStore::default()),
            config: Arc::new(config),
        }
    }
}

/// JSON body extractor whose rejections are [`ApiError`]s.
pub struct ApiJson<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        let Json(v) = Json::<T>::from_request(req, state).await?;
        Ok(ApiJson(v))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/models", get(list_models).post(create_model))
        .route("/models/{id}", get(get_model))
        .route("/models/{id}/samples", post(samples))
        .route("/models/{id}/risk-curve", post(risk_curve_handler))
        .route("/jobs/{id}", get(get_job))
        .fallback(|| async { ApiError::not_found("no such route") })
        .layer(DefaultBodyLimit::max(256 << 20))
        .layer(middleware::from_fn(correlate))
        .with_state(state)
}

/// Assigns a correlation id (the client's, if it sent one), renders
/// handler errors with it, and logs one line per request.
async fn correlate(req: Request, next: Next) -> Response {
    let id = req
        .headers()
        .get(CORRELATION_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|v| !v.is_empty() && v.len() <= 128)
        .map(str::to_string)
        .unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let mut res = next.run(req).await;
    if let Some(err) = res.extensions_mut().remove::<ApiError>() {
        if err.status.is_server_error() {
            tracing::error!(correlation_id = %id, code = err.code, "{}", err.message);
        }
        let body = ErrorBody {
            error: ErrorDetail {
                code: err.code,
                message: &err.message,
                correlation_id: &id,
            },
        };
        res = (err.status, Json(body)).into_response();
    }
    if let Ok(v) = HeaderValue::from_str(&id) {
        res.headers_mut().insert(CORRELATION_HEADER, v);
    }
    tracing::info!(correlation_id = %id, %method, path, status = res.status().as_u16(), "request");
    res
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    version: &'static str,
    api_version: u32,
    models: usize,
}

async fn health(State(st): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok",
        version: env!("CARGO_PKG_VERSION"),
        api_version: API_VERSION,
        models: st.registry.list().len(),
    })
}

async fn list_models(State(st): State<AppState>) -> Json<Vec<ModelRegistryEntry>> {
    Json(st.registry.list())
}

#[derive(Serialize)]
pub struct ModelView {
    #[serde(flatten)]
    pub entry: ModelRegistryEntry,
    pub fit: serde_json::Value,
}

fn lookup(st: &AppState, id: &str) -> Result<Arc<Registered>, ApiError> {
    st.registry.get(id).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_model",
            format!("no model {id:?}"),
        )
    })
}

async fn get_model(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<ModelView>, ApiError> {
    let reg = lookup(&st, &id)?;
    Ok(Json(ModelView {
        entry: reg.entry.clone(),
        fit: crate::fit_summary(reg.sampler.model()),
    }))
}

async fn get_job(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<Job>, ApiError> {
    st.jobs
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no job {id:?}")))
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    pub schema: SchemaConfig,
    /// CSV text with a header row.
    pub csv: String,
    #[serde(default)]
    pub bad_rows: BadRowPolicy,
    #[serde(default)]
    pub estimator: ModelSpec,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Serialize)]
struct TrainResponse {
    job: Job,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelView>,
    rows_read: usize,
    rows_rejected: usize,
}

fn run_job(
    st: &AppState,
    job: &Job,
    data: &Dataset,
    req: &TrainRequest,
) -> Result<Arc<Registered>, ApiError> {
    let result = crate::fit_model(data, &req.estimator, req.m, req.seed)
        .map_err(ApiError::from)
        .and_then(|model| {
            st.registry
                .insert(model, Some(job.dataset_hash.clone()), Some(req.seed))
                .map_err(|e| ApiError::internal(e.to_string()))
        });
    let status = match &result {
        Ok(reg) => JobStatus::Succeeded {
            model_id: reg.entry.id.clone(),
        },
        Err(e) => JobStatus::Failed {
            code: e.code.into(),
            message: e.message.clone(),
        },
    };
    st.jobs.finish(&job.id, status);
    result
}

/// Ingests the uploaded CSV and trains. Small linear fits finish within
/// the request (201); everything else runs as a job (202).
async fn create_model(
    State(st): State<AppState>,
    ApiJson(req): ApiJson<TrainRequest>,
) -> Result<Response, ApiError> {
    let req = Arc::new(req);
    let r = Arc::clone(&req);
    let (data, report) = blocking(move || {
        csv_ingest_reader(r.csv.as_bytes(), &r.schema, r.bad_rows).map_err(ApiError::from)
    })
    .await?;
    let hash = data.content_hash();
    let job = st.jobs.start(&hash).map_err(|running| {
        ApiError::conflict(format!(
            "dataset {hash} is already being trained by job {running}"
        ))
    })?;
    let sync =
        matches!(req.estimator, ModelSpec::LinearQr { .. }) && data.n() <= st.config.sync_max_rows;
    let (rows_read, rows_rejected) = (report.rows_read, report.rejected.len());
    if sync {
        let (s, j) = (st.clone(), job.clone());
        let reg = blocking(move || run_job(&s, &j, &data, &req)).await?;
        let body = TrainResponse {
            job: st.jobs.get(&job.id).unwrap_or(job),
            model: Some(ModelView {
                entry: reg.entry.clone(),
                fit: crate::fit_summary(reg.sampler.model()),
            }),
            rows_read,
            rows_rejected,
        };
        return Ok((StatusCode::CREATED, Json(body)).into_response());
    }
    let (s, j) = (st.clone(), job.clone());
    tokio::spawn(async move {
        let jid = j.id.clone();
        let s2 = s.clone();
        let joined = tokio::task::spawn_blocking(move || run_job(&s2, &j, &data, &req)).await;
        if let Err(e) = joined {
            s.jobs.finish(
                &jid,
                JobStatus::Failed {
                    code: "internal".into(),
                    message: format!("worker failed: {e}"),
                },
            );
        }
    });
    let body = TrainResponse {
        job,
        model: None,
        rows_read,
        rows_rejected,
    };
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    pub covariates: BTreeMap<String, RawValue>,
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Serialize)]
struct SampleResponse {
    model_id: String,
    x_hash: String,
    seed: u64,
    k: usize,
    rng: &'static str,
    samples: Vec<f64>,
}

fn check_k(st: &AppState, k: usize) -> Result<(), ApiError> {
    if k == 0 || k > st.config.max_samples {
        return Err(ApiError::bad_request(format!(
            "k must lie in [1, {}], got {k}",
            st.config.max_samples
        )));
    }
    Ok(())
}

async fn samples(
    State(st): State<AppState>,
    Path(id): Path<String>,
    ApiJson(req): ApiJson<SampleRequest>,
) -> Result<Json<SampleResponse>, ApiError> {
    let reg = lookup(&st, &id)?;
    check_k(&st, req.k)?;
    let x = reg.sampler.model().schema().encode_named(&req.covariates)?;
    let out = blocking(move || {
        let samples = reg.sampler.sample(&x, req.k, req.seed)?;
        Ok(SampleResponse {
            model_id: reg.entry.id.clone(),
            x_hash: covariate_hash(&x),
            seed: req.seed,
            k: req.k,
            rng: "chacha8",
            samples,
        })
    })
    .await?;
    Ok(Json(out))
}

/// A registered loss plugin by name, or a full specification.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum LossChoice {
    Named(String),
    Spec(GeneralizedLoss),
}

impl LossChoice {
    fn resolve(&self) -> Result<(String, GeneralizedLoss), ApiError> {
        match self {
            LossChoice::Named(n) => {
                let gl = match n.as_str() {
                    "default_probability" => GeneralizedLoss::default_probability(),
                    "expected_loss" => GeneralizedLoss::expected_loss(),
                    "squared_loss" => GeneralizedLoss::squared_loss(),
                    _ => {
                        return Err(ApiError::bad_request(format!(
                            "unknown loss {n:?} (expected default_probability, expected_loss or squared_loss)"
                        )))
                    }
                };
                Ok((n.clone(), gl))
            }
            LossChoice::Spec(gl) => Ok(("custom".into(), gl.clone())),
        }
    }
}

fn default_points() -> usize {
    100
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskQuery {
    pub covariates: BTreeMap<String, RawValue>,
    /// Net revenue per unit sold.
    pub r: f64,
    /// Largest loan level; omitted means `r` times the generated 99th
    /// percentile.
    #[serde(default)]
    pub l_bar: Option<f64>,
    #[serde(default)]
    pub l_min: f64,
    #[serde(default = "default_points")]
    pub points: usize,
    /// Explicit loan levels; overrides `l_min`/`points`.
    #[serde(default)]
    pub loan_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub xi: Option<f64>,
    #[serde(default)]
    pub estimator: Option<Estimator>,
    #[serde(default)]
    pub loss: Option<LossChoice>,
}

#[derive(Serialize)]
struct RiskResponse {
    model_id: String,
    x_hash: String,
    estimator: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss: Option<String>,
    curve: RiskCurve,
}

async fn risk_curve_handler(
    State(st): State<AppState>,
    Path(id): Path<String>,
    ApiJson(q): ApiJson<RiskQuery>,
) -> Result<Json<RiskResponse>, ApiError> {
    let reg = lookup(&st, &id)?;
    let x = reg.sampler.model().schema().encode_named(&q.covariates)?;
    let estimator = q.estimator.unwrap_or(Estimator::ClosedForm);
    let seed = match estimator {
        Estimator::MonteCarlo { k, seed } => {
            check_k(&st, k)?;
            Some(seed)
        }
        Estimator::ClosedForm => None,
    };
    let loss = q.loss.as_ref().map(LossChoice::resolve).transpose()?;
    let out = blocking(move || {
        let cdf = reg.sampler.curve(&x)?;
        let mut spec = match (&q.loan_grid, q.l_bar) {
            (Some(grid), l_bar) => {
                let l_bar = l_bar.unwrap_or_else(|| grid.iter().copied().fold(0.0, f64::max));
                RiskSpec::new(q.r, l_bar, grid.clone())?
            }
            (None, Some(l_bar)) => RiskSpec::uniform(q.r, q.l_min, l_bar, q.points)?,
            (None, None) => {
                if !(q.r > 0.0 && q.r.is_finite()) {
                    return Err(ApiError::bad_request(format!(
                        "r must be positive, got {}",
                        q.r
                    )));
                }
                RiskSpec::auto(&cdf, q.r, q.l_min, q.points)?
            }
        };
        if let Some(xi) = q.xi {
            spec = spec.with_xi(xi)?;
        }
        if let Some((name, gl)) = &loss {
            if name == "custom" {
                gl.check_assumptions(spec.r, spec.l_bar)?;
            }
        }
        let curve = risk_curve(&cdf, &spec, estimator, loss.as_ref().map(|(_, gl)| gl))?;
        Ok(RiskResponse {
            model_id: reg.entry.id.clone(),
            x_hash: covariate_hash(&x),
            estimator: estimator.to_string(),
            seed,
            loss: loss.map(|(n, _)| n),
            curve,
        })
    })
    .await?;
    Ok(Json(out))
}
