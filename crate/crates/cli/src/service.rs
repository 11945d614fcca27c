//! HTTP service over the artifact store.
//!
//! Runs execute on the blocking pool behind a semaphore sized by
//! `service.max_concurrent_runs`. A run's id is derived from its inputs, so
//! resubmitting identical inputs returns the existing run.

use std::collections::{BTreeMap, HashSet};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use complyscan_core::aggregation::{filter_issues, ComplianceReport};
use complyscan_core::config::{AppConfig, ProviderKind};
use complyscan_core::engine::run_id;
use complyscan_core::llm::{display_cost, Gateway};
use complyscan_core::model_card::{parse_any, CardError};
use complyscan_core::pipeline::{
    artifact_names, evaluate_and_report, ingest_policy, write_evaluation, PipelineError,
};
use complyscan_core::policy::{PolicyMeta, PolicyPackage};
use complyscan_core::store::{ArtifactStore, RunRecord, RunStatus, StoreError};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

#[derive(Clone)]
pub struct AppState {
    store: ArtifactStore,
    config: Arc<AppConfig>,
    slots: Arc<Semaphore>,
    /// Run ids currently pending or running in this process.
    active: Arc<Mutex<HashSet<String>>>,
}

impl AppState {
    /// Open the store and fail any run a previous process left unfinished.
    pub fn new(store: ArtifactStore, config: AppConfig) -> Result<AppState, StoreError> {
        let recovered = store.recover_interrupted()?;
        if !recovered.is_empty() {
            tracing::warn!(runs = ?recovered, "marked interrupted runs as failed");
        }
        let slots = config.service.max_concurrent_runs.max(1);
        Ok(AppState {
            store,
            config: Arc::new(config),
            slots: Arc::new(Semaphore::new(slots)),
            active: Arc::new(Mutex::new(HashSet::new())),
        })
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    fn gateway(&self, kind: Option<ProviderKind>) -> Result<Gateway, ApiError> {
        self.config
            .gateway_for(kind.unwrap_or(self.config.provider.kind))
            .map_err(|e| {
                ApiError::new(
                    StatusCode::SERVICE_UNAVAILABLE,
                    "provider_unavailable",
                    e.to_string(),
                )
            })
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/policies", post(create_policy).get(list_policies))
        .route("/cards", post(create_card).get(list_cards))
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/:id", get(get_run))
        .route("/runs/:id/report", get(get_report))
        .route("/runs/:id/heatmap/:policy_id", get(get_heatmap))
        .route("/runs/:id/issues", get(get_issues))
        .route("/runs/:id/ledger", get(get_ledger))
        .with_state(state)
}

/// Bind, print the bound address on stdout and serve until ctrl-c.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    println!("listening on http://{local}");
    tracing::info!(%local, "service started");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    details: Option<serde_json::Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> ApiError {
        ApiError {
            status,
            code,
            message: message.into(),
            details: None,
        }
    }

    fn internal(message: impl ToString) -> ApiError {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            message.to_string(),
        )
    }

    fn unprocessable(message: impl ToString) -> ApiError {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_input",
            message.to_string(),
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": { "code": self.code, "message": self.message } });
        if let Some(details) = self.details {
            body["error"]["details"] = details;
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> ApiError {
        match e {
            StoreError::NotFound { .. } => {
                ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string())
            }
            other => ApiError::internal(other),
        }
    }
}

impl From<CardError> for ApiError {
    fn from(e: CardError) -> ApiError {
        let mut err = ApiError::unprocessable(&e);
        err.details = e.report().and_then(|r| serde_json::to_value(r).ok());
        err
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> ApiError {
        match e {
            PipelineError::Policy(_) | PipelineError::Package(_) | PipelineError::Relevancy(_) => {
                ApiError::unprocessable(e)
            }
            other => ApiError::internal(other),
        }
    }
}

fn parse_json<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(ApiError::internal)?
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyRequest {
    policy_id: String,
    full_name: String,
    jurisdiction: String,
    /// Raw policy text or HTML.
    source: String,
    calibration_card_ids: Vec<String>,
    /// When set, structuring also goes through this provider.
    provider: Option<ProviderKind>,
    version: Option<u64>,
}

async fn create_policy(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: PolicyRequest = parse_json(&body)?;
    if req.calibration_card_ids.is_empty() {
        return Err(ApiError::unprocessable(
            "calibration_card_ids must not be empty",
        ));
    }
    let gateway = state.gateway(req.provider)?;
    let structure_with_provider = req.provider.is_some();
    blocking(move || {
        let cards = req
            .calibration_card_ids
            .iter()
            .map(|id| state.store.card(id))
            .collect::<Result<Vec<_>, _>>()?;
        let version = match req.version {
            Some(v) => v,
            None => match state.store.policy(&req.policy_id) {
                Ok(existing) => existing.version + 1,
                Err(StoreError::NotFound { .. }) => 1,
                Err(e) => return Err(e.into()),
            },
        };
        let meta = PolicyMeta {
            policy_id: req.policy_id,
            full_name: req.full_name,
            jurisdiction: req.jurisdiction,
        };
        let structuring = structure_with_provider.then_some(&gateway);
        let package = ingest_policy(
            &req.source,
            meta,
            structuring,
            &gateway,
            &cards,
            &state.config,
            version,
        )?;
        let stored = state.store.put_policy(&package)?;
        let m = &package.relevancy;
        Ok((
            StatusCode::CREATED,
            Json(json!({
                "policy": stored,
                "relevancy": {
                    "pairs": m.total(),
                    "kept": m.kept_count(),
                    "skipped": m.skipped_count(),
                    "flagged_for_review": m.flagged_count(),
                    "unscored": m.unscored_count(),
                },
            })),
        )
            .into_response())
    })
    .await
}

async fn list_policies(State(state): State<AppState>) -> Result<Response, ApiError> {
    Ok(Json(state.store.list_policies()?).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CardRequest {
    content: String,
}

/// Accepts the card document as the raw body, or JSON `{"content": ...}`.
async fn create_card(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let text = if is_json {
        parse_json::<CardRequest>(&body)?.content
    } else {
        String::from_utf8(body.to_vec())
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))?
    };
    let card = parse_any(&text)?;
    let warnings = card.word_count_warnings();
    let stored = state.store.put_card(&card)?;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "card": stored, "word_count_warnings": warnings })),
    )
        .into_response())
}

async fn list_cards(State(state): State<AppState>) -> Result<Response, ApiError> {
    Ok(Json(state.store.list_cards()?).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunRequest {
    card_id: String,
    policy_ids: Vec<String>,
    provider: Option<ProviderKind>,
    #[serde(default)]
    force: bool,
}

async fn create_run(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: RunRequest = parse_json(&body)?;
    if req.policy_ids.is_empty() {
        return Err(ApiError::unprocessable("policy_ids must not be empty"));
    }
    let card = state.store.card(&req.card_id)?;
    let packages = req
        .policy_ids
        .iter()
        .map(|id| state.store.policy(id))
        .collect::<Result<Vec<PolicyPackage>, _>>()?;
    let gateway = state.gateway(req.provider)?;
    let base_id = run_id(
        &card,
        &packages,
        &state.config.engine,
        gateway.provider_name(),
    );

    let id = {
        let mut active = state.active.lock().expect("active runs lock");
        let id = if req.force {
            (1..)
                .map(|n| format!("{base_id}-{n}"))
                .find(|id| !active.contains(id) && !state.store.run_dir(id).exists())
                .expect("unbounded suffix search")
        } else {
            if active.contains(&base_id) {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "run_in_progress",
                    format!("run {base_id} is already in progress; pass force to start another"),
                ));
            }
            match state.store.run(&base_id) {
                Ok(existing) if existing.status == RunStatus::Complete => {
                    return Ok((StatusCode::OK, Json(existing)).into_response());
                }
                Ok(_) | Err(StoreError::NotFound { .. }) => base_id,
                Err(e) => return Err(e.into()),
            }
        };
        active.insert(id.clone());
        id
    };

    let record = RunRecord::new(&id, &card, req.policy_ids.clone(), gateway.provider_name());
    if let Err(e) = state.store.save_run(&record) {
        state.active.lock().expect("active runs lock").remove(&id);
        return Err(e.into());
    }
    tokio::spawn(execute_run(
        state.clone(),
        record.clone(),
        card,
        packages,
        gateway,
    ));
    Ok((StatusCode::ACCEPTED, Json(record)).into_response())
}

async fn execute_run(
    state: AppState,
    mut record: RunRecord,
    card: complyscan_core::model_card::ModelCard,
    packages: Vec<PolicyPackage>,
    gateway: Gateway,
) {
    let run = record.run_id.clone();
    let permit = state.slots.clone().acquire_owned().await;
    let store = state.store.clone();
    let config = state.config.clone();
    let result = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        record.advance(RunStatus::Running)?;
        store.save_run(&record)?;
        let outcome = evaluate_and_report(
            &card,
            &packages,
            &gateway,
            &config.engine,
            &config.aggregation,
        )
        .and_then(|evaluation| {
            write_evaluation(&evaluation, &store.run_dir(&record.run_id))?;
            Ok(evaluation)
        });
        match outcome {
            Ok(evaluation) => {
                record.timings.insert(
                    "evaluate".into(),
                    evaluation.evaluate_time.as_millis() as u64,
                );
                record
                    .timings
                    .insert("report".into(), evaluation.report_time.as_millis() as u64);
                for entry in evaluation.outcome.ledger.entries() {
                    record.timings.insert(
                        format!("scope:{}", entry.scope),
                        entry.wall_time.as_millis() as u64,
                    );
                }
                record.artifacts = artifact_names(&evaluation.report)
                    .into_iter()
                    .map(|name| (name.clone(), name))
                    .collect();
                record.advance(RunStatus::Complete)?;
            }
            Err(e) => {
                tracing::error!(run = %record.run_id, error = %e, "run failed");
                record.fail(e.to_string())?;
            }
        }
        store.save_run(&record)
    })
    .await;
    match result {
        Ok(Ok(())) => tracing::info!(%run, "run finished"),
        Ok(Err(e)) => tracing::error!(%run, error = %e, "could not persist run state"),
        Err(e) => {
            tracing::error!(%run, error = %e, "run task panicked");
            if let Ok(mut record) = state.store.run(&run) {
                if record.fail(format!("run task panicked: {e}")).is_ok() {
                    let _ = state.store.save_run(&record);
                }
            }
        }
    }
    state.active.lock().expect("active runs lock").remove(&run);
}

async fn list_runs(State(state): State<AppState>) -> Result<Response, ApiError> {
    Ok(Json(state.store.list_runs()?).into_response())
}

async fn get_run(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    Ok(Json(state.store.run(&id)?).into_response())
}

fn completed_run(state: &AppState, id: &str) -> Result<RunRecord, ApiError> {
    let record = state.store.run(id)?;
    if record.status != RunStatus::Complete {
        let mut err = ApiError::new(
            StatusCode::CONFLICT,
            "run_not_complete",
            format!("run {id} is {:?}", record.status).to_lowercase(),
        );
        err.details = record.error.map(|e| json!({ "run_error": e }));
        return Err(err);
    }
    Ok(record)
}

fn raw_json(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn load_report(state: &AppState, id: &str) -> Result<ComplianceReport, ApiError> {
    let text = state.store.read_run_artifact(id, "report.json")?;
    serde_json::from_str(&text).map_err(ApiError::internal)
}

async fn get_report(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    completed_run(&state, &id)?;
    Ok(raw_json(state.store.read_run_artifact(&id, "report.json")?))
}

async fn get_heatmap(
    State(state): State<AppState>,
    Path((id, policy_id)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let record = completed_run(&state, &id)?;
    if !record.policy_ids.contains(&policy_id) {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("policy `{policy_id}` is not part of run {id}"),
        ));
    }
    Ok(raw_json(state.store.read_run_artifact(
        &id,
        &format!("heatmaps/{policy_id}.json"),
    )?))
}

#[derive(Debug, Deserialize)]
struct IssuesQuery {
    policy: Option<String>,
}

async fn get_issues(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(query): Query<IssuesQuery>,
) -> Result<Response, ApiError> {
    completed_run(&state, &id)?;
    let report = load_report(&state, &id)?;
    let rows = match &query.policy {
        Some(policy) => filter_issues(&report, policy)
            .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string()))?,
        None => report.issue_fix_rows,
    };
    Ok(Json(rows).into_response())
}

#[derive(Debug, Serialize)]
struct LedgerRow {
    scope: String,
    request_count: u64,
    input_tokens: u64,
    output_tokens: u64,
    cache_hits: u64,
    failed_calls: u64,
    cost: String,
    wall_time_ms: Option<u64>,
}

async fn get_ledger(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let record = completed_run(&state, &id)?;
    let report = load_report(&state, &id)?;
    let ledger = &report.ledger;
    let rows: Vec<LedgerRow> = ledger
        .entries()
        .map(|e| LedgerRow {
            scope: e.scope.clone(),
            request_count: e.request_count,
            input_tokens: e.input_tokens,
            output_tokens: e.output_tokens,
            cache_hits: e.cache_hits,
            failed_calls: e.failed_calls,
            cost: display_cost(ledger.cost(&e.scope), 4).to_string(),
            wall_time_ms: record.timings.get(&format!("scope:{}", e.scope)).copied(),
        })
        .collect();
    let total = ledger.total();
    let phases: BTreeMap<&str, u64> = record
        .timings
        .iter()
        .filter(|(k, _)| !k.starts_with("scope:"))
        .map(|(k, v)| (k.as_str(), *v))
        .collect();
    Ok(Json(json!({
        "run_id": id,
        "rows": rows,
        "total": {
            "request_count": total.request_count,
            "input_tokens": total.input_tokens,
            "output_tokens": total.output_tokens,
            "cost": display_cost(ledger.total_cost(), 4).to_string(),
        },
        "phase_wall_time_ms": phases,
    }))
    .into_response())
}
