//! HTTP service behavior against a temp store with the mock provider.

use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use complyscan::service::{router, AppState};
use complyscan_core::config::AppConfig;
use complyscan_core::model_card::parse_model_card;
use complyscan_core::store::{ArtifactStore, RunRecord, RunStatus};
use serde_json::{json, Value};
use tower::ServiceExt;

const CROP: &str = include_str!("../../core/fixtures/card_crop_health.txt");
const LOAN: &str = include_str!("../../core/fixtures/card_loan_screening.txt");
const DAA: &str = include_str!("../../core/fixtures/policy_daa.txt");
const ARS: &str = include_str!("../../core/fixtures/policy_ars.html");

fn app(root: &std::path::Path) -> Router {
    let store = ArtifactStore::open(root).unwrap();
    router(AppState::new(store, AppConfig::default()).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut builder = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            builder = builder.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let response = app
        .clone()
        .oneshot(builder.body(body).unwrap())
        .await
        .unwrap();
    let status = response.status();
    let bytes = axum::body::to_bytes(response.into_body(), usize::MAX)
        .await
        .unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn post_raw(app: &Router, uri: &str, body: &str) -> (StatusCode, Value) {
    let request = Request::builder()
        .method("POST")
        .uri(uri)
        .header(header::CONTENT_TYPE, "text/plain")
        .body(Body::from(body.to_string()))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = axum::body::to_bytes(response.into_body(), usize::MAX)
        .await
        .unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn seed(app: &Router) {
    for card in [CROP, LOAN] {
        let (status, body) = post_raw(app, "/cards", card).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
    }
    for (id, name, source) in [
        ("DAA", "Digital Accountability Act", DAA),
        ("ARS", "Automated Risk Standard", ARS),
    ] {
        let (status, body) = call(
            app,
            "POST",
            "/policies",
            Some(json!({
                "policy_id": id,
                "full_name": name,
                "jurisdiction": "Testland",
                "source": source,
                "calibration_card_ids": ["crop-health-monitor", "loan-screening-assistant"],
            })),
        )
        .await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        assert_eq!(body["policy"]["policy_id"], id);
    }
}

async fn wait_terminal(app: &Router, run_id: &str) -> Value {
    for _ in 0..200 {
        let (status, body) = call(app, "GET", &format!("/runs/{run_id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        if body["status"] == "complete" || body["status"] == "failed" {
            return body;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("run {run_id} did not finish");
}

fn run_body() -> Value {
    json!({ "card_id": "crop-health-monitor", "policy_ids": ["DAA", "ARS"], "provider": "mock" })
}

#[tokio::test]
async fn healthz_answers() {
    let dir = tempfile::tempdir().unwrap();
    let (status, body) = call(&app(dir.path()), "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn mock_run_produces_report_heatmaps_issues_and_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    seed(&app).await;

    let (status, run) = call(&app, "POST", "/runs", Some(run_body())).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{run}");
    let run_id = run["run_id"].as_str().unwrap().to_string();
    let done = wait_terminal(&app, &run_id).await;
    assert_eq!(done["status"], "complete", "{done}");

    let (status, report) = call(&app, "GET", &format!("/runs/{run_id}/report"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["run_id"], run_id);

    for (policy, articles) in [("DAA", 5), ("ARS", 6)] {
        let (status, heatmap) = call(
            &app,
            "GET",
            &format!("/runs/{run_id}/heatmap/{policy}"),
            None,
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{heatmap}");
        assert_eq!(heatmap["policy_id"], policy);
        assert_eq!(heatmap["cols"].as_array().unwrap().len(), articles);
        assert_eq!(heatmap["rows"].as_array().unwrap().len(), 23);
    }

    let (status, rows) = call(
        &app,
        "GET",
        &format!("/runs/{run_id}/issues?policy=ARS"),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let issues: Vec<&Value> = rows
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r["issues"].as_array().unwrap())
        .collect();
    assert!(!issues.is_empty());
    assert!(issues.iter().all(|i| i["policy_id"] == "ARS"));

    let (status, ledger) = call(&app, "GET", &format!("/runs/{run_id}/ledger"), None).await;
    assert_eq!(status, StatusCode::OK);
    let cost = ledger["total"]["cost"].as_str().unwrap();
    assert_eq!(cost.split('.').nth(1).map(str::len), Some(4), "{cost}");
    assert!(ledger["rows"]
        .as_array()
        .unwrap()
        .iter()
        .any(|r| r["wall_time_ms"].is_u64()));

    // Same inputs again: the completed run is returned as is.
    let (status, again) = call(&app, "POST", "/runs", Some(run_body())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again["run_id"], run_id);

    // Forcing starts a separate run.
    let mut forced = run_body();
    forced["force"] = json!(true);
    let (status, other) = call(&app, "POST", "/runs", Some(forced)).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_ne!(other["run_id"], run_id);
    wait_terminal(&app, other["run_id"].as_str().unwrap()).await;
}

#[tokio::test]
async fn unknown_ids_are_404_and_bad_json_is_400() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    seed(&app).await;

    let body = json!({ "card_id": "crop-health-monitor", "policy_ids": ["NOPE"] });
    let (status, err) = call(&app, "POST", "/runs", Some(body)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error"]["code"], "not_found");

    let body = json!({ "card_id": "missing", "policy_ids": ["DAA"] });
    assert_eq!(
        call(&app, "POST", "/runs", Some(body)).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        call(&app, "GET", "/runs/run-0000000000000000", None)
            .await
            .0,
        StatusCode::NOT_FOUND
    );

    let request = Request::builder()
        .method("POST")
        .uri("/runs")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(
        app.clone().oneshot(request).await.unwrap().status(),
        StatusCode::BAD_REQUEST
    );

    let (status, err) = post_raw(&app, "/cards", "card_id: x\n").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{err}");
}

#[tokio::test]
async fn live_provider_without_credentials_is_503() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::open(dir.path()).unwrap();
    let mut config = AppConfig::default();
    config.provider.credentials_env = "COMPLYSCAN_TEST_UNSET_CREDENTIALS".into();
    let app = router(AppState::new(store, config).unwrap());
    seed(&app).await;
    let mut body = run_body();
    body["provider"] = json!("live");
    let (status, err) = call(&app, "POST", "/runs", Some(body)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{err}");
}

#[tokio::test]
async fn pending_run_conflicts_and_restart_marks_it_failed() {
    let dir = tempfile::tempdir().unwrap();
    {
        let app = app(dir.path());
        seed(&app).await;
    }
    // Leave a pending record behind as if the process died mid-run.
    let store = ArtifactStore::open(dir.path()).unwrap();
    let card = parse_model_card(CROP).unwrap();
    let record = RunRecord::new("run-stale", &card, vec!["DAA".into()], "mock");
    store.save_run(&record).unwrap();

    let app = app(dir.path());
    let (status, body) = call(&app, "GET", "/runs/run-stale", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "failed");
    assert_eq!(store.run("run-stale").unwrap().status, RunStatus::Failed);

    let (status, err) = call(&app, "GET", "/runs/run-stale/report", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"]["code"], "run_not_complete");

    // A submitted run that has not finished yet conflicts with a resubmit.
    let (status, first) = call(&app, "POST", "/runs", Some(run_body())).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let (status, second) = call(&app, "POST", "/runs", Some(run_body())).await;
    if status == StatusCode::CONFLICT {
        assert_eq!(second["error"]["code"], "run_in_progress");
    } else {
        // The first run already completed; the existing record comes back.
        assert_eq!(status, StatusCode::OK);
        assert_eq!(second["run_id"], first["run_id"]);
    }
    let run_id = first["run_id"].as_str().unwrap();
    assert_eq!(wait_terminal(&app, run_id).await["status"], "complete");

    // Completed runs survive a restart.
    let restarted = self::app(dir.path());
    let (status, body) = call(&restarted, "GET", &format!("/runs/{run_id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "complete");
    assert_eq!(
        call(&restarted, "GET", &format!("/runs/{run_id}/report"), None)
            .await
            .0,
        StatusCode::OK
    );
}
