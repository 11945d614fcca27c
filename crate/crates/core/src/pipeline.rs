//! End-to-end helpers shared by the CLI, the service and the test suites.

use std::path::Path;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::aggregation::{build_report, report_to_markdown, AggregationConfig, ComplianceReport};
use crate::config::AppConfig;
use crate::engine::{evaluate_run, write_outcome, EngineConfig, EngineError, RunOutcome};
use crate::exec::write_atomic;
use crate::llm::Gateway;
use crate::model_card::ModelCard;
use crate::policy::{structure_policy, PackageError, PolicyError, PolicyMeta, PolicyPackage};
use crate::relevancy::{score_relevance, RelevancyError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Relevancy(#[from] RelevancyError),
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

/// Structure a raw policy and score its relevancy map against `cards`.
pub fn ingest_policy(
    raw: &str,
    meta: PolicyMeta,
    structuring: Option<&Gateway>,
    scoring: &Gateway,
    cards: &[ModelCard],
    config: &AppConfig,
    version: u64,
) -> Result<PolicyPackage, PipelineError> {
    let document = structure_policy(raw, meta, structuring)?;
    let map = score_relevance(
        cards,
        &document,
        scoring,
        config.relevancy,
        config.engine.max_batch,
        config.engine.batch_parallelism,
    )?;
    Ok(PolicyPackage::new(document, map, version)?)
}

pub struct Evaluation {
    pub outcome: RunOutcome,
    pub report: ComplianceReport,
    pub evaluate_time: Duration,
    pub report_time: Duration,
}

pub fn evaluate_and_report(
    card: &ModelCard,
    packages: &[PolicyPackage],
    gateway: &Gateway,
    engine: &EngineConfig,
    aggregation: &AggregationConfig,
) -> Result<Evaluation, PipelineError> {
    let started = Instant::now();
    let outcome = evaluate_run(card, packages, gateway, engine)?;
    let evaluate_time = started.elapsed();
    let started = Instant::now();
    let report = build_report(
        card,
        &outcome.dataset,
        Some(gateway),
        aggregation,
        packages.len().max(1),
    );
    Ok(Evaluation {
        outcome,
        report,
        evaluate_time,
        report_time: started.elapsed(),
    })
}

/// Same as [`evaluate_and_report`] with knobs taken from `config`.
pub fn evaluate_with_config(
    card: &ModelCard,
    packages: &[PolicyPackage],
    gateway: &Gateway,
    config: &AppConfig,
) -> Result<Evaluation, PipelineError> {
    evaluate_and_report(card, packages, gateway, &config.engine, &config.aggregation)
}

/// Artifact names written by [`write_evaluation`], relative to the run directory.
pub fn artifact_names(report: &ComplianceReport) -> Vec<String> {
    let mut names: Vec<String> = [
        "dataset.json",
        "records.csv",
        "skipped.csv",
        "ledger.csv",
        "report.json",
        "report.md",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend(
        report
            .policy_ids()
            .iter()
            .map(|p| format!("heatmaps/{p}.json")),
    );
    names
}

/// Write every deterministic artifact of an evaluation into `dir`.
pub fn write_evaluation(evaluation: &Evaluation, dir: &Path) -> Result<(), PipelineError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PipelineError::Io { path, source }
    };
    write_outcome(&evaluation.outcome, dir).map_err(io(dir))?;
    let report = &evaluation.report;
    let heatmaps = dir.join("heatmaps");
    std::fs::create_dir_all(&heatmaps).map_err(io(&heatmaps))?;
    let mut files = vec![
        (dir.join("report.json"), report.to_json()),
        (dir.join("report.md"), report_to_markdown(report)),
    ];
    for h in &report.heatmaps {
        files.push((heatmaps.join(format!("{}.json", h.policy_id)), h.to_json()));
    }
    for (path, body) in files {
        write_atomic(&path, body.as_bytes()).map_err(io(&path))?;
    }
    Ok(())
}
