//! Command-line verbs. Each one is a thin wrapper over a core operation and
//! prints a one-line JSON summary on success.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use complyscan_core::aggregation::{build_report, report_to_markdown};
use complyscan_core::config::{AppConfig, ProviderKind};
use complyscan_core::engine::{evaluate_run, write_outcome, ResultDataset};
use complyscan_core::exec::write_atomic;
use complyscan_core::metrics::{
    agreement_report, parse_ratings_csv, plot_data_csv, reports_to_markdown,
};
use complyscan_core::model_card::{parse_any, ModelCard};
use complyscan_core::policy::{
    load_package, render_markdown_table, save_package, structure_policy, PolicyDocument,
    PolicyMeta, PolicyPackage,
};
use complyscan_core::relevancy::score_relevance;
use serde_json::json;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "complyscan",
    version,
    about = "Evaluate a model card against several AI policies"
)]
pub struct Cli {
    /// TOML config with provider, rates and pipeline settings.
    #[arg(long, global = true, env = "COMPLYSCAN_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Structure a raw policy (text or HTML) into articles and paragraphs.
    IngestPolicy(IngestArgs),
    /// Score a structured policy against calibration cards and write its package.
    BuildRelevancy(RelevancyArgs),
    /// Evaluate a card against policy packages.
    Evaluate(EvaluateArgs),
    /// Build the report for an evaluated run directory.
    Report(ReportArgs),
    /// Agreement statistics between engine and expert ratings.
    Metrics(MetricsArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub name: String,
    #[arg(long)]
    pub jurisdiction: String,
    /// Structure with a provider instead of the offline heading rules.
    #[arg(long)]
    pub provider: Option<ProviderKind>,
    /// Output directory for `document.json` and `policy.md`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RelevancyArgs {
    /// Directory holding `document.json` from `ingest-policy`.
    #[arg(long)]
    pub policy: PathBuf,
    /// Calibration model cards (repeatable).
    #[arg(long = "card", required = true)]
    pub cards: Vec<PathBuf>,
    #[arg(long)]
    pub provider: Option<ProviderKind>,
    #[arg(long, default_value_t = 1)]
    pub version: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub card: PathBuf,
    /// Policy package directories (repeatable).
    #[arg(long = "policy", required = true)]
    pub policies: Vec<PathBuf>,
    #[arg(long)]
    pub provider: Option<ProviderKind>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory written by `evaluate`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub card: PathBuf,
    #[arg(long)]
    pub provider: Option<ProviderKind>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// CSV with header `item,rater,dimension,score`.
    #[arg(long)]
    pub ratings: PathBuf,
    #[arg(long, default_value = "engine")]
    pub engine_rater: String,
    /// Directory for `agreement.json`, `agreement.md` and `plot_data.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Artifact store root.
    #[arg(long, env = "COMPLYSCAN_STORE", default_value = "complyscan-store")]
    pub store: PathBuf,
}

pub fn load_config(path: Option<&Path>) -> Result<AppConfig, CliError> {
    match path {
        Some(p) => Ok(AppConfig::load(p)?),
        None => Ok(AppConfig::default()),
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::file(path, e))
}

fn write(path: &Path, body: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::file(parent, e))?;
    }
    write_atomic(path, body.as_bytes()).map_err(|e| CliError::file(path, e))
}

pub fn read_card(path: &Path) -> Result<ModelCard, CliError> {
    parse_any(&read(path)?).map_err(|e| CliError::input(path, e))
}

fn read_document(dir: &Path) -> Result<PolicyDocument, CliError> {
    let path = dir.join("document.json");
    PolicyDocument::from_json(&read(&path)?).map_err(|e| CliError::input(&path, e))
}

fn read_package(dir: &Path) -> Result<PolicyPackage, CliError> {
    load_package(dir).map_err(|e| CliError::input(dir, e))
}

/// Run a non-serve verb and return its JSON summary.
pub fn run_command(command: &Command, config: &AppConfig) -> Result<serde_json::Value, CliError> {
    let kind = |k: &Option<ProviderKind>| k.unwrap_or(config.provider.kind);
    match command {
        Command::IngestPolicy(a) => {
            let raw = read(&a.source)?;
            let meta = PolicyMeta {
                policy_id: a.id.clone(),
                full_name: a.name.clone(),
                jurisdiction: a.jurisdiction.clone(),
            };
            let gateway = a.provider.map(|k| config.gateway_for(k)).transpose()?;
            let doc = structure_policy(&raw, meta, gateway.as_ref())
                .map_err(|e| CliError::input(&a.source, e))?;
            write(&a.out.join("document.json"), &doc.to_json())?;
            write(&a.out.join("policy.md"), &render_markdown_table(&doc))?;
            Ok(json!({
                "policy_id": doc.policy_id,
                "articles": doc.articles.len(),
                "paragraphs": doc.articles.iter().map(|x| x.paragraphs.len()).sum::<usize>(),
                "out": a.out,
            }))
        }
        Command::BuildRelevancy(a) => {
            let doc = read_document(&a.policy)?;
            let cards = a
                .cards
                .iter()
                .map(|p| read_card(p))
                .collect::<Result<Vec<_>, _>>()?;
            let gateway = config.gateway_for(kind(&a.provider))?;
            let map = score_relevance(
                &cards,
                &doc,
                &gateway,
                config.relevancy,
                config.engine.max_batch,
                config.engine.batch_parallelism,
            )
            .map_err(|e| CliError::new("relevancy", e.to_string()))?;
            let package = PolicyPackage::new(doc, map, a.version)
                .map_err(|e| CliError::input(&a.policy, e))?;
            save_package(&package, &a.policy).map_err(|e| CliError::input(&a.policy, e))?;
            let m = &package.relevancy;
            Ok(json!({
                "policy_id": package.policy_id(),
                "pairs": m.total(),
                "kept": m.kept_count(),
                "skipped": m.skipped_count(),
                "flagged_for_review": m.flagged_count(),
                "unscored": m.unscored_count(),
                "reduction_percent": format!("{:.1}", m.reduction_percent()),
                "out": a.policy,
            }))
        }
        Command::Evaluate(a) => {
            let card = read_card(&a.card)?;
            let packages = a
                .policies
                .iter()
                .map(|p| read_package(p))
                .collect::<Result<Vec<_>, _>>()?;
            let gateway = config.gateway_for(kind(&a.provider))?;
            let outcome = evaluate_run(&card, &packages, &gateway, &config.engine)
                .map_err(|e| CliError::new("config", e.to_string()))?;
            write_outcome(&outcome, &a.out).map_err(|e| CliError::file(&a.out, e))?;
            let d = &outcome.dataset;
            Ok(json!({
                "run_id": d.run_id,
                "records": d.records.len(),
                "unscored": d.records.iter().filter(|r| !r.is_scored()).count(),
                "skipped": d.skipped.len(),
                "cost": complyscan_core::llm::display_cost(d.ledger.total_cost(), 4).to_string(),
                "wall_time_ms": outcome.wall_time.as_millis() as u64,
                "out": a.out,
            }))
        }
        Command::Report(a) => {
            let card = read_card(&a.card)?;
            let path = a.run.join("dataset.json");
            let dataset: ResultDataset =
                serde_json::from_str(&read(&path)?).map_err(|e| CliError::input(&path, e))?;
            dataset
                .check_coverage()
                .map_err(|e| CliError::input(&path, e))?;
            let gateway = config.gateway_for(kind(&a.provider))?;
            let report = build_report(
                &card,
                &dataset,
                Some(&gateway),
                &config.aggregation,
                dataset.policies.len().max(1),
            );
            write(&a.run.join("report.json"), &report.to_json())?;
            write(&a.run.join("report.md"), &report_to_markdown(&report))?;
            for h in &report.heatmaps {
                write(
                    &a.run.join("heatmaps").join(format!("{}.json", h.policy_id)),
                    &h.to_json(),
                )?;
            }
            Ok(json!({
                "run_id": report.run_id,
                "issues": report.all_issues().count(),
                "policies": report.policy_ids(),
                "out": a.run,
            }))
        }
        Command::Metrics(a) => {
            let matrices = parse_ratings_csv(&read(&a.ratings)?)
                .map_err(|e| CliError::input(&a.ratings, e))?;
            let reports = matrices
                .values()
                .map(|m| agreement_report(m, &a.engine_rater))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::input(&a.ratings, e))?;
            let markdown = reports_to_markdown(&reports);
            if let Some(out) = &a.out {
                let body = serde_json::to_string_pretty(&reports).expect("reports serialize");
                write(&out.join("agreement.json"), &body)?;
                write(&out.join("agreement.md"), &markdown)?;
                write(&out.join("plot_data.csv"), &plot_data_csv(&reports))?;
            }
            Ok(json!({
                "dimensions": reports.iter().map(|r| json!({
                    "dimension": r.dimension,
                    "items": r.items,
                    "spearman_rho": r.spearman.rho,
                    "ci": [r.spearman.ci_low, r.spearman.ci_high],
                    "ci_method": r.ci_method,
                    "mae": r.mae,
                    "within_one": r.within_one,
                    "icc_single": [r.icc_raters_only.single, r.icc_with_engine.single],
                    "icc_average": [r.icc_raters_only.average, r.icc_with_engine.average],
                })).collect::<Vec<_>>(),
                "out": a.out,
            }))
        }
        Command::Serve(_) => Err(CliError::new(
            "usage",
            "serve is handled by the binary entry point",
        )),
    }
}
