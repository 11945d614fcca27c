//! Reports built from a result dataset: heatmaps, priority tables,
//! narratives and the section-wise issues/fixes table.
//!
//! Every number in a report is computed here from the dataset. The provider
//! only writes narrative prose and fix suggestions.

mod markdown;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EvaluationRecord, ResultDataset};
use crate::exec::map_bounded;
use crate::llm::prompts::{self, IssueLine};
use crate::llm::{Gateway, UsageLedger};
use crate::model_card::{ModelCard, SectionId};

pub use markdown::report_to_markdown;

pub const REPORT_SCHEMA: &str = "report-v1";
/// Ledger scope for narrative generation.
pub const SUMMARY_SCOPE: &str = "summary";
/// Most issue lines sent with one summary request.
const MAX_PROMPT_ISSUES: usize = 60;

/// Six ordinal bins from green (0) to red (5).
pub const SCORE_COLORS: [&str; 6] = [
    "#1a9850", "#91cf60", "#d9ef8b", "#fee08b", "#fc8d59", "#d73027",
];
pub const SKIPPED_COLOR: &str = "#bdbdbd";
pub const UNSCORED_COLOR: &str = "#ffffff";

pub const NO_EVALUABLE_PAIRS: &str =
    "No evaluable pairs: every comparison was skipped by the relevancy filter.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationConfig {
    /// Records scoring at least this become issues.
    pub issue_threshold: u8,
}

impl Default for AggregationConfig {
    fn default() -> AggregationConfig {
        AggregationConfig { issue_threshold: 2 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("policy `{0}` is not part of this run")]
    UnknownPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "score", rename_all = "snake_case")]
pub enum CellState {
    Score(u8),
    Skipped,
    Unscored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapCell {
    #[serde(flatten)]
    pub state: CellState,
    pub record_id: Option<String>,
    /// Rationale shown on hover; verbatim from the record.
    pub hover: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapMatrix {
    pub policy_id: String,
    pub rows: Vec<SectionId>,
    pub cols: Vec<String>,
    /// `cells[row][col]`.
    pub cells: Vec<Vec<HeatmapCell>>,
}

impl HeatmapMatrix {
    pub fn dimensions(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn cell(&self, section: SectionId, article: &str) -> Option<&HeatmapCell> {
        let col = self.cols.iter().position(|a| a == article)?;
        Some(&self.cells[section.index()][col])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("heatmap serializes")
    }
}

pub fn build_heatmap(
    dataset: &ResultDataset,
    policy_id: &str,
) -> Result<HeatmapMatrix, AggregationError> {
    let info = dataset
        .policy(policy_id)
        .ok_or_else(|| AggregationError::UnknownPolicy(policy_id.to_string()))?;
    let col_of: BTreeMap<&str, usize> = info
        .articles
        .iter()
        .enumerate()
        .map(|(i, a)| (a.as_str(), i))
        .collect();
    let blank = HeatmapCell {
        state: CellState::Skipped,
        record_id: None,
        hover: None,
    };
    let mut cells = vec![vec![blank; info.articles.len()]; SectionId::COUNT];
    for record in dataset.records_for(policy_id) {
        let col = col_of[record.pair.article.as_str()];
        cells[record.pair.section.index()][col] = HeatmapCell {
            state: record.score.map_or(CellState::Unscored, CellState::Score),
            record_id: Some(record.record_id.clone()),
            hover: record.description.clone().or_else(|| record.error.clone()),
        };
    }
    Ok(HeatmapMatrix {
        policy_id: policy_id.to_string(),
        rows: SectionId::ALL.to_vec(),
        cols: info.articles.clone(),
        cells,
    })
}

/// One record at or above the issue threshold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub record_id: String,
    pub policy_id: String,
    pub article: String,
    pub section: SectionId,
    pub score: u8,
    pub rationale: String,
}

/// One article in a priority table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticlePriority {
    pub policy_id: String,
    pub article: String,
    pub max_score: u8,
    /// Sections with an issue against this article.
    pub affected_pairs: usize,
    pub record_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NarrativeSource {
    Provider,
    /// Provider failed; tables are still complete.
    Placeholder,
    /// Nothing to summarize.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    /// `overall`, `policy:<id>` or `section:<name>`.
    pub scope: String,
    pub narrative: String,
    pub narrative_source: NarrativeSource,
    pub priorities: Vec<ArticlePriority>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fix {
    pub text: String,
    /// Policies the fix concerns.
    pub policy_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueFixRow {
    pub section: SectionId,
    pub original_content: String,
    pub issues: Vec<Issue>,
    pub fixes: Vec<Fix>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyStats {
    pub policy_id: String,
    pub full_name: String,
    pub articles: usize,
    pub evaluated_pairs: usize,
    pub skipped_pairs: usize,
    pub unscored_pairs: usize,
    pub issues: usize,
    pub max_score: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub schema: String,
    pub run_id: String,
    pub card_id: String,
    pub card_title: String,
    pub issue_threshold: u8,
    pub overall: Summary,
    pub policy_summaries: Vec<Summary>,
    pub policy_stats: Vec<PolicyStats>,
    pub issue_fix_rows: Vec<IssueFixRow>,
    pub heatmaps: Vec<HeatmapMatrix>,
    /// Evaluation plus narrative usage; wall time excluded.
    pub ledger: UsageLedger,
}

impl ComplianceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn heatmap(&self, policy_id: &str) -> Option<&HeatmapMatrix> {
        self.heatmaps.iter().find(|h| h.policy_id == policy_id)
    }

    pub fn policy_ids(&self) -> Vec<&str> {
        self.policy_stats
            .iter()
            .map(|p| p.policy_id.as_str())
            .collect()
    }

    pub fn all_issues(&self) -> impl Iterator<Item = &Issue> {
        self.issue_fix_rows.iter().flat_map(|r| r.issues.iter())
    }
}

fn as_issue(record: &EvaluationRecord, threshold: u8) -> Option<Issue> {
    let score = record.score?;
    (score >= threshold).then(|| Issue {
        record_id: record.record_id.clone(),
        policy_id: record.pair.policy_id.clone(),
        article: record.pair.article.clone(),
        section: record.pair.section,
        score,
        rationale: record.description.clone().unwrap_or_default(),
    })
}

/// Issues of `dataset`, in dataset order.
pub fn collect_issues(dataset: &ResultDataset, threshold: u8) -> Vec<Issue> {
    dataset
        .records
        .iter()
        .filter_map(|r| as_issue(r, threshold))
        .collect()
}

/// Per-article priority table sorted by (max score desc, affected pairs
/// desc, article order). Article order is policy order, then document order.
pub fn priority_table(dataset: &ResultDataset, issues: &[&Issue]) -> Vec<ArticlePriority> {
    let mut order: BTreeMap<(&str, &str), (usize, usize)> = BTreeMap::new();
    for (p, info) in dataset.policies.iter().enumerate() {
        for (a, article) in info.articles.iter().enumerate() {
            order.insert((info.policy_id.as_str(), article.as_str()), (p, a));
        }
    }
    let mut rows: BTreeMap<(usize, usize), ArticlePriority> = BTreeMap::new();
    for issue in issues {
        let key = order[&(issue.policy_id.as_str(), issue.article.as_str())];
        let row = rows.entry(key).or_insert_with(|| ArticlePriority {
            policy_id: issue.policy_id.clone(),
            article: issue.article.clone(),
            max_score: 0,
            affected_pairs: 0,
            record_ids: Vec::new(),
        });
        row.max_score = row.max_score.max(issue.score);
        row.affected_pairs += 1;
        row.record_ids.push(issue.record_id.clone());
    }
    let mut rows: Vec<((usize, usize), ArticlePriority)> = rows.into_iter().collect();
    rows.sort_by(|(ka, a), (kb, b)| {
        b.max_score
            .cmp(&a.max_score)
            .then(b.affected_pairs.cmp(&a.affected_pairs))
            .then(ka.cmp(kb))
    });
    rows.into_iter().map(|(_, r)| r).collect()
}

fn issue_lines(issues: &[&Issue]) -> Vec<IssueLine> {
    let mut sorted: Vec<&&Issue> = issues.iter().collect();
    sorted.sort_by_key(|i| std::cmp::Reverse(i.score));
    sorted
        .into_iter()
        .take(MAX_PROMPT_ISSUES)
        .map(|i| IssueLine {
            policy_id: i.policy_id.clone(),
            article: i.article.clone(),
            section: i.section,
            score: i.score,
            rationale: i.rationale.clone(),
        })
        .collect()
}

fn placeholder(scope: &str, err: &str) -> String {
    format!("Narrative unavailable for {scope} ({err}). The issue table below is complete.")
}

struct NarrativeJob<'a> {
    level: &'static str,
    scope: String,
    issues: Vec<&'a Issue>,
}

fn narrate(
    card: &ModelCard,
    gateway: Option<&Gateway>,
    job: &NarrativeJob<'_>,
) -> (String, NarrativeSource) {
    let Some(gateway) = gateway else {
        return (
            placeholder(&job.scope, "no provider configured"),
            NarrativeSource::Placeholder,
        );
    };
    let request = prompts::summary_request(card, job.level, &job.scope, &issue_lines(&job.issues));
    match gateway.complete(SUMMARY_SCOPE, &request) {
        Ok(c) if !c.text.trim().is_empty() => {
            (c.text.trim_end().to_string(), NarrativeSource::Provider)
        }
        Ok(_) => (
            placeholder(&job.scope, "empty provider answer"),
            NarrativeSource::Placeholder,
        ),
        Err(err) => (
            placeholder(&job.scope, &err.to_string()),
            NarrativeSource::Placeholder,
        ),
    }
}

fn template_fixes(section: SectionId, issues: &[&Issue]) -> Vec<Fix> {
    let mut seen = BTreeSet::new();
    issues
        .iter()
        .filter(|i| seen.insert((i.policy_id.clone(), i.article.clone())))
        .map(|i| Fix {
            text: format!(
                "Revise \"{}\" to address {} Article {}.",
                section.name(),
                i.policy_id,
                i.article
            ),
            policy_ids: vec![i.policy_id.clone()],
        })
        .collect()
}

/// Fix lines (`- ...`) of a provider narrative, tagged with the policies
/// they mention; untagged lines apply to every policy in `issues`.
fn provider_fixes(narrative: &str, issues: &[&Issue]) -> Vec<Fix> {
    let policies: BTreeSet<&str> = issues.iter().map(|i| i.policy_id.as_str()).collect();
    narrative
        .lines()
        .filter_map(|l| l.trim().strip_prefix("- "))
        .map(|text| {
            let mentioned: Vec<String> = policies
                .iter()
                .filter(|p| text.contains(*p))
                .map(|p| p.to_string())
                .collect();
            Fix {
                text: text.trim().to_string(),
                policy_ids: if mentioned.is_empty() {
                    policies.iter().map(|p| p.to_string()).collect()
                } else {
                    mentioned
                },
            }
        })
        .collect()
}

/// Build the full report. Narratives for the overall, per-policy and
/// per-section levels are requested concurrently; with no gateway, or when
/// a request fails, a placeholder narrative is used and the report still
/// ships.
pub fn build_report(
    card: &ModelCard,
    dataset: &ResultDataset,
    gateway: Option<&Gateway>,
    config: &AggregationConfig,
    parallelism: usize,
) -> ComplianceReport {
    let issues = collect_issues(dataset, config.issue_threshold);
    let all: Vec<&Issue> = issues.iter().collect();

    let mut jobs = vec![NarrativeJob {
        level: "overall",
        scope: "overall".into(),
        issues: all.clone(),
    }];
    for info in &dataset.policies {
        jobs.push(NarrativeJob {
            level: "policy-wise",
            scope: format!("policy:{}", info.policy_id),
            issues: all
                .iter()
                .copied()
                .filter(|i| i.policy_id == info.policy_id)
                .collect(),
        });
    }
    for section in SectionId::ALL {
        let section_issues: Vec<&Issue> = all
            .iter()
            .copied()
            .filter(|i| i.section == section)
            .collect();
        if !section_issues.is_empty() {
            jobs.push(NarrativeJob {
                level: "section-wise",
                scope: format!("section:{}", section.name()),
                issues: section_issues,
            });
        }
    }

    let no_records = dataset.records.is_empty();
    let narratives = map_bounded(jobs.iter().collect(), parallelism, |job| {
        if no_records {
            (NO_EVALUABLE_PAIRS.to_string(), NarrativeSource::Fixed)
        } else {
            narrate(card, gateway, job)
        }
    });

    let mut summaries: Vec<Summary> = Vec::new();
    let mut section_fixes: BTreeMap<SectionId, Vec<Fix>> = BTreeMap::new();
    for (job, (narrative, source)) in jobs.iter().zip(narratives) {
        if let Some(name) = job.scope.strip_prefix("section:") {
            let section = SectionId::from_name(name).expect("section scope");
            let fixes = match source {
                NarrativeSource::Provider => provider_fixes(&narrative, &job.issues),
                _ => Vec::new(),
            };
            let fixes = if fixes.is_empty() {
                template_fixes(section, &job.issues)
            } else {
                fixes
            };
            section_fixes.insert(section, fixes);
            continue;
        }
        summaries.push(Summary {
            scope: job.scope.clone(),
            narrative,
            narrative_source: source,
            priorities: priority_table(dataset, &job.issues),
        });
    }
    let overall = summaries.remove(0);

    let issue_fix_rows = SectionId::ALL
        .into_iter()
        .map(|section| IssueFixRow {
            section,
            original_content: card.section_content(section).to_string(),
            issues: issues
                .iter()
                .filter(|i| i.section == section)
                .cloned()
                .collect(),
            fixes: section_fixes.remove(&section).unwrap_or_default(),
        })
        .collect();

    let policy_stats = dataset
        .policies
        .iter()
        .map(|info| {
            let records: Vec<&EvaluationRecord> = dataset.records_for(&info.policy_id).collect();
            PolicyStats {
                policy_id: info.policy_id.clone(),
                full_name: info.full_name.clone(),
                articles: info.articles.len(),
                evaluated_pairs: records.len(),
                skipped_pairs: dataset
                    .skipped
                    .iter()
                    .filter(|p| p.policy_id == info.policy_id)
                    .count(),
                unscored_pairs: records.iter().filter(|r| !r.is_scored()).count(),
                issues: issues
                    .iter()
                    .filter(|i| i.policy_id == info.policy_id)
                    .count(),
                max_score: records.iter().filter_map(|r| r.score).max(),
            }
        })
        .collect();

    let heatmaps = dataset
        .policies
        .iter()
        .map(|p| build_heatmap(dataset, &p.policy_id).expect("policy from dataset"))
        .collect();

    let mut ledger = dataset.ledger.clone();
    if let Some(gateway) = gateway {
        ledger.merge(
            &gateway
                .ledger()
                .restricted_to([SUMMARY_SCOPE])
                .without_wall_time(),
        );
    }

    ComplianceReport {
        schema: REPORT_SCHEMA.into(),
        run_id: dataset.run_id.clone(),
        card_id: card.card_id.clone(),
        card_title: card.title.clone(),
        issue_threshold: config.issue_threshold,
        overall,
        policy_summaries: summaries,
        policy_stats,
        issue_fix_rows,
        heatmaps,
        ledger,
    }
}

/// Issues/fixes rows restricted to one policy. Rows without issues for it
/// are kept so the documentation column stays visible.
pub fn filter_issues(
    report: &ComplianceReport,
    policy_id: &str,
) -> Result<Vec<IssueFixRow>, AggregationError> {
    if !report.policy_ids().contains(&policy_id) {
        return Err(AggregationError::UnknownPolicy(policy_id.to_string()));
    }
    Ok(report
        .issue_fix_rows
        .iter()
        .map(|row| IssueFixRow {
            section: row.section,
            original_content: row.original_content.clone(),
            issues: row
                .issues
                .iter()
                .filter(|i| i.policy_id == policy_id)
                .cloned()
                .collect(),
            fixes: row
                .fixes
                .iter()
                .filter(|f| f.policy_ids.iter().any(|p| p == policy_id))
                .cloned()
                .collect(),
        })
        .collect())
}
