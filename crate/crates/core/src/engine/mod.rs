//! Pairwise violation scoring of one model card against policy packages.

mod plan;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::exec::{map_bounded, write_atomic};
use crate::llm::{prompts, request_scores, Gateway, UsageLedger};
use crate::model_card::{ModelCard, SectionId};
use crate::policy::PolicyPackage;

pub use plan::{
    cluster_articles, fallback_clusters, plan_batches, validate_clusters, Batch, Cluster,
};

/// Version of the result dataset layout; changes with the prompt templates.
pub const DATASET_SCHEMA: &str = "dataset-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Hard cap on comparison pairs per request.
    pub max_batch: usize,
    /// Preferred size when an oversized cluster is split.
    pub target_batch: usize,
    /// Concurrent batches per policy.
    pub batch_parallelism: usize,
    /// Ask the provider to cluster articles; otherwise use document order.
    pub cluster_with_provider: bool,
}

impl Default for EngineConfig {
    fn default() -> EngineConfig {
        EngineConfig {
            max_batch: 15,
            target_batch: 12,
            batch_parallelism: 4,
            cluster_with_provider: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComparisonPair {
    pub policy_id: String,
    pub article: String,
    pub section: SectionId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    /// `<policy>:<article>:<section number>`; unique within a run.
    pub record_id: String,
    pub pair: ComparisonPair,
    /// `None` when the batch could not be scored after retries.
    pub score: Option<u8>,
    pub description: Option<String>,
    pub run_id: String,
    pub batch_id: String,
    /// Why the pair is unscored.
    pub error: Option<String>,
}

impl EvaluationRecord {
    pub fn is_scored(&self) -> bool {
        self.score.is_some()
    }
}

pub fn record_id(pair: &ComparisonPair) -> String {
    format!(
        "{}:{}:{:02}",
        pair.policy_id,
        pair.article,
        pair.section.index() + 1
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyInfo {
    pub policy_id: String,
    pub full_name: String,
    pub jurisdiction: String,
    /// Article numbers in document order.
    pub articles: Vec<String>,
    pub clustering_fallback: bool,
    pub batch_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDataset {
    pub schema: String,
    pub run_id: String,
    pub card_id: String,
    pub prompt_version: String,
    pub provider: String,
    pub policies: Vec<PolicyInfo>,
    /// Sorted by (policy id, article document order, section order).
    pub records: Vec<EvaluationRecord>,
    /// Same order as `records`.
    pub skipped: Vec<ComparisonPair>,
    /// Token and request counts. Wall time is left at zero here so the
    /// dataset stays reproducible; timings live in [`RunOutcome`].
    pub ledger: UsageLedger,
}

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dataset: ResultDataset,
    /// Ledger including wall time per policy.
    pub ledger: UsageLedger,
    pub wall_time: Duration,
}

impl ResultDataset {
    pub fn policy(&self, policy_id: &str) -> Option<&PolicyInfo> {
        self.policies.iter().find(|p| p.policy_id == policy_id)
    }

    pub fn records_for<'a>(
        &'a self,
        policy_id: &'a str,
    ) -> impl Iterator<Item = &'a EvaluationRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| r.pair.policy_id == policy_id)
    }

    pub fn record(&self, record_id: &str) -> Option<&EvaluationRecord> {
        self.records.iter().find(|r| r.record_id == record_id)
    }

    /// Records and skipped pairs together cover sections x articles of every
    /// policy exactly once.
    pub fn check_coverage(&self) -> Result<(), String> {
        let mut seen = HashSet::new();
        let pairs = self
            .records
            .iter()
            .map(|r| &r.pair)
            .chain(self.skipped.iter());
        for pair in pairs {
            if !seen.insert(pair.clone()) {
                return Err(format!("pair {} evaluated twice", record_id(pair)));
            }
        }
        let expected: usize = self
            .policies
            .iter()
            .map(|p| p.articles.len() * SectionId::COUNT)
            .sum();
        if seen.len() != expected {
            return Err(format!(
                "{} pair(s) covered, {expected} expected",
                seen.len()
            ));
        }
        for policy in &self.policies {
            for article in &policy.articles {
                for section in SectionId::ALL {
                    let pair = ComparisonPair {
                        policy_id: policy.policy_id.clone(),
                        article: article.clone(),
                        section,
                    };
                    if !seen.contains(&pair) {
                        return Err(format!("pair {} missing", record_id(&pair)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }

    /// One row per record.
    pub fn records_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record([
                "record_id",
                "policy_id",
                "article",
                "section",
                "score",
                "description",
                "batch_id",
                "error",
            ])
            .expect("in-memory csv write");
        for r in &self.records {
            writer
                .write_record([
                    r.record_id.as_str(),
                    r.pair.policy_id.as_str(),
                    r.pair.article.as_str(),
                    r.pair.section.name(),
                    &r.score
                        .map_or_else(|| "unscored".to_string(), |s| s.to_string()),
                    r.description.as_deref().unwrap_or(""),
                    r.batch_id.as_str(),
                    r.error.as_deref().unwrap_or(""),
                ])
                .expect("in-memory csv write");
        }
        String::from_utf8(writer.into_inner().expect("csv flush")).expect("utf8 csv")
    }

    pub fn skipped_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(["policy_id", "article", "section"])
            .expect("in-memory csv write");
        for p in &self.skipped {
            writer
                .write_record([p.policy_id.as_str(), p.article.as_str(), p.section.name()])
                .expect("in-memory csv write");
        }
        String::from_utf8(writer.into_inner().expect("csv flush")).expect("utf8 csv")
    }
}

/// Write `dataset.json`, `records.csv`, `skipped.csv` and `ledger.csv`.
/// The ledger written is the dataset's, so the directory holds no wall times.
pub fn write_outcome(outcome: &RunOutcome, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let d = &outcome.dataset;
    write_atomic(&dir.join("dataset.json"), d.to_json().as_bytes())?;
    write_atomic(&dir.join("records.csv"), d.records_csv().as_bytes())?;
    write_atomic(&dir.join("skipped.csv"), d.skipped_csv().as_bytes())?;
    write_atomic(&dir.join("ledger.csv"), d.ledger.to_csv().as_bytes())
}

/// Content-derived run id: same card, packages, config, prompts and provider
/// give the same id.
pub fn run_id(
    card: &ModelCard,
    packages: &[PolicyPackage],
    config: &EngineConfig,
    provider: &str,
) -> String {
    let mut material = format!(
        "{DATASET_SCHEMA}\n{}\n{}\n{provider}\n{}\n",
        prompts::PROMPT_VERSION,
        card.digest(),
        serde_json::to_string(config).expect("config serializes"),
    );
    for package in packages {
        material.push_str(&format!(
            "{}:{}:{}:{}\n",
            package.document.policy_id,
            package.version,
            sha256_hex(package.document.to_json().as_bytes()),
            sha256_hex(package.relevancy.to_csv().as_bytes()),
        ));
    }
    format!("run-{}", &sha256_hex(material.as_bytes())[..16])
}

struct PolicyResult {
    info: PolicyInfo,
    records: Vec<EvaluationRecord>,
    skipped: Vec<ComparisonPair>,
}

fn evaluate_policy(
    card: &ModelCard,
    package: &PolicyPackage,
    gateway: &Gateway,
    config: &EngineConfig,
    run_id: &str,
) -> PolicyResult {
    let started = Instant::now();
    let policy = &package.document;
    let scope = policy.policy_id.as_str();
    let (clusters, fallback) = if config.cluster_with_provider {
        cluster_articles(policy, gateway, scope, config.max_batch)
    } else {
        (fallback_clusters(policy, config.max_batch), false)
    };
    let kept = package.relevancy.kept_pairs();
    let batches = plan_batches(
        scope,
        &kept,
        &clusters,
        config.max_batch,
        config.target_batch,
    );
    let batch_count = batches.len();
    let scored = map_bounded(batches, config.batch_parallelism, |batch| {
        let request = prompts::violation_request(card, policy, batch.section, &batch.articles);
        let rows = request_scores(gateway, scope, &request, &batch.articles);
        (batch, rows)
    });
    let mut records = Vec::with_capacity(kept.len());
    for (batch, rows) in scored {
        let pairs = batch.articles.iter().map(|article| ComparisonPair {
            policy_id: policy.policy_id.clone(),
            article: article.clone(),
            section: batch.section,
        });
        match rows {
            Ok(rows) => {
                for (pair, row) in pairs.zip(rows) {
                    records.push(EvaluationRecord {
                        record_id: record_id(&pair),
                        pair,
                        score: Some(row.score),
                        description: row.description,
                        run_id: run_id.to_string(),
                        batch_id: batch.batch_id.clone(),
                        error: None,
                    });
                }
            }
            Err(err) => {
                tracing::warn!(batch = %batch.batch_id, %err, "batch left unscored");
                for pair in pairs {
                    records.push(EvaluationRecord {
                        record_id: record_id(&pair),
                        pair,
                        score: None,
                        description: None,
                        run_id: run_id.to_string(),
                        batch_id: batch.batch_id.clone(),
                        error: Some(err.to_string()),
                    });
                }
            }
        }
    }
    let skipped = package
        .relevancy
        .skipped_pairs()
        .into_iter()
        .map(|(section, article)| ComparisonPair {
            policy_id: policy.policy_id.clone(),
            article,
            section,
        })
        .collect();
    gateway.add_wall_time(scope, started.elapsed());
    PolicyResult {
        info: PolicyInfo {
            policy_id: policy.policy_id.clone(),
            full_name: policy.full_name.clone(),
            jurisdiction: policy.jurisdiction.clone(),
            articles: policy.article_numbers(),
            clustering_fallback: fallback,
            batch_count,
        },
        records,
        skipped,
    }
}

/// Evaluate `card` against every package, one thread per policy.
///
/// The gateway's ledger should be fresh for the run: the dataset snapshot is
/// taken from it, restricted to the run's policies.
pub fn evaluate_run(
    card: &ModelCard,
    packages: &[PolicyPackage],
    gateway: &Gateway,
    config: &EngineConfig,
) -> Result<RunOutcome, EngineError> {
    if packages.is_empty() {
        return Err(EngineError::Config("no policy packages given".into()));
    }
    if config.max_batch == 0 || config.target_batch == 0 || config.batch_parallelism == 0 {
        return Err(EngineError::Config(
            "max_batch, target_batch and batch_parallelism must be positive".into(),
        ));
    }
    let mut ids = HashSet::new();
    for package in packages {
        if !ids.insert(package.policy_id()) {
            return Err(EngineError::Config(format!(
                "policy `{}` given twice",
                package.policy_id()
            )));
        }
        package
            .relevancy
            .check_coverage(&package.document)
            .map_err(|e| EngineError::Config(e.to_string()))?;
    }
    let started = Instant::now();
    let run_id = run_id(card, packages, config, gateway.provider_name());
    let results: Vec<PolicyResult> = thread::scope(|s| {
        let handles: Vec<_> = packages
            .iter()
            .map(|package| {
                let run_id = run_id.as_str();
                s.spawn(move || evaluate_policy(card, package, gateway, config, run_id))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("policy worker panicked"))
            .collect()
    });

    let mut policies = Vec::new();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut order: BTreeMap<(String, String), usize> = BTreeMap::new();
    for result in results {
        for (i, article) in result.info.articles.iter().enumerate() {
            order.insert((result.info.policy_id.clone(), article.clone()), i);
        }
        policies.push(result.info);
        records.extend(result.records);
        skipped.extend(result.skipped);
    }
    policies.sort_by(|a, b| a.policy_id.cmp(&b.policy_id));
    let key = |p: &ComparisonPair| {
        (
            p.policy_id.clone(),
            order[&(p.policy_id.clone(), p.article.clone())],
            p.section,
        )
    };
    records.sort_by_key(|r| key(&r.pair));
    skipped.sort_by_key(key);

    let ledger = gateway
        .ledger()
        .restricted_to(policies.iter().map(|p| p.policy_id.as_str()));
    let dataset = ResultDataset {
        schema: DATASET_SCHEMA.into(),
        run_id,
        card_id: card.card_id.clone(),
        prompt_version: prompts::PROMPT_VERSION.into(),
        provider: gateway.provider_name().into(),
        policies,
        records,
        skipped,
        ledger: ledger.without_wall_time(),
    };
    debug_assert_eq!(dataset.check_coverage(), Ok(()));
    Ok(RunOutcome {
        dataset,
        ledger,
        wall_time: started.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::mock::MockProvider;
    use crate::llm::{ExpectedFormat, Rates, RetryPolicy};
    use crate::model_card::parse_model_card;
    use crate::policy::test_support::doc;
    use crate::relevancy::{RelevancyMap, Thresholds};
    use std::sync::Arc;

    fn card() -> ModelCard {
        parse_model_card(include_str!("../../fixtures/card_crop_health.txt")).unwrap()
    }

    fn package(id: &str, articles: usize, score: impl Fn(usize, SectionId) -> u8) -> PolicyPackage {
        let numbers: Vec<String> = (1..=articles).map(|i| i.to_string()).collect();
        let specs: Vec<(&str, &[&str])> = numbers
            .iter()
            .map(|n| {
                (
                    n.as_str(),
                    &["Training datasets and human oversight of drone imagery."][..],
                )
            })
            .collect();
        let document = doc(id, &specs);
        let mut scores = BTreeMap::new();
        for (i, a) in document.articles.iter().enumerate() {
            for s in SectionId::ALL {
                scores.insert((s, a.number.clone()), vec![Some(score(i, s))]);
            }
        }
        let map =
            RelevancyMap::from_scores(&document, vec!["cal".into()], Thresholds::default(), scores)
                .unwrap();
        PolicyPackage::new(document, map, 1).unwrap()
    }

    fn run(packages: &[PolicyPackage], mock: Arc<MockProvider>) -> RunOutcome {
        let gateway = Gateway::new(mock, Rates::default()).with_retry(RetryPolicy::no_delay());
        evaluate_run(&card(), packages, &gateway, &EngineConfig::default()).unwrap()
    }

    #[test]
    fn skipped_pairs_never_reach_the_provider() {
        let p = package("P", 5, |i, s| if (i + s.index()) % 3 == 0 { 0 } else { 4 });
        let mock = Arc::new(MockProvider::new());
        let outcome = run(std::slice::from_ref(&p), mock.clone());
        let requested: Vec<_> = mock
            .calls()
            .iter()
            .flat_map(|c| c.violation_pairs())
            .collect();
        let kept: Vec<_> = p.relevancy.kept_pairs();
        assert_eq!(requested.len(), kept.len());
        let requested: HashSet<_> = requested.into_iter().map(|(_, a, s)| (s, a)).collect();
        assert_eq!(requested, kept.into_iter().collect::<HashSet<_>>());
        assert_eq!(outcome.dataset.check_coverage(), Ok(()));
        assert_eq!(
            outcome.dataset.records.len() + outcome.dataset.skipped.len(),
            5 * 23
        );
    }

    #[test]
    fn all_skip_map_yields_no_records() {
        let p = package("P", 3, |_, _| 0);
        let mock = Arc::new(MockProvider::new());
        let outcome = run(&[p], mock.clone());
        assert!(outcome.dataset.records.is_empty());
        assert_eq!(outcome.dataset.skipped.len(), 69);
        assert!(mock
            .calls()
            .iter()
            .all(|c| c.format != ExpectedFormat::ScoreTable));
    }

    #[test]
    fn malformed_batches_are_unscored_not_zero() {
        let p = package("P", 4, |_, _| 3);
        let mock = Arc::new(MockProvider::new().with_garbage_when(|t| {
            matches!(
                t,
                prompts::TaskPayload::ViolationScoring {
                    section: SectionId::HumanOversight,
                    ..
                }
            )
        }));
        let outcome = run(&[p], mock.clone());
        let unscored: Vec<_> = outcome
            .dataset
            .records
            .iter()
            .filter(|r| !r.is_scored())
            .collect();
        assert_eq!(unscored.len(), 4);
        assert!(unscored
            .iter()
            .all(|r| r.pair.section == SectionId::HumanOversight && r.error.is_some()));
        let oversight_calls = mock
            .calls()
            .iter()
            .filter(|c| {
                c.violation_pairs()
                    .iter()
                    .any(|(_, _, s)| *s == SectionId::HumanOversight)
            })
            .count();
        assert_eq!(oversight_calls, 3);
    }

    #[test]
    fn rationale_rule_and_ordering() {
        let packages = [package("B", 3, |_, _| 4), package("A", 2, |_, _| 4)];
        let outcome = run(&packages, Arc::new(MockProvider::new()));
        let d = &outcome.dataset;
        assert!(d
            .records
            .iter()
            .all(|r| r.score.unwrap() == 0 || r.description.is_some()));
        assert_eq!(d.records[0].pair.policy_id, "A");
        assert_eq!(d.policies[0].policy_id, "A");
        assert!(d.records.windows(2).all(|w| {
            let k = |r: &EvaluationRecord| {
                (
                    r.pair.policy_id.clone(),
                    r.pair.article.parse::<u32>().unwrap(),
                    r.pair.section,
                )
            };
            k(&w[0]) < k(&w[1])
        }));
        assert!(d.ledger.entry("A").unwrap().request_count > 0);
        assert_eq!(d.ledger.entry("A").unwrap().wall_time, Duration::ZERO);
    }

    #[test]
    fn repeated_runs_are_identical() {
        let packages = [package("A", 6, |i, s| ((i * 7 + s.index()) % 6) as u8)];
        let a = run(&packages, Arc::new(MockProvider::new()));
        let b = run(&packages, Arc::new(MockProvider::new()));
        assert_eq!(a.dataset.to_json(), b.dataset.to_json());
        assert_eq!(a.dataset.records_csv(), b.dataset.records_csv());
    }

    #[test]
    fn duplicate_policies_are_a_config_error() {
        let p = package("A", 1, |_, _| 0);
        let gateway = Gateway::new(Arc::new(MockProvider::new()), Rates::default());
        assert!(matches!(
            evaluate_run(&card(), &[p.clone(), p], &gateway, &EngineConfig::default()),
            Err(EngineError::Config(_))
        ));
    }
}
