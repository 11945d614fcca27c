//! Relevance of model card sections to policy articles, aggregated across
//! calibration cards, and the skip filter derived from it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::map_bounded;
use crate::llm::{prompts, request_scores, Gateway};
use crate::model_card::{ModelCard, SectionId};
use crate::policy::PolicyDocument;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Cells whose mean is at or below this are skipped.
    pub skip_threshold: f64,
    /// Cells whose sample standard deviation reaches this are flagged.
    pub variance_threshold: f64,
}

impl Default for Thresholds {
    fn default() -> Thresholds {
        Thresholds {
            skip_threshold: 1.0,
            variance_threshold: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceCell {
    pub section: SectionId,
    pub article: String,
    /// One entry per calibration card; `None` where scoring failed.
    pub scores: Vec<Option<u8>>,
    pub mean: Option<f64>,
    /// Sample variance (n - 1 denominator); 0 for a single card.
    pub variance: Option<f64>,
    pub flagged_for_review: bool,
    pub skip: bool,
}

impl RelevanceCell {
    pub fn new(
        section: SectionId,
        article: impl Into<String>,
        scores: Vec<Option<u8>>,
        thresholds: &Thresholds,
    ) -> RelevanceCell {
        let complete: Option<Vec<u8>> = scores.iter().copied().collect();
        let stats = complete
            .filter(|s| !s.is_empty())
            .map(|s| mean_and_variance(&s));
        let (mean, variance) = match stats {
            Some((m, v)) => (Some(m), Some(v)),
            None => (None, None),
        };
        RelevanceCell {
            section,
            article: article.into(),
            flagged_for_review: variance.is_some_and(|v| v.sqrt() >= thresholds.variance_threshold),
            // Unscored cells stay in the run.
            skip: mean.is_some_and(|m| m <= thresholds.skip_threshold),
            scores,
            mean,
            variance,
        }
    }

    pub fn is_unscored(&self) -> bool {
        self.mean.is_none()
    }

    pub fn std_dev(&self) -> Option<f64> {
        self.variance.map(f64::sqrt)
    }
}

fn mean_and_variance(scores: &[u8]) -> (f64, f64) {
    let n = scores.len() as f64;
    let mean = scores.iter().map(|&s| f64::from(s)).sum::<f64>() / n;
    if scores.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = scores.iter().map(|&s| (f64::from(s) - mean).powi(2)).sum();
    (mean, ss / (n - 1.0))
}

#[derive(Debug, Error, PartialEq)]
pub enum RelevancyError {
    #[error("at least one calibration card is required")]
    NoCards,
    #[error("relevancy map does not cover the policy: {0}")]
    Coverage(String),
    #[error("score {score} for {section} / article {article} is outside 0-5")]
    OutOfRange {
        section: SectionId,
        article: String,
        score: u8,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevancyMap {
    pub policy_id: String,
    pub calibration_card_ids: Vec<String>,
    pub thresholds: Thresholds,
    /// Article-major in document order, sections in canonical order.
    cells: Vec<RelevanceCell>,
}

pub const RELEVANCY_CSV_HEADER: &str =
    "section,article,scores,mean,variance,flagged_for_review,skip";

impl RelevancyMap {
    /// Build a map over every (section, article) pair of `policy`. `scores`
    /// must hold one entry per calibration card for every pair.
    pub fn from_scores(
        policy: &PolicyDocument,
        calibration_card_ids: Vec<String>,
        thresholds: Thresholds,
        mut scores: BTreeMap<(SectionId, String), Vec<Option<u8>>>,
    ) -> Result<RelevancyMap, RelevancyError> {
        if calibration_card_ids.is_empty() {
            return Err(RelevancyError::NoCards);
        }
        let mut cells = Vec::with_capacity(policy.articles.len() * SectionId::COUNT);
        for article in &policy.articles {
            for section in SectionId::ALL {
                let key = (section, article.number.clone());
                let row = scores.remove(&key).ok_or_else(|| {
                    RelevancyError::Coverage(format!(
                        "no scores for {} / article {}",
                        section, article.number
                    ))
                })?;
                if row.len() != calibration_card_ids.len() {
                    return Err(RelevancyError::Coverage(format!(
                        "{} / article {} has {} score(s) for {} card(s)",
                        section,
                        article.number,
                        row.len(),
                        calibration_card_ids.len()
                    )));
                }
                if let Some(score) = row.iter().flatten().find(|&&s| s > 5) {
                    return Err(RelevancyError::OutOfRange {
                        section,
                        article: article.number.clone(),
                        score: *score,
                    });
                }
                cells.push(RelevanceCell::new(
                    section,
                    &article.number,
                    row,
                    &thresholds,
                ));
            }
        }
        if let Some(((section, article), _)) = scores.into_iter().next() {
            return Err(RelevancyError::Coverage(format!(
                "scores for {section} / article {article}, which is not in the policy"
            )));
        }
        Ok(RelevancyMap {
            policy_id: policy.policy_id.clone(),
            calibration_card_ids,
            thresholds,
            cells,
        })
    }

    /// Same scores, different thresholds.
    pub fn with_thresholds(&self, thresholds: Thresholds) -> RelevancyMap {
        RelevancyMap {
            policy_id: self.policy_id.clone(),
            calibration_card_ids: self.calibration_card_ids.clone(),
            thresholds,
            cells: self
                .cells
                .iter()
                .map(|c| RelevanceCell::new(c.section, &c.article, c.scores.clone(), &thresholds))
                .collect(),
        }
    }

    pub fn cells(&self) -> &[RelevanceCell] {
        &self.cells
    }

    pub fn cell(&self, section: SectionId, article: &str) -> Option<&RelevanceCell> {
        self.cells
            .iter()
            .find(|c| c.section == section && c.article == article)
    }

    /// Pairs to evaluate, in (article, section) order.
    pub fn kept_pairs(&self) -> Vec<(SectionId, String)> {
        self.cells
            .iter()
            .filter(|c| !c.skip)
            .map(|c| (c.section, c.article.clone()))
            .collect()
    }

    pub fn skipped_pairs(&self) -> Vec<(SectionId, String)> {
        self.cells
            .iter()
            .filter(|c| c.skip)
            .map(|c| (c.section, c.article.clone()))
            .collect()
    }

    pub fn total(&self) -> usize {
        self.cells.len()
    }

    pub fn kept_count(&self) -> usize {
        self.cells.iter().filter(|c| !c.skip).count()
    }

    pub fn skipped_count(&self) -> usize {
        self.total() - self.kept_count()
    }

    pub fn flagged_count(&self) -> usize {
        self.cells.iter().filter(|c| c.flagged_for_review).count()
    }

    pub fn unscored_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_unscored()).count()
    }

    /// skipped / total as a percentage.
    pub fn reduction_percent(&self) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        100.0 * self.skipped_count() as f64 / self.total() as f64
    }

    /// Check the map covers exactly sections x articles of `policy`, in order.
    pub fn check_coverage(&self, policy: &PolicyDocument) -> Result<(), RelevancyError> {
        if self.policy_id != policy.policy_id {
            return Err(RelevancyError::Coverage(format!(
                "map is for `{}`, policy is `{}`",
                self.policy_id, policy.policy_id
            )));
        }
        let expected = policy.articles.len() * SectionId::COUNT;
        if self.cells.len() != expected {
            return Err(RelevancyError::Coverage(format!(
                "{} cell(s) for {} expected",
                self.cells.len(),
                expected
            )));
        }
        let pairs = policy.articles.iter().flat_map(|a| {
            SectionId::ALL
                .into_iter()
                .map(move |s| (s, a.number.as_str()))
        });
        for (cell, (section, article)) in self.cells.iter().zip(pairs) {
            if cell.section != section || cell.article != article {
                return Err(RelevancyError::Coverage(format!(
                    "expected {section} / article {article}, found {} / article {}",
                    cell.section, cell.article
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        for cell in &self.cells {
            let scores = cell
                .scores
                .iter()
                .map(|s| s.map_or_else(|| "-".to_string(), |v| v.to_string()))
                .collect::<Vec<_>>()
                .join(";");
            let float = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
            writer
                .write_record([
                    cell.section.name().to_string(),
                    cell.article.clone(),
                    scores,
                    float(cell.mean),
                    float(cell.variance),
                    cell.flagged_for_review.to_string(),
                    cell.skip.to_string(),
                ])
                .expect("in-memory csv write");
        }
        let body = String::from_utf8(writer.into_inner().expect("csv flush")).expect("utf8 csv");
        format!("{RELEVANCY_CSV_HEADER}\n{body}")
    }

    /// Parse rows written by [`RelevancyMap::to_csv`]. Derived columns are
    /// recomputed from the scores and must agree with the file.
    pub fn from_csv(
        text: &str,
        policy: &PolicyDocument,
        calibration_card_ids: Vec<String>,
        thresholds: Thresholds,
    ) -> Result<RelevancyMap, RelevancyError> {
        let bad = |m: String| RelevancyError::Coverage(m);
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>().join(",") != RELEVANCY_CSV_HEADER {
            return Err(bad(format!(
                "unexpected header `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut scores = BTreeMap::new();
        let mut listed = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            let line = i + 2;
            let section = SectionId::from_name(&record[0])
                .ok_or_else(|| bad(format!("line {line}: unknown section `{}`", &record[0])))?;
            let row: Vec<Option<u8>> = record[2]
                .split(';')
                .map(|s| match s {
                    "-" => Ok(None),
                    v => v
                        .parse()
                        .map(Some)
                        .map_err(|_| bad(format!("line {line}: bad score `{v}`"))),
                })
                .collect::<Result<_, _>>()?;
            let key = (section, record[1].to_string());
            listed.push((key.clone(), record[5].to_string(), record[6].to_string()));
            if scores.insert(key, row).is_some() {
                return Err(bad(format!("line {line}: duplicate cell")));
            }
        }
        let map = RelevancyMap::from_scores(policy, calibration_card_ids, thresholds, scores)?;
        for ((section, article), flagged, skip) in listed {
            let cell = map
                .cell(section, &article)
                .expect("cell present after coverage check");
            if cell.flagged_for_review.to_string() != flagged || cell.skip.to_string() != skip {
                return Err(bad(format!(
                    "{section} / article {article}: stored flags disagree with scores"
                )));
            }
        }
        Ok(map)
    }
}

/// Score every (section, article) pair of `policy` against each calibration
/// card. Requests go per (card, section) with at most `max_batch` articles;
/// pairs whose request fails after retries are left unscored.
pub fn score_relevance(
    cards: &[ModelCard],
    policy: &PolicyDocument,
    gateway: &Gateway,
    thresholds: Thresholds,
    max_batch: usize,
    parallelism: usize,
) -> Result<RelevancyMap, RelevancyError> {
    if cards.is_empty() {
        return Err(RelevancyError::NoCards);
    }
    let scope = relevance_scope(&policy.policy_id);
    let articles = policy.article_numbers();
    let mut jobs = Vec::new();
    for (card_index, card) in cards.iter().enumerate() {
        for section in SectionId::ALL {
            for chunk in articles.chunks(max_batch.max(1)) {
                jobs.push((card_index, card, section, chunk.to_vec()));
            }
        }
    }
    let outcomes = map_bounded(jobs, parallelism, |(card_index, card, section, chunk)| {
        let request = prompts::relevance_request(card, policy, section, &chunk);
        let rows = request_scores(gateway, &scope, &request, &chunk);
        if let Err(err) = &rows {
            tracing::warn!(policy = %policy.policy_id, %section, %err, "relevance batch unscored");
        }
        (card_index, section, chunk, rows.ok())
    });
    let mut scores: BTreeMap<(SectionId, String), Vec<Option<u8>>> = BTreeMap::new();
    for article in &articles {
        for section in SectionId::ALL {
            scores.insert((section, article.clone()), vec![None; cards.len()]);
        }
    }
    for (card_index, section, chunk, rows) in outcomes {
        let Some(rows) = rows else { continue };
        for (article, row) in chunk.iter().zip(rows) {
            if let Some(slot) = scores.get_mut(&(section, article.clone())) {
                slot[card_index] = Some(row.score);
            }
        }
    }
    RelevancyMap::from_scores(
        policy,
        cards.iter().map(|c| c.card_id.clone()).collect(),
        thresholds,
        scores,
    )
}

/// Ledger scope for relevance scoring of `policy_id`.
pub fn relevance_scope(policy_id: &str) -> String {
    format!("{policy_id}/relevance")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::mock::{mock_relevance, MockProvider};
    use crate::llm::{Rates, RetryPolicy};
    use crate::policy::test_support::doc;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn cell(scores: &[u8]) -> RelevanceCell {
        RelevanceCell::new(
            SectionId::SystemName,
            "1",
            scores.iter().map(|&s| Some(s)).collect(),
            &Thresholds::default(),
        )
    }

    /// Sample standard deviation straight from the definition.
    fn oracle_std(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    #[test]
    fn all_zero_cell_is_skipped() {
        let c = cell(&[0, 0, 0]);
        assert_eq!(c.mean, Some(0.0));
        assert!(c.skip);
        assert!(!c.flagged_for_review);
    }

    #[test]
    fn high_cell_is_kept() {
        let c = cell(&[5, 4, 5]);
        assert!((c.mean.unwrap() - 14.0 / 3.0).abs() < 1e-12);
        assert_eq!(format!("{:.2}", c.mean.unwrap()), "4.67");
        assert!(!c.skip);
        assert!(!c.flagged_for_review);
    }

    #[test]
    fn disagreement_is_flagged() {
        let c = cell(&[0, 5, 1]);
        let std = c.std_dev().unwrap();
        assert!((std - oracle_std(&[0.0, 5.0, 1.0])).abs() < 1e-12);
        assert_eq!(format!("{std:.2}"), "2.65");
        assert!(c.flagged_for_review);
        assert!(!c.skip, "mean 2 is above the skip threshold");
    }

    #[test]
    fn unscored_cells_are_kept() {
        let c = RelevanceCell::new(
            SectionId::SystemName,
            "1",
            vec![Some(0), None],
            &Thresholds::default(),
        );
        assert!(c.is_unscored());
        assert!(!c.skip);
    }

    fn policy(n: usize) -> PolicyDocument {
        let numbers: Vec<String> = (1..=n).map(|i| i.to_string()).collect();
        let articles: Vec<(&str, &[&str])> = numbers
            .iter()
            .map(|n| (n.as_str(), &["Operators keep records."][..]))
            .collect();
        doc("P", &articles)
    }

    fn map_from(
        policy: &PolicyDocument,
        f: impl Fn(usize, SectionId) -> Vec<Option<u8>>,
    ) -> RelevancyMap {
        let mut scores = BTreeMap::new();
        for (i, article) in policy.articles.iter().enumerate() {
            for section in SectionId::ALL {
                scores.insert((section, article.number.clone()), f(i, section));
            }
        }
        let n = scores.values().next().map_or(1, Vec::len);
        RelevancyMap::from_scores(
            policy,
            (0..n).map(|i| format!("card{i}")).collect(),
            Thresholds::default(),
            scores,
        )
        .unwrap()
    }

    #[test]
    fn twenty_pair_fixture_keeps_eleven() {
        // One article: 23 pairs. The first 20 sections carry the fixture; the
        // remaining 3 are forced to skip and subtracted below.
        let p = policy(1);
        let map = map_from(&p, |_, section| {
            let i = section.index();
            let scores = if i >= 20 {
                [0, 0, 0]
            } else if i < 9 {
                // means 0, 1/3, 2/3, 1, ...: all at or below 1
                [
                    [0, 0, 0],
                    [0, 0, 1],
                    [1, 1, 0],
                    [1, 1, 1],
                    [2, 1, 0],
                    [0, 0, 3],
                    [3, 0, 0],
                    [1, 0, 2],
                    [0, 2, 0],
                ][i]
            } else {
                [
                    [2, 2, 2],
                    [1, 1, 2],
                    [5, 4, 5],
                    [0, 5, 1],
                    [3, 3, 3],
                    [1, 2, 1],
                    [4, 4, 4],
                    [2, 0, 2],
                    [5, 5, 5],
                    [0, 0, 4],
                    [1, 1, 3],
                ][i - 9]
            };
            scores.iter().map(|&s| Some(s)).collect()
        });
        let first20: Vec<_> = map
            .cells()
            .iter()
            .filter(|c| c.section.index() < 20)
            .collect();
        assert_eq!(first20.len(), 20);
        assert_eq!(first20.iter().filter(|c| c.mean.unwrap() <= 1.0).count(), 9);
        assert_eq!(first20.iter().filter(|c| !c.skip).count(), 11);
        assert_eq!(map.kept_count(), 11);
        assert_eq!(map.skipped_count(), 12);
        assert_eq!(map.total(), map.kept_count() + map.skipped_count());
    }

    #[test]
    fn all_zero_map_keeps_nothing() {
        let p = policy(3);
        let map = map_from(&p, |_, _| vec![Some(0), Some(1)]);
        assert!(map.kept_pairs().is_empty());
        assert_eq!(map.reduction_percent(), 100.0);
    }

    #[test]
    fn kept_pairs_are_article_major() {
        let p = policy(2);
        let map = map_from(&p, |_, s| {
            vec![Some(if s.index() % 2 == 0 { 3 } else { 0 })]
        });
        let kept = map.kept_pairs();
        assert_eq!(kept[0], (SectionId::SystemName, "1".to_string()));
        assert_eq!(kept[12], (SectionId::SystemName, "2".to_string()));
        assert!(kept.windows(2).all(|w| {
            let a = p.article_index(&w[0].1).unwrap();
            let b = p.article_index(&w[1].1).unwrap();
            (a, w[0].0) < (b, w[1].0)
        }));
    }

    #[test]
    fn csv_round_trip_and_coverage() {
        let p = policy(2);
        let map = map_from(&p, |i, s| {
            vec![
                Some((i + s.index()) as u8 % 6),
                None.filter(|_| i == 0).or(Some(2)),
            ]
        });
        let csv = map.to_csv();
        let back =
            RelevancyMap::from_csv(&csv, &p, map.calibration_card_ids.clone(), map.thresholds)
                .unwrap();
        assert_eq!(back, map);
        assert_eq!(back.to_csv(), csv);
        let truncated: String = csv.lines().take(30).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            RelevancyMap::from_csv(
                &truncated,
                &p,
                map.calibration_card_ids.clone(),
                map.thresholds
            ),
            Err(RelevancyError::Coverage(_))
        ));
        assert!(map.check_coverage(&policy(3)).is_err());
    }

    #[test]
    fn scoring_through_the_mock() {
        let p = doc(
            "P",
            &[
                (
                    "1",
                    &["Human oversight of automated decisions by trained operators."],
                ),
                ("2", &["Dataset provenance and collection documentation."]),
            ],
        );
        let card =
            crate::model_card::parse_model_card(include_str!("../fixtures/card_crop_health.txt"))
                .unwrap();
        let mock = Arc::new(MockProvider::new());
        let gateway = Gateway::new(mock.clone(), Rates::default());
        let map = score_relevance(
            std::slice::from_ref(&card),
            &p,
            &gateway,
            Thresholds::default(),
            15,
            4,
        )
        .unwrap();
        assert_eq!(map.total(), 46);
        for c in map.cells() {
            let article = p.article(&c.article).unwrap();
            assert_eq!(
                c.scores,
                vec![Some(mock_relevance(&card, c.section, article))]
            );
        }
        // One request per section; two articles fit one batch.
        assert_eq!(mock.calls().len(), 23);
        assert_eq!(
            gateway.ledger().entry("P/relevance").unwrap().request_count,
            23
        );
    }

    #[test]
    fn failed_batches_leave_cells_unscored() {
        let p = policy(2);
        let card =
            crate::model_card::parse_model_card(include_str!("../fixtures/card_crop_health.txt"))
                .unwrap();
        let mock = Arc::new(MockProvider::new().with_garbage_when(|task| {
            matches!(
                task,
                prompts::TaskPayload::RelevanceScoring {
                    section: SectionId::SystemName,
                    ..
                }
            )
        }));
        let gateway = Gateway::new(mock, Rates::default()).with_retry(RetryPolicy::no_delay());
        let map = score_relevance(&[card], &p, &gateway, Thresholds::default(), 15, 2).unwrap();
        assert_eq!(map.unscored_count(), 2);
        assert!(map.cell(SectionId::SystemName, "1").unwrap().is_unscored());
        assert!(map
            .kept_pairs()
            .contains(&(SectionId::SystemName, "2".to_string())));
    }

    proptest! {
        #[test]
        fn filter_soundness_and_monotonicity(
            raw in proptest::collection::vec(proptest::collection::vec(0u8..=5, 3), 46),
            t1 in 0.0f64..5.0,
            t2 in 0.0f64..5.0,
        ) {
            let p = policy(2);
            let map = map_from(&p, |i, s| raw[i * 23 + s.index()].iter().map(|&v| Some(v)).collect());
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let low = map.with_thresholds(Thresholds { skip_threshold: lo, ..Thresholds::default() });
            let high = map.with_thresholds(Thresholds { skip_threshold: hi, ..Thresholds::default() });
            prop_assert!(high.kept_count() <= low.kept_count());
            let kept = low.kept_pairs();
            for c in low.cells() {
                let absent = !kept.contains(&(c.section, c.article.clone()));
                prop_assert_eq!(absent, c.mean.unwrap() <= lo);
                if c.flagged_for_review && c.mean.unwrap() > lo {
                    prop_assert!(!absent);
                }
            }
            prop_assert_eq!(low.total() - low.kept_count(), low.skipped_count());
        }
    }
}
