//! Golden-file and fixture checks over the bundled synthetic inputs.

use std::sync::Arc;

use complyscan_core::aggregation::{filter_issues, AggregationConfig};
use complyscan_core::config::AppConfig;
use complyscan_core::engine::{cluster_articles, EngineConfig};
use complyscan_core::llm::mock::MockProvider;
use complyscan_core::llm::{Gateway, Rates, RetryPolicy};
use complyscan_core::metrics::{agreement_report, parse_ratings_csv, Dimension};
use complyscan_core::model_card::{parse_model_card, ModelCard};
use complyscan_core::pipeline::{evaluate_and_report, ingest_policy};
use complyscan_core::policy::{render_markdown_table, structure_policy, PolicyMeta, PolicyPackage};
use serde::Deserialize;

const CROP_CARD: &str = include_str!("../fixtures/card_crop_health.txt");
const LOAN_CARD: &str = include_str!("../fixtures/card_loan_screening.txt");
const DAA: &str = include_str!("../fixtures/policy_daa.txt");
const ARS: &str = include_str!("../fixtures/policy_ars.html");

fn meta(id: &str, name: &str, jurisdiction: &str) -> PolicyMeta {
    PolicyMeta {
        policy_id: id.into(),
        full_name: name.into(),
        jurisdiction: jurisdiction.into(),
    }
}

fn mock_gateway() -> (Arc<MockProvider>, Gateway) {
    let mock = Arc::new(MockProvider::new());
    let gateway = Gateway::new(mock.clone(), Rates::default()).with_retry(RetryPolicy::no_delay());
    (mock, gateway)
}

fn cards() -> Vec<ModelCard> {
    vec![
        parse_model_card(CROP_CARD).unwrap(),
        parse_model_card(LOAN_CARD).unwrap(),
    ]
}

fn daa_meta() -> PolicyMeta {
    meta("DAA", "Digital Accountability Act", "Northland")
}

fn ars_meta() -> PolicyMeta {
    meta("ARS", "Automated Risk Standard", "Union of Examples")
}

#[test]
fn five_article_fixture_matches_label_golden() {
    let doc = structure_policy(DAA, daa_meta(), None).unwrap();
    assert_eq!(doc.articles.len(), 5);
    let got: Vec<String> = doc
        .articles
        .iter()
        .flat_map(|a| {
            a.paragraphs
                .iter()
                .map(move |p| format!("{} {}", a.number, p.label))
        })
        .collect();
    let golden: Vec<&str> = include_str!("../fixtures/policy_daa.labels")
        .lines()
        .collect();
    assert_eq!(got, golden);
}

#[test]
fn five_article_fixture_renders_golden_markdown() {
    let doc = structure_policy(DAA, daa_meta(), None).unwrap();
    assert_eq!(
        render_markdown_table(&doc),
        include_str!("../fixtures/policy_daa.md")
    );
}

#[test]
fn mock_structuring_agrees_with_rule_based_on_fixtures() {
    let (_, gateway) = mock_gateway();
    for (raw, m) in [(DAA, daa_meta()), (ARS, ars_meta())] {
        let offline = structure_policy(raw, m.clone(), None).unwrap();
        let via_mock = structure_policy(raw, m, Some(&gateway)).unwrap();
        assert_eq!(offline.articles, via_mock.articles);
    }
}

#[test]
fn html_fixture_keeps_article_numbers_and_entities() {
    let doc = structure_policy(ARS, ars_meta(), None).unwrap();
    assert_eq!(doc.article_numbers(), vec!["5", "6", "7", "8", "9", "10"]);
    let last = &doc.articles[5].paragraphs[0].content;
    assert!(last.contains("infringements & notify"), "{last}");
    assert!(!doc
        .articles
        .iter()
        .any(|a| a.full_text().contains("margin")));
}

#[derive(Deserialize, PartialEq, Debug)]
struct GoldenCluster {
    label: String,
    articles: Vec<String>,
}

#[test]
fn two_theme_fixture_clusters_match_golden() {
    let doc = structure_policy(
        include_str!("../fixtures/policy_themes.txt"),
        meta("THM", "Themes", "Nowhere"),
        None,
    )
    .unwrap();
    let (_, gateway) = mock_gateway();
    let (clusters, fallback) = cluster_articles(&doc, &gateway, "THM/clustering", 15);
    assert!(!fallback);
    let got: Vec<GoldenCluster> = clusters
        .into_iter()
        .map(|c| GoldenCluster {
            label: c.label,
            articles: c.articles,
        })
        .collect();
    let golden: Vec<GoldenCluster> =
        serde_json::from_str(include_str!("../fixtures/clusters_themes.json")).unwrap();
    assert_eq!(got, golden);
}

fn packages(gateway: &Gateway) -> Vec<PolicyPackage> {
    let config = AppConfig::default();
    let cards = cards();
    vec![
        ingest_policy(DAA, daa_meta(), Some(gateway), gateway, &cards, &config, 1).unwrap(),
        ingest_policy(ARS, ars_meta(), Some(gateway), gateway, &cards, &config, 1).unwrap(),
    ]
}

#[test]
fn risky_articles_top_the_priority_table() {
    let (_, gateway) = mock_gateway();
    let packages = packages(&gateway);
    let card = parse_model_card(CROP_CARD).unwrap();
    let eval = evaluate_and_report(
        &card,
        &packages,
        &gateway,
        &EngineConfig::default(),
        &AggregationConfig::default(),
    )
    .unwrap();
    let ars = eval
        .report
        .policy_summaries
        .iter()
        .find(|s| s.scope == "policy:ARS")
        .unwrap();
    let top: Vec<(&str, u8)> = ars
        .priorities
        .iter()
        .take(4)
        .map(|p| (p.article.as_str(), p.max_score))
        .collect();
    let mut articles: Vec<&str> = top.iter().map(|t| t.0).collect();
    articles.sort_unstable();
    assert_eq!(articles, vec!["6", "7", "8", "9"], "{top:?}");
    assert!(top.iter().all(|t| t.1 >= 4), "{top:?}");
    // Ordering is by max score first.
    assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));

    let only_ars = filter_issues(&eval.report, "ARS").unwrap();
    assert_eq!(only_ars.len(), eval.report.issue_fix_rows.len());
    assert!(only_ars
        .iter()
        .flat_map(|r| &r.issues)
        .all(|i| i.policy_id == "ARS"));
}

/// Reference values computed independently with scipy.stats.spearmanr and a
/// numpy mean-squares ICC on the same file.
#[test]
fn bundled_ratings_match_reference_values() {
    let matrices = parse_ratings_csv(include_str!("../fixtures/ratings.csv")).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let expected = [
        (
            Dimension::Violation,
            0.8882352941176469,
            0.6,
            0.95,
            0.8747492118085413,
            0.9544459501720005,
            0.8608109088271566,
            0.9611467676297304,
        ),
        (
            Dimension::Relevance,
            0.8920835273604053,
            0.5,
            1.0,
            0.8932584269662925,
            0.9616935483870969,
            0.8913721413721414,
            0.9704342905644362,
        ),
    ];
    for (dim, rho, mae, w1, h1, hk, e1, ek) in expected {
        let r = agreement_report(&matrices[&dim], "engine").unwrap();
        assert_eq!(r.items, 20);
        assert!(close(r.spearman.rho, rho), "{dim:?} rho {}", r.spearman.rho);
        assert!(close(r.mae, mae));
        assert!(close(r.within_one, w1));
        assert!(close(r.icc_raters_only.single, h1));
        assert!(close(r.icc_raters_only.average, hk));
        assert!(close(r.icc_with_engine.single, e1));
        assert!(close(r.icc_with_engine.average, ek));
    }
    // The violation file carries one engine score two below a consensus of 4.
    let v = agreement_report(&matrices[&Dimension::Violation], "engine").unwrap();
    assert_eq!(v.confusion.matrix[4][2], 1);
    assert_eq!(v.confusion.abs_error_histogram[2], 1);
}
