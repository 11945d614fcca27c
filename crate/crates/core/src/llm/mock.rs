//! Deterministic offline provider.
//!
//! Responses are a pure function of the request text. The scoring rules are
//! keyword based:
//!
//! * keywords of a text are its lowercase alphanumeric words of five or more
//!   characters, minus a stopword list;
//! * relevance of a section to an article is the number of keywords shared by
//!   the section (name and content) and the article, capped at 5;
//! * violation is 0 when the section content shares no keyword with the
//!   article, otherwise `1 + risk` capped at 5, where `risk` counts the
//!   [`RISK_PHRASES`] found in the section content. An `N/A` section scores 2
//!   when its name shares a keyword with the article, else 0;
//! * article clusters group articles by their most frequent keyword.
//!
//! Latency and faults can be injected for tests; both leave the response
//! text untouched.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::digest::sha256_hex;
use crate::model_card::{parse_model_card, ModelCard, SectionId, NOT_APPLICABLE};
use crate::policy::{
    parse_rendered_document, render_table_rows, rule_based_extract, PolicyArticle, PolicyDocument,
};

use super::prompts::{
    extract_block, extract_payload, TaskPayload, RELEVANCE_LABELS, VIOLATION_LABELS,
};
use super::score_table::{render_score_table, ScoreRow};
use super::{
    estimate_tokens, Completion, ExpectedFormat, LlmProvider, ProviderError, ProviderRequest,
};

pub const RISK_PHRASES: [&str; 14] = [
    "without consent",
    "without notice",
    "scraped",
    "no human oversight",
    "not tested",
    "untested",
    "undisclosed",
    "indefinitely",
    "fully autonomous",
    "no opt-out",
    "biometric",
    "children",
    "sold to third parties",
    "no audit",
];

const STOPWORDS: [&str; 48] = [
    "about",
    "above",
    "after",
    "again",
    "against",
    "among",
    "apply",
    "applies",
    "article",
    "being",
    "below",
    "between",
    "could",
    "every",
    "including",
    "information",
    "means",
    "other",
    "paragraph",
    "person",
    "persons",
    "provided",
    "pursuant",
    "regard",
    "section",
    "shall",
    "should",
    "system",
    "systems",
    "their",
    "there",
    "these",
    "those",
    "through",
    "under",
    "where",
    "which",
    "while",
    "within",
    "without",
    "would",
    "accordance",
    "based",
    "following",
    "referred",
    "state",
    "states",
    "subject",
];

/// Lowercase words of five or more characters, minus stopwords.
pub fn keywords(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().count() >= 5)
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

fn article_text(article: &PolicyArticle) -> String {
    match &article.title {
        Some(title) => format!("{title} {}", article.full_text()),
        None => article.full_text(),
    }
}

pub fn risk_phrases_in(text: &str) -> Vec<&'static str> {
    let lower = text.to_lowercase();
    RISK_PHRASES
        .iter()
        .copied()
        .filter(|p| lower.contains(p))
        .collect()
}

/// Mock relevance of a section to an article.
pub fn mock_relevance(card: &ModelCard, section: SectionId, article: &PolicyArticle) -> u8 {
    let mut section_words = keywords(section.name());
    section_words.extend(keywords(card.section_content(section)));
    let shared = section_words
        .intersection(&keywords(&article_text(article)))
        .count();
    shared.min(5) as u8
}

/// Mock violation score and rationale.
pub fn mock_violation(
    card: &ModelCard,
    section: SectionId,
    article: &PolicyArticle,
) -> (u8, Option<String>) {
    let content = card.section_content(section);
    let article_words = keywords(&article_text(article));
    if content == NOT_APPLICABLE {
        let shared: Vec<String> = keywords(section.name())
            .intersection(&article_words)
            .cloned()
            .collect();
        if shared.is_empty() {
            return (0, None);
        }
        return (
            2,
            Some(format!(
                "{}: \"{}\" is marked N/A although Article {} concerns {}.",
                VIOLATION_LABELS[2],
                section.name(),
                article.number,
                shared.join(", ")
            )),
        );
    }
    let shared: Vec<String> = keywords(content)
        .intersection(&article_words)
        .cloned()
        .collect();
    if shared.is_empty() {
        return (0, None);
    }
    let risks = risk_phrases_in(content);
    let score = (1 + risks.len()).min(5) as u8;
    let note = if risks.is_empty() {
        "details needed to confirm compliance are incomplete".to_string()
    } else {
        format!("the documentation mentions {}", risks.join(", "))
    };
    let terms: Vec<&str> = shared.iter().take(3).map(String::as_str).collect();
    (
        score,
        Some(format!(
            "{}: \"{}\" and Article {} both address {}; {}.",
            VIOLATION_LABELS[score as usize],
            section.name(),
            article.number,
            terms.join(", "),
            note
        )),
    )
}

/// Mock clusters: articles grouped by their most frequent keyword, clusters in
/// order of first appearance, oversized clusters split in document order.
pub fn mock_clusters(policy: &PolicyDocument, max_cluster: usize) -> Vec<(String, Vec<String>)> {
    let mut clusters: Vec<(String, Vec<String>)> = Vec::new();
    for article in &policy.articles {
        let text = article_text(article);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for word in text.split(|c: char| !c.is_alphanumeric()) {
            let word = word.to_lowercase();
            if word.chars().count() >= 5 && !STOPWORDS.contains(&word.as_str()) {
                *counts.entry(word).or_default() += 1;
            }
        }
        // Highest count wins; BTreeMap order breaks ties alphabetically.
        let theme = counts
            .iter()
            .fold(None::<(&String, usize)>, |best, (w, &n)| match best {
                Some((_, m)) if m >= n => best,
                _ => Some((w, n)),
            })
            .map(|(w, _)| w.clone())
            .unwrap_or_else(|| "general".to_string());
        match clusters.iter_mut().find(|(label, _)| *label == theme) {
            Some((_, members)) => members.push(article.number.clone()),
            None => clusters.push((theme, vec![article.number.clone()])),
        }
    }
    let max_cluster = max_cluster.max(1);
    clusters
        .into_iter()
        .flat_map(|(label, members)| {
            members
                .chunks(max_cluster)
                .map(|chunk| (label.clone(), chunk.to_vec()))
                .collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRecord {
    pub format: ExpectedFormat,
    pub payload: Option<TaskPayload>,
}

impl CallRecord {
    /// `(policy_id, article, section)` triples requested by a violation-scoring call.
    pub fn violation_pairs(&self) -> Vec<(String, String, SectionId)> {
        match &self.payload {
            Some(TaskPayload::ViolationScoring {
                policy_id,
                section,
                articles,
            }) => articles
                .iter()
                .map(|a| (policy_id.clone(), a.clone(), *section))
                .collect(),
            _ => Vec::new(),
        }
    }
}

type Predicate = Arc<dyn Fn(&TaskPayload) -> bool + Send + Sync>;

#[derive(Clone)]
enum Fault {
    Garbage(Predicate),
    Unavailable(Predicate),
}

#[derive(Default)]
struct ParsedContext {
    card: Option<ModelCard>,
    policy: Option<PolicyDocument>,
}

#[derive(Default)]
pub struct MockProvider {
    latency: HashMap<ExpectedFormat, Duration>,
    faults: Vec<Fault>,
    transient_failures: AtomicU32,
    call_log: Mutex<Vec<CallRecord>>,
    contexts: Mutex<HashMap<String, Arc<ParsedContext>>>,
}

impl MockProvider {
    pub fn new() -> MockProvider {
        MockProvider::default()
    }

    /// Sleep this long on every request of `format`.
    pub fn with_latency(mut self, format: ExpectedFormat, latency: Duration) -> MockProvider {
        self.latency.insert(format, latency);
        self
    }

    /// Fail the next `count` calls with a timeout.
    pub fn with_transient_failures(self, count: u32) -> MockProvider {
        self.transient_failures.store(count, Ordering::SeqCst);
        self
    }

    /// Answer matching requests with unparseable text.
    pub fn with_garbage_when(
        mut self,
        predicate: impl Fn(&TaskPayload) -> bool + Send + Sync + 'static,
    ) -> MockProvider {
        self.faults.push(Fault::Garbage(Arc::new(predicate)));
        self
    }

    /// Fail matching requests with `Unavailable`.
    pub fn with_outage_when(
        mut self,
        predicate: impl Fn(&TaskPayload) -> bool + Send + Sync + 'static,
    ) -> MockProvider {
        self.faults.push(Fault::Unavailable(Arc::new(predicate)));
        self
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.call_log.lock().expect("call log poisoned").clone()
    }

    pub fn clear_calls(&self) {
        self.call_log.lock().expect("call log poisoned").clear();
    }

    fn parsed_context(&self, context: &str) -> Arc<ParsedContext> {
        let key = sha256_hex(context.as_bytes());
        if let Some(parsed) = self
            .contexts
            .lock()
            .expect("context memo poisoned")
            .get(&key)
        {
            return parsed.clone();
        }
        let parsed = Arc::new(ParsedContext {
            card: extract_block(context, "model_card").and_then(|t| parse_model_card(t).ok()),
            policy: extract_block(context, "policy").and_then(|t| parse_rendered_document(t).ok()),
        });
        self.contexts
            .lock()
            .expect("context memo poisoned")
            .insert(key, parsed.clone());
        parsed
    }

    fn respond(&self, request: &ProviderRequest, payload: &TaskPayload) -> String {
        let context = self.parsed_context(&request.cached_context);
        match payload {
            TaskPayload::ViolationScoring {
                section, articles, ..
            } => {
                let (Some(card), Some(policy)) = (&context.card, &context.policy) else {
                    return "I could not read the model card or policy.".into();
                };
                let rows: Vec<ScoreRow> = articles
                    .iter()
                    .filter_map(|number| policy.article(number))
                    .map(|article| {
                        let (score, description) = mock_violation(card, *section, article);
                        ScoreRow {
                            article: article.number.clone(),
                            score,
                            description,
                        }
                    })
                    .collect();
                render_score_table(&rows)
            }
            TaskPayload::RelevanceScoring {
                section, articles, ..
            } => {
                let (Some(card), Some(policy)) = (&context.card, &context.policy) else {
                    return "I could not read the model card or policy.".into();
                };
                let rows: Vec<ScoreRow> = articles
                    .iter()
                    .filter_map(|number| policy.article(number))
                    .map(|article| {
                        let score = mock_relevance(card, *section, article);
                        ScoreRow {
                            article: article.number.clone(),
                            score,
                            description: (score > 0)
                                .then(|| RELEVANCE_LABELS[score as usize].to_string()),
                        }
                    })
                    .collect();
                render_score_table(&rows)
            }
            TaskPayload::ArticleClustering { max_cluster, .. } => {
                let Some(policy) = &context.policy else {
                    return "I could not read the policy.".into();
                };
                let clusters: Vec<serde_json::Value> = mock_clusters(policy, *max_cluster)
                    .into_iter()
                    .map(|(label, articles)| serde_json::json!({"label": label, "articles": articles}))
                    .collect();
                serde_json::json!({ "clusters": clusters }).to_string()
            }
            TaskPayload::PolicyStructuring { source, .. } => match rule_based_extract(source) {
                Ok(articles) => render_table_rows(&articles),
                Err(_) => "No articles found in the source text.".into(),
            },
            TaskPayload::Summary {
                level,
                scope,
                issues,
            } => mock_summary(level, scope, issues),
        }
    }
}

fn mock_summary(level: &str, scope: &str, issues: &[super::prompts::IssueLine]) -> String {
    if issues.is_empty() {
        return format!("{level} summary for {scope}: no violations detected.\n");
    }
    let max = issues.iter().map(|i| i.score).max().unwrap_or(0);
    let articles: BTreeSet<(&str, &str)> = issues
        .iter()
        .map(|i| (i.policy_id.as_str(), i.article.as_str()))
        .collect();
    let mut out = format!(
        "{level} summary for {scope}: {} issue(s) across {} article(s); highest violation score {} ({}).\n",
        issues.len(),
        articles.len(),
        max,
        VIOLATION_LABELS[max as usize]
    );
    let mut seen = BTreeSet::new();
    for issue in issues {
        if seen.insert((issue.section, &issue.policy_id, &issue.article)) {
            out.push_str(&format!(
                "- Revise \"{}\" to address {} Article {}.\n",
                issue.section.name(),
                issue.policy_id,
                issue.article
            ));
        }
    }
    out
}

impl LlmProvider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &ProviderRequest) -> Result<Completion, ProviderError> {
        let payload = extract_payload(&request.task_prompt);
        self.call_log
            .lock()
            .expect("call log poisoned")
            .push(CallRecord {
                format: request.expected_format,
                payload: payload.clone(),
            });
        if let Some(latency) = self.latency.get(&request.expected_format) {
            thread::sleep(*latency);
        }
        if self
            .transient_failures
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
        {
            return Err(ProviderError::Timeout);
        }
        let text = match &payload {
            None => "Unrecognized task.".to_string(),
            Some(payload) => {
                let mut text = None;
                for fault in &self.faults {
                    match fault {
                        Fault::Garbage(when) if when(payload) => {
                            text = Some("Sorry, the table is not available.".to_string());
                        }
                        Fault::Unavailable(when) if when(payload) => {
                            return Err(ProviderError::Unavailable("injected outage".into()));
                        }
                        _ => {}
                    }
                }
                text.unwrap_or_else(|| self.respond(request, payload))
            }
        };
        Ok(Completion {
            input_tokens: estimate_tokens(&request.cached_context)
                + estimate_tokens(&request.task_prompt),
            output_tokens: estimate_tokens(&text),
            text,
        })
    }
}
