//! Versioned prompt templates.
//!
//! Every task prompt ends with a `<payload>` block holding the task as JSON,
//! so the request is machine-checkable (the mock provider and call logs read
//! it back) as well as readable by a hosted model.

use serde::{Deserialize, Serialize};

use crate::model_card::{ModelCard, SectionId};
use crate::policy::{render_markdown_table, PolicyDocument};

use super::{ExpectedFormat, ProviderRequest};

/// Bumped whenever any template below changes; stamped into run ids.
pub const PROMPT_VERSION: &str = "prompts-v1";

pub const VIOLATION_LABELS: [&str; 6] = [
    "No Violation",
    "Minor Ambiguity",
    "Ambiguous",
    "Possible Risk",
    "Probable Violation",
    "Clear Violation",
];

pub const RELEVANCE_LABELS: [&str; 6] = [
    "Not Needed",
    "Marginal Contribution",
    "Some Contribution",
    "Moderate Contribution",
    "High Contribution",
    "Essential Contribution",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueLine {
    pub policy_id: String,
    pub article: String,
    pub section: SectionId,
    pub score: u8,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskPayload {
    ViolationScoring {
        policy_id: String,
        section: SectionId,
        articles: Vec<String>,
    },
    RelevanceScoring {
        policy_id: String,
        section: SectionId,
        articles: Vec<String>,
    },
    ArticleClustering {
        policy_id: String,
        articles: Vec<String>,
        max_cluster: usize,
    },
    PolicyStructuring {
        policy_id: String,
        source: String,
    },
    Summary {
        level: String,
        scope: String,
        issues: Vec<IssueLine>,
    },
}

const PAYLOAD_OPEN: &str = "<payload>\n";
const PAYLOAD_CLOSE: &str = "\n</payload>";

fn with_payload(instructions: &str, payload: &TaskPayload) -> String {
    format!(
        "{instructions}\n\n{PAYLOAD_OPEN}{}{PAYLOAD_CLOSE}\n",
        serde_json::to_string(payload).expect("payload serializes")
    )
}

/// Recover the task from a prompt built by this module.
pub fn extract_payload(task_prompt: &str) -> Option<TaskPayload> {
    let start = task_prompt.find(PAYLOAD_OPEN)? + PAYLOAD_OPEN.len();
    let end = task_prompt[start..].find(PAYLOAD_CLOSE)? + start;
    serde_json::from_str(&task_prompt[start..end]).ok()
}

/// Text between `<tag>\n` and `</tag>`.
pub fn extract_block<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>\n");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = text[start..].find(&close)? + start;
    Some(&text[start..end])
}

fn card_block(card: &ModelCard) -> String {
    format!("<model_card>\n{}</model_card>\n", card.to_canonical())
}

fn policy_block(policy: &PolicyDocument) -> String {
    format!("<policy>\n{}</policy>\n", render_markdown_table(policy))
}

/// Shared context for every comparison of `card` against `policy`.
pub fn comparison_context(card: &ModelCard, policy: &PolicyDocument) -> String {
    format!("{}{}", card_block(card), policy_block(policy))
}

fn rubric(labels: &[&str; 6]) -> String {
    labels
        .iter()
        .enumerate()
        .map(|(score, label)| format!("{score} = {label}"))
        .collect::<Vec<_>>()
        .join("; ")
}

fn articles_list(articles: &[String]) -> String {
    articles
        .iter()
        .map(|a| format!("Article {a}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn violation_request(
    card: &ModelCard,
    policy: &PolicyDocument,
    section: SectionId,
    articles: &[String],
) -> ProviderRequest {
    let instructions = format!(
        "You are assessing AI-system documentation against {policy_name} ({policy_id}).\n\
         Compare the model card section \"{section}\" with each of: {list}.\n\
         Judge each article separately. Scale: {scale}.\n\
         Answer with a Markdown table `| Article | Evaluation |` containing one row per article, \
         where Evaluation is a JSON object {{\"score\": <integer 0-5>, \"description\": <text or null>}}. \
         A description is required for every score above 0.",
        policy_name = policy.full_name,
        policy_id = policy.policy_id,
        section = section.name(),
        list = articles_list(articles),
        scale = rubric(&VIOLATION_LABELS),
    );
    ProviderRequest {
        cached_context: comparison_context(card, policy),
        task_prompt: with_payload(
            &instructions,
            &TaskPayload::ViolationScoring {
                policy_id: policy.policy_id.clone(),
                section,
                articles: articles.to_vec(),
            },
        ),
        expected_format: ExpectedFormat::ScoreTable,
    }
}

pub fn relevance_request(
    card: &ModelCard,
    policy: &PolicyDocument,
    section: SectionId,
    articles: &[String],
) -> ProviderRequest {
    let instructions = format!(
        "Rate how much the model card section \"{section}\" contributes to assessing compliance \
         with each of: {list} of {policy_id}. Scale: {scale}.\n\
         Answer with a Markdown table `| Article | Evaluation |`, one row per article, where \
         Evaluation is {{\"score\": <integer 0-5>, \"description\": <short reason or null>}}.",
        section = section.name(),
        list = articles_list(articles),
        policy_id = policy.policy_id,
        scale = rubric(&RELEVANCE_LABELS),
    );
    ProviderRequest {
        cached_context: comparison_context(card, policy),
        task_prompt: with_payload(
            &instructions,
            &TaskPayload::RelevanceScoring {
                policy_id: policy.policy_id.clone(),
                section,
                articles: articles.to_vec(),
            },
        ),
        expected_format: ExpectedFormat::ScoreTable,
    }
}

pub fn clustering_request(policy: &PolicyDocument, max_cluster: usize) -> ProviderRequest {
    let instructions = format!(
        "Group the articles of {policy_id} into clusters of thematically related articles. \
         Every article must appear in exactly one cluster; keep document order inside a cluster; \
         use at most {max_cluster} articles per cluster.\n\
         Answer with JSON only: {{\"clusters\": [{{\"label\": <theme>, \"articles\": [<article numbers>]}}]}}.",
        policy_id = policy.policy_id,
    );
    ProviderRequest {
        cached_context: policy_block(policy),
        task_prompt: with_payload(
            &instructions,
            &TaskPayload::ArticleClustering {
                policy_id: policy.policy_id.clone(),
                articles: policy.article_numbers(),
                max_cluster,
            },
        ),
        expected_format: ExpectedFormat::Grouping,
    }
}

pub const STRUCTURING_INSTRUCTIONS: &str = "\
You convert legal text into a Markdown table with the columns `| Article | Paragraph | Content |`.\n\
One row per labeled paragraph, in source order. Article is the article or section number, \
optionally followed by ` — ` and the article title. Paragraph is the source label such as (1) or (a); \
use (1) when an article has no labels. Content is the paragraph text, verbatim, on one line, \
with `|` written as `\\|`. Do not summarize, omit or reorder text.\n";

pub fn structuring_request(policy_id: &str, source_chunk: &str) -> ProviderRequest {
    ProviderRequest {
        cached_context: STRUCTURING_INSTRUCTIONS.to_string(),
        task_prompt: with_payload(
            "Structure the source text given in the payload.",
            &TaskPayload::PolicyStructuring {
                policy_id: policy_id.to_string(),
                source: source_chunk.to_string(),
            },
        ),
        expected_format: ExpectedFormat::PolicyTable,
    }
}

pub fn summary_request(
    card: &ModelCard,
    level: &str,
    scope: &str,
    issues: &[IssueLine],
) -> ProviderRequest {
    let instructions = format!(
        "Write a concise compliance summary ({level}) for {scope}. Use only the issues listed in the \
         payload; do not invent scores or counts. Start with a short paragraph, then list concrete \
         recommended fixes as lines starting with `- `.",
    );
    ProviderRequest {
        cached_context: card_block(card),
        task_prompt: with_payload(
            &instructions,
            &TaskPayload::Summary {
                level: level.to_string(),
                scope: scope.to_string(),
                issues: issues.to_vec(),
            },
        ),
        expected_format: ExpectedFormat::SummaryText,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_round_trips_through_prompt() {
        let request = structuring_request("AIDA", "Article 1\nText with </payload-ish> bits");
        match extract_payload(&request.task_prompt).unwrap() {
            TaskPayload::PolicyStructuring { policy_id, source } => {
                assert_eq!(policy_id, "AIDA");
                assert!(source.contains("payload-ish"));
            }
            other => panic!("unexpected payload {other:?}"),
        }
    }

    #[test]
    fn blocks_are_extracted() {
        let text = "<model_card>\nabc\n</model_card>\n<policy>\nxyz\n</policy>\n";
        assert_eq!(extract_block(text, "model_card"), Some("abc\n"));
        assert_eq!(extract_block(text, "policy"), Some("xyz\n"));
        assert_eq!(extract_block(text, "other"), None);
    }
}
