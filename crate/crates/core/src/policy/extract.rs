//! Turning raw policy sources into [`PolicyDocument`]s.
//!
//! With a provider, the source is cut into chunks at article headings and each
//! chunk is sent for table extraction concurrently. Without one, the
//! rule-based parser below does the same job from heading and label patterns.

use std::collections::HashMap;
use std::sync::OnceLock;
use std::thread;

use regex::Regex;

use crate::digest::sha256_hex;
use crate::llm::{prompts, Gateway};

use super::markdown::{parse_policy_table, rows_to_articles};
use super::{PolicyArticle, PolicyDocument, PolicyError, PolicyMeta, PolicyParagraph};

/// Provider attempts per chunk on unparseable or lossy output.
pub const EXTRACTION_ATTEMPTS: u32 = 3;
/// Soft upper bound on chunk size; chunks only break at article headings.
pub const CHUNK_CHARS: usize = 12_000;

fn heading_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^\s*(?:#+\s*)?(?:article|art\.|section|sec\.|§+)\s*([0-9]+[0-9a-z]*(?:\.[0-9a-z]+)*)\s*(?:[-–—:.]\s*(.*?))?\s*$",
        )
        .expect("heading regex")
    })
}

fn label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(?:\((\d+)\)|\(([a-z]{1,4})\)|(\d+)\.)(?:\s+(.*)|$)").expect("label regex")
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LabelStyle {
    Parenthesized,
    Lettered,
    Dotted,
}

fn parse_label(line: &str) -> Option<(LabelStyle, String, String)> {
    let caps = label_re().captures(line)?;
    let rest = caps
        .get(4)
        .map(|m| m.as_str().trim().to_string())
        .unwrap_or_default();
    if let Some(n) = caps.get(1) {
        return Some((LabelStyle::Parenthesized, format!("({})", n.as_str()), rest));
    }
    if let Some(l) = caps.get(2) {
        return Some((LabelStyle::Lettered, format!("({})", l.as_str()), rest));
    }
    let n = caps.get(3)?;
    Some((LabelStyle::Dotted, format!("{}.", n.as_str()), rest))
}

fn parse_heading(line: &str) -> Option<(String, Option<String>)> {
    let caps = heading_re().captures(line)?;
    let number = caps.get(1)?.as_str().to_string();
    let title = caps
        .get(2)
        .map(|m| m.as_str().trim().to_string())
        .filter(|t| !t.is_empty());
    Some((number, title))
}

fn looks_like_html(text: &str) -> bool {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)<(?:html|body|p|div|h[1-6]|br|section|article|li|span|table|td)\b")
            .expect("html regex")
    })
    .is_match(text)
}

/// Strip markup, keeping block boundaries as line breaks.
pub fn html_to_text(html: &str) -> String {
    static DROP: OnceLock<Regex> = OnceLock::new();
    static BLOCK: OnceLock<Regex> = OnceLock::new();
    static TAG: OnceLock<Regex> = OnceLock::new();
    let drop = DROP.get_or_init(|| {
        Regex::new(r"(?is)<script\b.*?</script\s*>|<style\b.*?</style\s*>|<!--.*?-->")
            .expect("drop regex")
    });
    let block = BLOCK.get_or_init(|| {
        Regex::new(r"(?i)</?(?:p|div|br|li|ul|ol|h[1-6]|tr|table|section|article|header|footer|blockquote|dt|dd)\b[^>]*>")
            .expect("block regex")
    });
    let tag = TAG.get_or_init(|| Regex::new(r"(?s)<[^>]*>").expect("tag regex"));

    let text = drop.replace_all(html, "");
    let text = block.replace_all(&text, "\n");
    let text = tag.replace_all(&text, "");
    let text = html_escape::decode_html_entities(&text);
    text.lines()
        .map(|line| line.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|line| !line.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

fn source_text(raw: &str) -> String {
    let raw = raw.replace("\r\n", "\n");
    if looks_like_html(&raw) {
        html_to_text(&raw)
    } else {
        raw
    }
}

/// Whitespace tokens of the normative text: everything from the first
/// article heading on, heading lines excluded. Without headings the whole
/// text counts.
pub fn normative_tokens(text: &str) -> Vec<String> {
    let text = source_text(text);
    let has_heading = text.lines().any(|l| parse_heading(l).is_some());
    let mut started = !has_heading;
    let mut tokens = Vec::new();
    for line in text.lines() {
        if parse_heading(line).is_some() {
            started = true;
            continue;
        }
        if started {
            tokens.extend(line.split_whitespace().map(str::to_string));
        }
    }
    tokens
}

fn extracted_tokens(articles: &[PolicyArticle]) -> Vec<String> {
    articles
        .iter()
        .flat_map(|a| &a.paragraphs)
        .flat_map(|p| {
            std::iter::once(p.label.clone()).chain(p.content.split_whitespace().map(str::to_string))
        })
        .collect()
}

/// Source tokens missing from the extraction (multiset difference).
fn missing_tokens(source: &[String], extracted: &[String]) -> Vec<String> {
    let mut available: HashMap<&str, usize> = HashMap::new();
    for token in extracted {
        *available.entry(token.as_str()).or_default() += 1;
    }
    let mut missing = Vec::new();
    for token in source {
        match available.get_mut(token.as_str()) {
            Some(n) if *n > 0 => *n -= 1,
            _ => missing.push(token.clone()),
        }
    }
    missing
}

struct ArticleBuilder {
    number: String,
    title: Option<String>,
    intro: Vec<String>,
    paragraphs: Vec<(String, Vec<String>)>,
    style: Option<LabelStyle>,
}

impl ArticleBuilder {
    fn new(number: String, title: Option<String>) -> ArticleBuilder {
        ArticleBuilder {
            number,
            title,
            intro: Vec::new(),
            paragraphs: Vec::new(),
            style: None,
        }
    }

    fn push_line(&mut self, line: &str) {
        if let Some((style, label, rest)) = parse_label(line) {
            let compatible = self.style.is_none_or(|s| s == style);
            let fresh = !self.paragraphs.iter().any(|(l, _)| *l == label);
            if compatible && fresh {
                self.style = Some(style);
                let mut words = Vec::new();
                if !rest.is_empty() {
                    words.push(rest);
                }
                self.paragraphs.push((label, words));
                return;
            }
        }
        match self.paragraphs.last_mut() {
            Some((_, words)) => words.push(line.trim().to_string()),
            None => self.intro.push(line.trim().to_string()),
        }
    }

    fn finish(self) -> Option<PolicyArticle> {
        let join = |parts: &[String]| {
            parts
                .join(" ")
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
        };
        let intro = join(&self.intro);
        let mut paragraphs: Vec<PolicyParagraph> = self
            .paragraphs
            .iter()
            .map(|(label, words)| PolicyParagraph {
                label: label.clone(),
                content: join(words),
            })
            .collect();
        if paragraphs.is_empty() {
            if intro.is_empty() {
                tracing::warn!(article = %self.number, "dropping article without text");
                return None;
            }
            paragraphs.push(PolicyParagraph {
                label: "(1)".into(),
                content: intro,
            });
        } else if !intro.is_empty() {
            let first = &mut paragraphs[0];
            first.content = if first.content.is_empty() {
                intro
            } else {
                format!("{intro} {}", first.content)
            };
        }
        // A bare label line with no text folds into its predecessor.
        let mut merged: Vec<PolicyParagraph> = Vec::new();
        for paragraph in paragraphs {
            match merged.last_mut() {
                Some(prev) if paragraph.content.is_empty() => {
                    prev.content = format!("{} {}", prev.content, paragraph.label);
                }
                _ if paragraph.content.is_empty() => merged.push(PolicyParagraph {
                    content: paragraph.label.clone(),
                    ..paragraph
                }),
                _ => merged.push(paragraph),
            }
        }
        Some(PolicyArticle {
            number: self.number,
            title: self.title,
            paragraphs: merged,
        })
    }
}

/// Heading/label heuristics: `Article 3`, `Art. 3`, `Section 3`, `§ 1798.100`
/// (optionally followed by a separator and a title) start articles; `(1)`,
/// `(a)` or `1.` at line start start paragraphs. The first label style seen
/// in an article wins; other styles stay inside the current paragraph.
pub fn rule_based_extract(text: &str) -> Result<Vec<PolicyArticle>, PolicyError> {
    let text = source_text(text);
    if text.trim().is_empty() {
        return Err(PolicyError::EmptyDocument);
    }
    let has_heading = text.lines().any(|l| parse_heading(l).is_some());
    let mut current: Option<ArticleBuilder> =
        (!has_heading).then(|| ArticleBuilder::new("1".into(), None));
    let mut articles: Vec<PolicyArticle> = Vec::new();

    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some((number, title)) = parse_heading(line) {
            if let Some(article) = current.take().and_then(ArticleBuilder::finish) {
                articles.push(article);
            }
            current = Some(ArticleBuilder::new(number, title));
            continue;
        }
        if let Some(builder) = current.as_mut() {
            builder.push_line(line);
        }
    }
    if let Some(article) = current.and_then(ArticleBuilder::finish) {
        articles.push(article);
    }
    if articles.is_empty() {
        return Err(PolicyError::EmptyDocument);
    }
    let mut seen = std::collections::HashSet::new();
    for article in &articles {
        if !seen.insert(article.number.clone()) {
            return Err(PolicyError::Invalid(format!(
                "article {} appears twice",
                article.number
            )));
        }
    }
    Ok(articles)
}

/// Cut the normative text into chunks that start at article headings.
fn chunk_source(text: &str, limit: usize) -> Vec<String> {
    let has_heading = text.lines().any(|l| parse_heading(l).is_some());
    let mut chunks = Vec::new();
    let mut current = String::new();
    let mut started = !has_heading;
    for line in text.lines() {
        let heading = parse_heading(line).is_some();
        if heading {
            started = true;
            if current.len() >= limit {
                chunks.push(std::mem::take(&mut current));
            }
        }
        if started {
            current.push_str(line);
            current.push('\n');
        }
    }
    if !current.trim().is_empty() {
        chunks.push(current);
    }
    chunks
}

fn extract_chunk(
    gateway: &Gateway,
    scope: &str,
    policy_id: &str,
    chunk: &str,
) -> Result<Vec<PolicyArticle>, PolicyError> {
    let request = prompts::structuring_request(policy_id, chunk);
    let source_tokens = normative_tokens(chunk);
    let mut last_reason = String::new();
    for attempt in 1..=EXTRACTION_ATTEMPTS {
        let completion =
            gateway
                .complete(scope, &request)
                .map_err(|e| PolicyError::ExtractionFailed {
                    attempts: attempt,
                    reason: e.to_string(),
                })?;
        let parsed = parse_policy_table(&completion.text).and_then(rows_to_articles);
        match parsed {
            Ok(articles) if articles.is_empty() => last_reason = "no table rows".into(),
            Ok(articles) => {
                let missing = missing_tokens(&source_tokens, &extracted_tokens(&articles));
                if missing.is_empty() {
                    return Ok(articles);
                }
                last_reason = format!(
                    "extraction dropped {} source token(s), e.g. `{}`",
                    missing.len(),
                    missing[0]
                );
            }
            Err(err) => last_reason = err.to_string(),
        }
        tracing::debug!(attempt, reason = %last_reason, "unusable structuring output");
    }
    Err(PolicyError::ExtractionFailed {
        attempts: EXTRACTION_ATTEMPTS,
        reason: last_reason,
    })
}

/// Ledger scope used for structuring calls of `policy_id`.
pub fn structuring_scope(policy_id: &str) -> String {
    format!("{policy_id}/structuring")
}

/// Normalize a raw HTML or plain-text policy.
///
/// With `gateway` the provider extracts the table (chunks in parallel, up to
/// [`EXTRACTION_ATTEMPTS`] tries each, output checked for dropped text);
/// otherwise the rule-based parser runs.
pub fn structure_policy(
    raw: &str,
    meta: PolicyMeta,
    gateway: Option<&Gateway>,
) -> Result<PolicyDocument, PolicyError> {
    if raw.trim().is_empty() {
        return Err(PolicyError::EmptyDocument);
    }
    let source_hash = sha256_hex(raw.as_bytes());
    let text = source_text(raw);
    let articles = match gateway {
        None => rule_based_extract(&text)?,
        Some(gateway) => {
            let chunks = chunk_source(&text, CHUNK_CHARS);
            if chunks.is_empty() {
                return Err(PolicyError::EmptyDocument);
            }
            let scope = structuring_scope(&meta.policy_id);
            let results: Vec<Result<Vec<PolicyArticle>, PolicyError>> = thread::scope(|s| {
                let handles: Vec<_> = chunks
                    .iter()
                    .map(|chunk| {
                        let scope = scope.as_str();
                        let policy_id = meta.policy_id.as_str();
                        s.spawn(move || extract_chunk(gateway, scope, policy_id, chunk))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("extraction worker panicked"))
                    .collect()
            });
            let mut articles = Vec::new();
            for result in results {
                articles.extend(result?);
            }
            articles
        }
    };
    PolicyDocument::new(meta, articles, source_hash).map_err(|err| match err {
        PolicyError::Invalid(reason) if gateway.is_some() => PolicyError::ExtractionFailed {
            attempts: EXTRACTION_ATTEMPTS,
            reason,
        },
        other => other,
    })
}
