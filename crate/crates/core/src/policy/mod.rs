//! Normalized policy documents: ordered articles of labeled paragraphs.

mod extract;
mod markdown;
mod package;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use extract::{html_to_text, normative_tokens, rule_based_extract, structure_policy};
pub use extract::{structuring_scope, CHUNK_CHARS, EXTRACTION_ATTEMPTS};
pub(crate) use markdown::parse_rendered_document;
pub use markdown::{parse_policy_table, render_markdown_table, render_table_rows, TableRow};
pub use package::{
    load_package, save_package, PackageError, PolicyPackage, PACKAGE_SCHEMA_VERSION,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyParagraph {
    pub label: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyArticle {
    /// Kept as text: "3", "1798.100", "6a".
    pub number: String,
    pub title: Option<String>,
    pub paragraphs: Vec<PolicyParagraph>,
}

impl PolicyArticle {
    /// All paragraph text joined in order, labels included.
    pub fn full_text(&self) -> String {
        self.paragraphs
            .iter()
            .map(|p| format!("{} {}", p.label, p.content))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub policy_id: String,
    pub full_name: String,
    pub jurisdiction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub policy_id: String,
    pub full_name: String,
    pub jurisdiction: String,
    pub articles: Vec<PolicyArticle>,
    /// sha256 of the raw source bytes.
    pub source_hash: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("policy source is empty or contains no articles")]
    EmptyDocument,
    #[error("extraction failed after {attempts} attempt(s): {reason}")]
    ExtractionFailed { attempts: u32, reason: String },
    #[error("invalid policy document: {0}")]
    Invalid(String),
}

impl PolicyDocument {
    pub fn new(
        meta: PolicyMeta,
        articles: Vec<PolicyArticle>,
        source_hash: String,
    ) -> Result<PolicyDocument, PolicyError> {
        let doc = PolicyDocument {
            policy_id: meta.policy_id,
            full_name: meta.full_name,
            jurisdiction: meta.jurisdiction,
            articles,
            source_hash,
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.articles.is_empty() {
            return Err(PolicyError::EmptyDocument);
        }
        if !is_valid_policy_id(&self.policy_id) {
            return Err(PolicyError::Invalid(format!(
                "policy id `{}` must be non-empty and contain only letters, digits, `-` or `_`",
                self.policy_id
            )));
        }
        let mut numbers = HashSet::new();
        for article in &self.articles {
            if article.number.is_empty() || article.number.chars().any(char::is_whitespace) {
                return Err(PolicyError::Invalid(format!(
                    "article number `{}` must be non-empty without whitespace",
                    article.number
                )));
            }
            if !numbers.insert(article.number.as_str()) {
                return Err(PolicyError::Invalid(format!(
                    "duplicate article number `{}`",
                    article.number
                )));
            }
            if article.paragraphs.is_empty() {
                return Err(PolicyError::Invalid(format!(
                    "article {} has no paragraphs",
                    article.number
                )));
            }
            let mut labels = HashSet::new();
            for paragraph in &article.paragraphs {
                if paragraph.content.trim().is_empty() {
                    return Err(PolicyError::Invalid(format!(
                        "article {} paragraph {} is empty",
                        article.number, paragraph.label
                    )));
                }
                if !labels.insert(paragraph.label.as_str()) {
                    return Err(PolicyError::Invalid(format!(
                        "article {} repeats paragraph label {}",
                        article.number, paragraph.label
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> PolicyMeta {
        PolicyMeta {
            policy_id: self.policy_id.clone(),
            full_name: self.full_name.clone(),
            jurisdiction: self.jurisdiction.clone(),
        }
    }

    pub fn article(&self, number: &str) -> Option<&PolicyArticle> {
        self.articles.iter().find(|a| a.number == number)
    }

    /// Position of an article in document order.
    pub fn article_index(&self, number: &str) -> Option<usize> {
        self.articles.iter().position(|a| a.number == number)
    }

    pub fn article_numbers(&self) -> Vec<String> {
        self.articles.iter().map(|a| a.number.clone()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy document serializes")
    }

    pub fn from_json(text: &str) -> Result<PolicyDocument, PolicyError> {
        let doc: PolicyDocument =
            serde_json::from_str(text).map_err(|e| PolicyError::Invalid(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }
}

pub fn is_valid_policy_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}
