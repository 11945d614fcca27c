//! Score tables: a Markdown table whose second column holds a JSON object
//! `{"score": <0-5>, "description": <text|null>}` per article.
//!
//! ```text
//! | Article | Evaluation |
//! |---|---|
//! | 3 | { "score": 3, "description": "..." } |
//! ```

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Gateway, ProviderError, ProviderRequest};

/// Attempts per score-table request when the answer does not parse.
pub const PARSE_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub article: String,
    pub score: u8,
    pub description: Option<String>,
}

fn malformed(message: impl Into<String>) -> ProviderError {
    ProviderError::MalformedResponse(message.into())
}

fn parse_evaluation(article: &str, cell: &str) -> Result<ScoreRow, ProviderError> {
    let value: Value = serde_json::from_str(cell)
        .map_err(|e| malformed(format!("article {article}: evaluation is not JSON ({e})")))?;
    let object = value
        .as_object()
        .ok_or_else(|| malformed(format!("article {article}: evaluation is not an object")))?;
    let score = match object.get("score") {
        Some(Value::Number(n)) => n.as_u64().filter(|_| !n.is_f64()).ok_or_else(|| {
            malformed(format!("article {article}: score `{n}` is not an integer"))
        })?,
        Some(other) => {
            return Err(malformed(format!(
                "article {article}: score `{other}` is not a number"
            )))
        }
        None => return Err(malformed(format!("article {article}: missing score"))),
    };
    if score > 5 {
        return Err(malformed(format!(
            "article {article}: score {score} outside 0-5"
        )));
    }
    let description = match object.get("description") {
        None | Some(Value::Null) => None,
        Some(Value::String(text)) if text.trim().is_empty() => None,
        Some(Value::String(text)) => Some(text.trim().to_string()),
        Some(other) => {
            return Err(malformed(format!(
                "article {article}: description `{other}` is not text"
            )))
        }
    };
    if score > 0 && description.is_none() {
        return Err(malformed(format!(
            "article {article}: score {score} requires a description"
        )));
    }
    Ok(ScoreRow {
        article: article.to_string(),
        score: score as u8,
        description,
    })
}

/// Parse every score row in `text`. Prose around the table is ignored.
pub fn parse_score_table(text: &str) -> Result<Vec<ScoreRow>, ProviderError> {
    let mut rows = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        let Some(inner) = line.strip_prefix('|') else {
            continue;
        };
        let inner = inner.strip_suffix('|').unwrap_or(inner);
        let Some((article, evaluation)) = inner.split_once('|') else {
            continue;
        };
        let article = article.trim();
        let evaluation = evaluation.trim();
        let is_separator =
            |s: &str| !s.is_empty() && s.chars().all(|c| matches!(c, '-' | ':' | ' '));
        if is_separator(article) && is_separator(evaluation) {
            continue;
        }
        if article.eq_ignore_ascii_case("article") {
            continue;
        }
        if article.is_empty() {
            return Err(malformed("row without an article number"));
        }
        let article = article
            .trim_start_matches("Art.")
            .trim_start_matches('§')
            .trim();
        rows.push(parse_evaluation(article, evaluation)?);
    }
    if rows.is_empty() {
        return Err(malformed("no score rows found"));
    }
    Ok(rows)
}

pub fn render_score_table(rows: &[ScoreRow]) -> String {
    let mut out = String::from("| Article | Evaluation |\n|---|---|\n");
    for row in rows {
        let json = serde_json::json!({
            "score": row.score,
            "description": row.description,
        });
        out.push_str(&format!("| {} | {} |\n", row.article, json));
    }
    out
}

/// Send a score-table request and return one row per requested article, in
/// request order. Unparseable answers, and answers that miss or repeat a
/// requested article, are retried up to [`PARSE_ATTEMPTS`] times. Rows for
/// articles that were not asked about are ignored.
pub fn request_scores(
    gateway: &Gateway,
    scope: &str,
    request: &ProviderRequest,
    articles: &[String],
) -> Result<Vec<ScoreRow>, ProviderError> {
    let mut last = malformed("no attempt made");
    for attempt in 1..=PARSE_ATTEMPTS {
        let completion = gateway.complete(scope, request)?;
        match parse_score_table(&completion.text).and_then(|rows| match_rows(rows, articles)) {
            Ok(rows) => return Ok(rows),
            Err(err) => {
                tracing::debug!(scope, attempt, %err, "unusable score table");
                last = err;
            }
        }
    }
    Err(last)
}

fn match_rows(rows: Vec<ScoreRow>, articles: &[String]) -> Result<Vec<ScoreRow>, ProviderError> {
    articles
        .iter()
        .map(|article| {
            let mut found = rows.iter().filter(|r| &r.article == article);
            match (found.next(), found.next()) {
                (Some(row), None) => Ok(row.clone()),
                (None, _) => Err(malformed(format!("no row for article {article}"))),
                (Some(_), Some(_)) => Err(malformed(format!("article {article} scored twice"))),
            }
        })
        .collect()
}
