//! `Article | Paragraph | Content` tables.
//!
//! Cells escape `\` and `|` with a backslash. The article cell carries the
//! article number, optionally followed by [`TITLE_SEPARATOR`] and the article title.

use super::{PolicyArticle, PolicyDocument, PolicyError, PolicyParagraph};

const TITLE_SEPARATOR: &str = " — ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableRow {
    pub article: String,
    pub title: Option<String>,
    pub label: String,
    pub content: String,
}

fn escape_cell(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '|' => out.push_str("\\|"),
            '\n' | '\r' => out.push(' '),
            other => out.push(other),
        }
    }
    out
}

/// Split a table line into unescaped cells. Returns `None` for non-row lines.
fn split_row(line: &str) -> Option<Vec<String>> {
    let line = line.trim();
    let inner = line.strip_prefix('|')?;
    let mut cells = Vec::new();
    let mut current = String::new();
    let mut chars = inner.chars();
    let mut closed = false;
    while let Some(ch) = chars.next() {
        match ch {
            '\\' => match chars.next() {
                Some(next @ ('\\' | '|')) => current.push(next),
                Some(next) => {
                    current.push('\\');
                    current.push(next);
                }
                None => current.push('\\'),
            },
            '|' => {
                cells.push(current.trim().to_string());
                current.clear();
                closed = true;
                continue;
            }
            other => current.push(other),
        }
        closed = false;
    }
    if !closed && !current.trim().is_empty() {
        cells.push(current.trim().to_string());
    }
    Some(cells)
}

fn is_separator(cells: &[String]) -> bool {
    !cells.is_empty()
        && cells.iter().all(|c| {
            let c = c.trim();
            !c.is_empty() && c.chars().all(|ch| matches!(ch, '-' | ':' | ' '))
        })
}

fn article_cell(article: &PolicyArticle) -> String {
    match &article.title {
        Some(title) => format!("{}{TITLE_SEPARATOR}{}", article.number, title),
        None => article.number.clone(),
    }
}

/// Table rows only (header and separator included), no document heading.
pub fn render_table_rows(articles: &[PolicyArticle]) -> String {
    let mut out = String::from("| Article | Paragraph | Content |\n|---|---|---|\n");
    for article in articles {
        let cell = escape_cell(&article_cell(article));
        for paragraph in &article.paragraphs {
            out.push_str(&format!(
                "| {} | {} | {} |\n",
                cell,
                escape_cell(&paragraph.label),
                escape_cell(&paragraph.content)
            ));
        }
    }
    out
}

/// Full Markdown rendering of a policy: heading lines followed by the table.
pub fn render_markdown_table(doc: &PolicyDocument) -> String {
    let mut out = format!(
        "# {}: {}\n\nJurisdiction: {}\n\n",
        doc.policy_id, doc.full_name, doc.jurisdiction
    );
    out.push_str(&render_table_rows(&doc.articles));
    out
}

/// Parse `Article | Paragraph | Content` rows out of free text.
///
/// Lines that are not table rows are ignored, as are the header and
/// separator. A blank article cell continues the previous article.
pub fn parse_policy_table(text: &str) -> Result<Vec<TableRow>, PolicyError> {
    let mut rows = Vec::new();
    let mut last_article: Option<(String, Option<String>)> = None;
    for line in text.lines() {
        let Some(cells) = split_row(line) else {
            continue;
        };
        if is_separator(&cells) {
            continue;
        }
        if cells.len() >= 2
            && cells[0].eq_ignore_ascii_case("article")
            && cells[1].eq_ignore_ascii_case("paragraph")
        {
            continue;
        }
        if cells.len() != 3 {
            return Err(PolicyError::Invalid(format!(
                "table row has {} cells, expected 3: `{}`",
                cells.len(),
                line.trim()
            )));
        }
        let (article, title) = if cells[0].is_empty() {
            last_article.clone().ok_or_else(|| {
                PolicyError::Invalid("first table row has no article number".into())
            })?
        } else {
            match cells[0].split_once(TITLE_SEPARATOR) {
                Some((number, title)) => {
                    (number.trim().to_string(), Some(title.trim().to_string()))
                }
                None => (cells[0].clone(), None),
            }
        };
        let label = if cells[1].is_empty() {
            "(1)".to_string()
        } else {
            cells[1].clone()
        };
        if cells[2].is_empty() {
            return Err(PolicyError::Invalid(format!(
                "article {article} paragraph {label} has empty content"
            )));
        }
        last_article = Some((article.clone(), title.clone()));
        rows.push(TableRow {
            article,
            title,
            label,
            content: cells[2].clone(),
        });
    }
    Ok(rows)
}

/// Group consecutive rows into articles. A repeated, non-adjacent article
/// number is an error.
pub(crate) fn rows_to_articles(rows: Vec<TableRow>) -> Result<Vec<PolicyArticle>, PolicyError> {
    let mut articles: Vec<PolicyArticle> = Vec::new();
    for row in rows {
        match articles.last_mut() {
            Some(last) if last.number == row.article => {
                if last.title.is_none() {
                    last.title = row.title;
                }
                last.paragraphs.push(PolicyParagraph {
                    label: row.label,
                    content: row.content,
                });
            }
            _ => {
                if articles.iter().any(|a| a.number == row.article) {
                    return Err(PolicyError::Invalid(format!(
                        "article {} appears in two separate places",
                        row.article
                    )));
                }
                articles.push(PolicyArticle {
                    number: row.article,
                    title: row.title,
                    paragraphs: vec![PolicyParagraph {
                        label: row.label,
                        content: row.content,
                    }],
                });
            }
        }
    }
    Ok(articles)
}

/// Recover a document from its full Markdown rendering.
pub(crate) fn parse_rendered_document(text: &str) -> Result<PolicyDocument, PolicyError> {
    let mut lines = text.lines();
    let heading = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| PolicyError::Invalid("missing `# ID: Name` heading".into()))?;
    let (policy_id, full_name) = heading
        .split_once(": ")
        .ok_or_else(|| PolicyError::Invalid("heading must read `# ID: Name`".into()))?;
    let jurisdiction = text
        .lines()
        .find_map(|l| l.strip_prefix("Jurisdiction: "))
        .unwrap_or_default();
    let articles = rows_to_articles(parse_policy_table(text)?)?;
    PolicyDocument::new(
        super::PolicyMeta {
            policy_id: policy_id.to_string(),
            full_name: full_name.to_string(),
            jurisdiction: jurisdiction.to_string(),
        },
        articles,
        String::new(),
    )
}
