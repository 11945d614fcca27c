//! Standalone Markdown export of a report.

use std::fmt::Write;

use crate::llm::{compute_cost, display_cost};

use super::{ArticlePriority, CellState, ComplianceReport, HeatmapMatrix, Summary};

fn cell(text: &str) -> String {
    text.replace('\\', "\\\\")
        .replace('|', "\\|")
        .replace('\n', "<br>")
}

fn priority_rows(out: &mut String, rows: &[ArticlePriority]) {
    if rows.is_empty() {
        out.push_str("No issues at or above the threshold.\n\n");
        return;
    }
    out.push_str("| Policy | Article | Max score | Affected sections |\n|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            r.policy_id, r.article, r.max_score, r.affected_pairs
        );
    }
    out.push('\n');
}

fn summary(out: &mut String, s: &Summary) {
    out.push_str(&s.narrative);
    out.push_str("\n\n");
    priority_rows(out, &s.priorities);
}

fn heatmap(out: &mut String, h: &HeatmapMatrix) {
    let _ = write!(out, "| Section |");
    for col in &h.cols {
        let _ = write!(out, " {} |", cell(col));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(h.cols.len()));
    out.push('\n');
    for (section, row) in h.rows.iter().zip(&h.cells) {
        let _ = write!(out, "| {} |", section.name());
        for c in row {
            let mark = match c.state {
                CellState::Score(s) => s.to_string(),
                CellState::Skipped => "·".into(),
                CellState::Unscored => "?".into(),
            };
            let _ = write!(out, " {mark} |");
        }
        out.push('\n');
    }
    out.push_str(
        "\nLegend: 0 to 5 violation score, `·` skipped by the relevancy filter, `?` unscored.\n\n",
    );
}

pub fn report_to_markdown(report: &ComplianceReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Compliance report: {}\n", report.card_title);
    let _ = writeln!(
        out,
        "Run `{}`, card `{}`, issue threshold {}.\n",
        report.run_id, report.card_id, report.issue_threshold
    );

    out.push_str("## Overall summary\n\n");
    summary(&mut out, &report.overall);

    out.push_str("## Policy summaries\n\n");
    for (s, stats) in report.policy_summaries.iter().zip(&report.policy_stats) {
        let _ = writeln!(out, "### {}: {}\n", stats.policy_id, stats.full_name);
        let _ = writeln!(
            out,
            "{} articles, {} evaluated pairs, {} skipped, {} unscored, {} issues.\n",
            stats.articles,
            stats.evaluated_pairs,
            stats.skipped_pairs,
            stats.unscored_pairs,
            stats.issues
        );
        summary(&mut out, s);
    }

    out.push_str("## Heatmaps\n\n");
    for h in &report.heatmaps {
        let _ = writeln!(out, "### {}\n", h.policy_id);
        heatmap(&mut out, h);
    }

    out.push_str("## Issues and fixes\n\n");
    out.push_str("| Section | Documentation | Issues | Recommended fixes |\n|---|---|---|---|\n");
    for row in &report.issue_fix_rows {
        let issues = row
            .issues
            .iter()
            .map(|i| {
                format!(
                    "{} Art. {} ({}): {}",
                    i.policy_id, i.article, i.score, i.rationale
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        let fixes = row
            .fixes
            .iter()
            .map(|f| f.text.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            row.section.name(),
            cell(&row.original_content),
            cell(&issues),
            cell(&fixes)
        );
    }

    out.push_str("\n## Usage\n\n| Scope | In tokens | Out tokens | Requests | Cost |\n|---|---|---|---|---|\n");
    let total = report.ledger.total();
    for e in report.ledger.entries().chain(std::iter::once(&total)) {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {:.4} |",
            e.scope,
            e.input_tokens,
            e.output_tokens,
            e.request_count,
            display_cost(compute_cost(e, &report.ledger.rates), 4)
        );
    }
    out
}
