//! Agreement statistics between engine scores and expert ratings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RATINGS_HEADER: &str = "item,rater,dimension,score";
/// Rater id used for the engine's column unless told otherwise.
pub const DEFAULT_ENGINE_RATER: &str = "engine";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("item has no ratings")]
    EmptyItem,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("not enough data: {0}")]
    TooFew(String),
    #[error("ratings file line {line}: {message}")]
    Ratings { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Violation,
    Relevance,
}

impl Dimension {
    pub fn name(self) -> &'static str {
        match self {
            Dimension::Violation => "violation",
            Dimension::Relevance => "relevance",
        }
    }
}

/// Median; an even count gives the mean of the central pair.
pub fn median(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyItem);
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

fn check_lengths(x: usize, y: usize) -> Result<(), MetricsError> {
    if x != y {
        return Err(MetricsError::LengthMismatch { left: x, right: y });
    }
    Ok(())
}

/// Spearman's rho (Pearson correlation of average ranks) with a 95% Fisher-z
/// interval.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation, MetricsError> {
    check_lengths(x.len(), y.len())?;
    let n = x.len();
    if n < 3 {
        return Err(MetricsError::TooFew(format!(
            "spearman needs at least 3 pairs, got {n}"
        )));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::DegenerateInput(
            "constant vector has no rank variance".into(),
        ));
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let (ci_low, ci_high) = if n <= 3 {
        (-1.0, 1.0)
    } else if rho.abs() >= 1.0 {
        (rho, rho)
    } else {
        let z = rho.atanh();
        let half = 1.96 / ((n - 3) as f64).sqrt();
        ((z - half).tanh(), (z + half).tanh())
    };
    Ok(Correlation {
        rho,
        ci_low,
        ci_high,
        n,
    })
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    check_lengths(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(MetricsError::TooFew("mae of empty vectors".into()));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Fraction of pairs with |pred - truth| <= k.
pub fn within_k(pred: &[f64], truth: &[f64], k: f64) -> Result<f64, MetricsError> {
    check_lengths(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(MetricsError::TooFew("within_k of empty vectors".into()));
    }
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| (*p - *t).abs() <= k)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Two-way random effects, absolute agreement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Icc {
    /// ICC(2,1).
    pub single: f64,
    /// ICC(2,k), the mean of k raters.
    pub average: f64,
    pub items: usize,
    pub raters: usize,
}

/// ICC over a complete items x raters matrix.
pub fn icc(rows: &[Vec<f64>]) -> Result<Icc, MetricsError> {
    let n = rows.len();
    if n < 2 {
        return Err(MetricsError::TooFew(format!(
            "icc needs at least 2 items, got {n}"
        )));
    }
    let k = rows[0].len();
    if k < 2 {
        return Err(MetricsError::TooFew(format!(
            "icc needs at least 2 raters, got {k}"
        )));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != k) {
        return Err(MetricsError::LengthMismatch {
            left: k,
            right: bad.len(),
        });
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = rows.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / nf)
        .collect();
    let sst: f64 = rows.iter().flatten().map(|x| (x - grand).powi(2)).sum();
    let ssr: f64 = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ssc: f64 = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let sse = (sst - ssr - ssc).max(0.0);
    let msr = ssr / (nf - 1.0);
    let msc = ssc / (kf - 1.0);
    let mse = sse / ((nf - 1.0) * (kf - 1.0));
    if msr <= f64::EPSILON * sst.max(1.0) {
        return Err(MetricsError::DegenerateInput(
            "no between-item variance".into(),
        ));
    }
    let single = (msr - mse) / (msr + (kf - 1.0) * mse + kf * (msc - mse) / nf);
    let average = (msr - mse) / (msr + (msc - mse) / nf);
    Ok(Icc {
        single,
        average,
        items: n,
        raters: k,
    })
}

/// Round half-up to an integer bin in 0..=5.
pub fn bin(value: f64) -> usize {
    ((value + 0.5).floor().clamp(0.0, 5.0)) as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// `matrix[truth][pred]`.
    pub matrix: [[u64; 6]; 6],
    /// Counts of |pred - truth bin| for 0..=5.
    pub abs_error_histogram: [u64; 6],
}

/// Truth values (possibly half-integer medians) are binned half-up.
pub fn confusion_and_error_histogram(
    pred: &[u8],
    truth: &[f64],
) -> Result<Confusion, MetricsError> {
    check_lengths(pred.len(), truth.len())?;
    let mut matrix = [[0u64; 6]; 6];
    let mut hist = [0u64; 6];
    for (&p, &t) in pred.iter().zip(truth) {
        let p = usize::from(p.min(5));
        let t = bin(t);
        matrix[t][p] += 1;
        hist[p.abs_diff(t)] += 1;
    }
    Ok(Confusion {
        matrix,
        abs_error_histogram: hist,
    })
}

/// Items x raters, missing values allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingsMatrix {
    pub dimension: Dimension,
    pub items: Vec<String>,
    pub raters: Vec<String>,
    /// `values[item][rater]`.
    pub values: Vec<Vec<Option<u8>>>,
}

impl RatingsMatrix {
    pub fn rater_index(&self, rater: &str) -> Option<usize> {
        self.raters.iter().position(|r| r == rater)
    }

    /// Per-item median over `raters`; errors on an item none of them rated.
    pub fn consensus(&self, raters: &[usize]) -> Result<Vec<f64>, MetricsError> {
        self.values
            .iter()
            .map(|row| {
                let vals: Vec<f64> = raters
                    .iter()
                    .filter_map(|&j| row[j])
                    .map(f64::from)
                    .collect();
                median(&vals)
            })
            .collect()
    }

    /// Rows complete over `raters` (listwise deletion).
    pub fn complete_rows(&self, raters: &[usize]) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .filter_map(|row| raters.iter().map(|&j| row[j].map(f64::from)).collect())
            .collect()
    }
}

/// Parse `item,rater,dimension,score` rows into one matrix per dimension.
/// Items and raters keep first-appearance order.
pub fn parse_ratings_csv(text: &str) -> Result<BTreeMap<Dimension, RatingsMatrix>, MetricsError> {
    let err = |line: usize, message: String| MetricsError::Ratings { line, message };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut rows = reader.records();
    let header = rows
        .next()
        .ok_or_else(|| err(1, "empty file".into()))?
        .map_err(|e| err(1, e.to_string()))?;
    if header
        .iter()
        .collect::<Vec<_>>()
        .join(",")
        .trim_start_matches('\u{feff}')
        != RATINGS_HEADER
    {
        return Err(err(1, format!("header must be `{RATINGS_HEADER}`")));
    }
    struct Acc {
        items: Vec<String>,
        raters: Vec<String>,
        cells: BTreeMap<(usize, usize), u8>,
    }
    let mut acc: BTreeMap<Dimension, Acc> = BTreeMap::new();
    for (i, row) in rows.enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| err(line, e.to_string()))?;
        if row.len() != 4 {
            return Err(err(line, format!("expected 4 fields, found {}", row.len())));
        }
        let dimension = match row[2].trim() {
            "violation" => Dimension::Violation,
            "relevance" => Dimension::Relevance,
            other => return Err(err(line, format!("unknown dimension `{other}`"))),
        };
        let score: u8 = row[3]
            .trim()
            .parse()
            .ok()
            .filter(|s| *s <= 5)
            .ok_or_else(|| err(line, format!("score `{}` is not an integer 0-5", &row[3])))?;
        let a = acc.entry(dimension).or_insert_with(|| Acc {
            items: Vec::new(),
            raters: Vec::new(),
            cells: BTreeMap::new(),
        });
        let position = |list: &mut Vec<String>, key: &str| match list.iter().position(|x| x == key)
        {
            Some(p) => p,
            None => {
                list.push(key.to_string());
                list.len() - 1
            }
        };
        let item = position(&mut a.items, row[0].trim());
        let rater = position(&mut a.raters, row[1].trim());
        if a.cells.insert((item, rater), score).is_some() {
            return Err(err(
                line,
                format!("duplicate rating for item `{}` by `{}`", &row[0], &row[1]),
            ));
        }
    }
    Ok(acc
        .into_iter()
        .map(|(dimension, a)| {
            let values = (0..a.items.len())
                .map(|i| {
                    (0..a.raters.len())
                        .map(|j| a.cells.get(&(i, j)).copied())
                        .collect()
                })
                .collect();
            (
                dimension,
                RatingsMatrix {
                    dimension,
                    items: a.items,
                    raters: a.raters,
                    values,
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemPoint {
    pub item: String,
    pub consensus: f64,
    pub engine: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub dimension: Dimension,
    pub items: usize,
    pub human_raters: Vec<String>,
    pub engine_rater: String,
    pub ci_method: String,
    pub consensus_binning: String,
    pub spearman: Correlation,
    pub mae: f64,
    pub within_one: f64,
    pub icc_raters_only: Icc,
    pub icc_with_engine: Icc,
    pub confusion: Confusion,
    pub series: Vec<ItemPoint>,
}

/// Compare the engine column with the median of the other raters.
pub fn agreement_report(
    matrix: &RatingsMatrix,
    engine_rater: &str,
) -> Result<AgreementReport, MetricsError> {
    let engine = matrix.rater_index(engine_rater).ok_or_else(|| {
        MetricsError::TooFew(format!("no ratings from engine rater `{engine_rater}`"))
    })?;
    let humans: Vec<usize> = (0..matrix.raters.len()).filter(|&j| j != engine).collect();
    if humans.len() < 2 {
        return Err(MetricsError::TooFew(
            "agreement needs at least 2 human raters".into(),
        ));
    }
    let mut series = Vec::new();
    for (i, row) in matrix.values.iter().enumerate() {
        let Some(e) = row[engine] else { continue };
        let vals: Vec<f64> = humans
            .iter()
            .filter_map(|&j| row[j])
            .map(f64::from)
            .collect();
        if vals.is_empty() {
            continue;
        }
        series.push(ItemPoint {
            item: matrix.items[i].clone(),
            consensus: median(&vals)?,
            engine: e,
        });
    }
    let pred: Vec<f64> = series.iter().map(|p| f64::from(p.engine)).collect();
    let truth: Vec<f64> = series.iter().map(|p| p.consensus).collect();
    let pred_bins: Vec<u8> = series.iter().map(|p| p.engine).collect();
    let mut with_engine = humans.clone();
    with_engine.push(engine);
    Ok(AgreementReport {
        dimension: matrix.dimension,
        items: series.len(),
        human_raters: humans.iter().map(|&j| matrix.raters[j].clone()).collect(),
        engine_rater: engine_rater.to_string(),
        ci_method: "fisher-z, 95%".into(),
        consensus_binning: "median, half-integers rounded half-up".into(),
        spearman: spearman(&pred, &truth)?,
        mae: mae(&pred, &truth)?,
        within_one: within_k(&pred, &truth, 1.0)?,
        icc_raters_only: icc(&matrix.complete_rows(&humans))?,
        icc_with_engine: icc(&matrix.complete_rows(&with_engine))?,
        confusion: confusion_and_error_histogram(&pred_bins, &truth)?,
        series,
    })
}

/// Side-by-side tables: correlation/error per dimension, then ICC with and
/// without the engine as an extra rater.
pub fn reports_to_markdown(reports: &[AgreementReport]) -> String {
    let mut out = String::from("## Agreement with expert consensus\n\n");
    out.push_str(
        "| Dimension | Items | Spearman rho [95% CI] | MAE | Within 1 |\n|---|---|---|---|---|\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "| {} | {} | {:.4} [{:.4}, {:.4}] | {:.3} | {:.2}% |",
            r.dimension.name(),
            r.items,
            r.spearman.rho,
            r.spearman.ci_low,
            r.spearman.ci_high,
            r.mae,
            100.0 * r.within_one
        );
    }
    out.push_str("\n## Intraclass correlation (two-way random, absolute agreement)\n\n");
    out.push_str("| Dimension | Form | Humans only | Humans + engine |\n|---|---|---|---|\n");
    for r in reports {
        let _ = writeln!(
            out,
            "| {} | single rater | {:.4} | {:.4} |",
            r.dimension.name(),
            r.icc_raters_only.single,
            r.icc_with_engine.single
        );
        let _ = writeln!(
            out,
            "| {} | average of raters | {:.4} | {:.4} |",
            r.dimension.name(),
            r.icc_raters_only.average,
            r.icc_with_engine.average
        );
    }
    out.push_str("\n## Confusion (rows: consensus bin, columns: engine score)\n\n");
    for r in reports {
        let _ = writeln!(out, "### {}\n", r.dimension.name());
        out.push_str("| | 0 | 1 | 2 | 3 | 4 | 5 |\n|---|---|---|---|---|---|---|\n");
        for (t, row) in r.confusion.matrix.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "| {t} | {} |", cells.join(" | "));
        }
        let hist: Vec<String> = r
            .confusion
            .abs_error_histogram
            .iter()
            .map(u64::to_string)
            .collect();
        let _ = writeln!(
            out,
            "\nAbsolute error histogram (0..5): {}\n",
            hist.join(", ")
        );
    }
    out
}

/// Plot series: one row per item and dimension.
pub fn plot_data_csv(reports: &[AgreementReport]) -> String {
    let mut out = String::from("dimension,item,consensus,engine,abs_error\n");
    for r in reports {
        for p in &r.series {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.dimension.name(),
                csv_field(&p.item),
                p.consensus,
                p.engine,
                (f64::from(p.engine) - p.consensus).abs()
            );
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Dimensions present in a parsed ratings file.
pub fn dimensions(matrices: &BTreeMap<Dimension, RatingsMatrix>) -> BTreeSet<Dimension> {
    matrices.keys().copied().collect()
}
