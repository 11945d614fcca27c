//! The 23-section compliance model card.
//!
//! A card is the system-side input to every comparison. Two input formats are
//! accepted: the canonical card text (one `## Category :: Section` record per
//! section) and a spreadsheet export with the header `Category,Section,Content`.
//! Both end up in the same validated [`ModelCard`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;

/// Marker for sections that do not apply to the system.
pub const NOT_APPLICABLE: &str = "N/A";

pub const CSV_HEADER: &str = "Category,Section,Content";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    GeneralInformation,
    IntendedUse,
    ExistingComplianceInformation,
    SystemDataInformation,
    SystemPerformanceAndEvaluation,
    EthicalConsiderations,
    MaintenanceAndMonitoring,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::GeneralInformation,
        Category::IntendedUse,
        Category::ExistingComplianceInformation,
        Category::SystemDataInformation,
        Category::SystemPerformanceAndEvaluation,
        Category::EthicalConsiderations,
        Category::MaintenanceAndMonitoring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::GeneralInformation => "General Information",
            Category::IntendedUse => "Intended Use",
            Category::ExistingComplianceInformation => "Existing Compliance Information",
            Category::SystemDataInformation => "System Data Information",
            Category::SystemPerformanceAndEvaluation => "System Performance and Evaluation",
            Category::EthicalConsiderations => "Ethical Considerations",
            Category::MaintenanceAndMonitoring => "Maintenance and Monitoring",
        }
    }

    pub fn from_name(name: &str) -> Option<Category> {
        let name = name.trim();
        Category::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One of the 23 model card sections. Variant order is the canonical
/// section order used everywhere (serialization, heatmap rows, report rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SectionId {
    SystemName,
    VersioningInformation,
    PrimaryDeveloperOrg,
    ContactInformation,
    SystemOverview,
    PrimaryIntendedUses,
    PrimaryIntendedUsers,
    OutOfScopeUseCases,
    TermsAndConditions,
    CurrentLegalComplianceStatus,
    DatasetDescription,
    CollectionMethod,
    BiasMitigationMeasures,
    UsageConstraints,
    SummaryOfPerformance,
    DisaggregatedPerformance,
    TestingContexts,
    EdgeAdversarialTesting,
    PotentialRisksAndHarms,
    ActionsTaken,
    MisuseScenarios,
    HumanOversight,
    UpdateFrequency,
}

impl SectionId {
    pub const COUNT: usize = 23;

    pub const ALL: [SectionId; 23] = [
        SectionId::SystemName,
        SectionId::VersioningInformation,
        SectionId::PrimaryDeveloperOrg,
        SectionId::ContactInformation,
        SectionId::SystemOverview,
        SectionId::PrimaryIntendedUses,
        SectionId::PrimaryIntendedUsers,
        SectionId::OutOfScopeUseCases,
        SectionId::TermsAndConditions,
        SectionId::CurrentLegalComplianceStatus,
        SectionId::DatasetDescription,
        SectionId::CollectionMethod,
        SectionId::BiasMitigationMeasures,
        SectionId::UsageConstraints,
        SectionId::SummaryOfPerformance,
        SectionId::DisaggregatedPerformance,
        SectionId::TestingContexts,
        SectionId::EdgeAdversarialTesting,
        SectionId::PotentialRisksAndHarms,
        SectionId::ActionsTaken,
        SectionId::MisuseScenarios,
        SectionId::HumanOversight,
        SectionId::UpdateFrequency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SectionId::SystemName => "System Name",
            SectionId::VersioningInformation => "Versioning Information",
            SectionId::PrimaryDeveloperOrg => "Primary Developer/Org",
            SectionId::ContactInformation => "Contact Information",
            SectionId::SystemOverview => "System Overview",
            SectionId::PrimaryIntendedUses => "Primary Intended Uses",
            SectionId::PrimaryIntendedUsers => "Primary Intended Users",
            SectionId::OutOfScopeUseCases => "Out-of-Scope Use Cases",
            SectionId::TermsAndConditions => "Terms and Conditions",
            SectionId::CurrentLegalComplianceStatus => "Current legal compliance status",
            SectionId::DatasetDescription => "Dataset Description",
            SectionId::CollectionMethod => "Collection Method",
            SectionId::BiasMitigationMeasures => "Bias Mitigation Measures",
            SectionId::UsageConstraints => "Usage Constraints",
            SectionId::SummaryOfPerformance => "Summary of Performance",
            SectionId::DisaggregatedPerformance => "Disaggregated Performance",
            SectionId::TestingContexts => "Testing Contexts",
            SectionId::EdgeAdversarialTesting => "Edge/Adversarial Testing",
            SectionId::PotentialRisksAndHarms => "Potential Risks and Harms",
            SectionId::ActionsTaken => "Actions Taken",
            SectionId::MisuseScenarios => "Misuse Scenarios",
            SectionId::HumanOversight => "Human Oversight",
            SectionId::UpdateFrequency => "Update Frequency",
        }
    }

    pub fn category(self) -> Category {
        use SectionId::*;
        match self {
            SystemName
            | VersioningInformation
            | PrimaryDeveloperOrg
            | ContactInformation
            | SystemOverview => Category::GeneralInformation,
            PrimaryIntendedUses | PrimaryIntendedUsers | OutOfScopeUseCases => {
                Category::IntendedUse
            }
            TermsAndConditions | CurrentLegalComplianceStatus => {
                Category::ExistingComplianceInformation
            }
            DatasetDescription | CollectionMethod | BiasMitigationMeasures | UsageConstraints => {
                Category::SystemDataInformation
            }
            SummaryOfPerformance
            | DisaggregatedPerformance
            | TestingContexts
            | EdgeAdversarialTesting => Category::SystemPerformanceAndEvaluation,
            PotentialRisksAndHarms | ActionsTaken | MisuseScenarios => {
                Category::EthicalConsiderations
            }
            HumanOversight | UpdateFrequency => Category::MaintenanceAndMonitoring,
        }
    }

    /// Position in the canonical order (0..23).
    pub fn index(self) -> usize {
        self as usize
    }

    /// Advisory word-count band from the card template, if one is given.
    pub fn word_guidance(self) -> Option<(usize, usize)> {
        use SectionId::*;
        Some(match self {
            SystemName => (1, 19),
            VersioningInformation => (40, 60),
            PrimaryDeveloperOrg => (20, 30),
            ContactInformation => (10, 20),
            SystemOverview => (40, 60),
            PrimaryIntendedUses => (30, 50),
            PrimaryIntendedUsers => (25, 35),
            OutOfScopeUseCases => (30, 50),
            TermsAndConditions => (25, 40),
            CurrentLegalComplianceStatus => (30, 50),
            DatasetDescription => (40, 60),
            CollectionMethod => (30, 45),
            BiasMitigationMeasures => (30, 45),
            UsageConstraints => return None,
            SummaryOfPerformance => (30, 45),
            DisaggregatedPerformance => (30, 50),
            TestingContexts => (30, 50),
            EdgeAdversarialTesting => (30, 45),
            PotentialRisksAndHarms => (30, 45),
            ActionsTaken => (30, 50),
            MisuseScenarios => (30, 50),
            HumanOversight => (30, 45),
            UpdateFrequency => (25, 40),
        })
    }

    pub fn from_name(name: &str) -> Option<SectionId> {
        let name = name.trim();
        SectionId::ALL
            .into_iter()
            .find(|s| s.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for SectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SectionId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SectionId::from_name(s).ok_or_else(|| format!("unknown model card section `{s}`"))
    }
}

impl Serialize for SectionId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for SectionId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCard {
    pub card_id: String,
    pub title: String,
    pub created_at: Option<DateTime<Utc>>,
    sections: BTreeMap<SectionId, String>,
}

impl ModelCard {
    /// Build a card from a complete section mapping.
    pub fn new(
        card_id: impl Into<String>,
        title: impl Into<String>,
        created_at: Option<DateTime<Utc>>,
        sections: BTreeMap<SectionId, String>,
    ) -> Result<ModelCard, ValidationReport> {
        let mut report = ValidationReport::default();
        for id in SectionId::ALL {
            match sections.get(&id) {
                None => report.missing.push(id.name().to_string()),
                Some(text) if normalize_content(text).is_empty() => {
                    report.empty.push(id.name().to_string())
                }
                Some(_) => {}
            }
        }
        if !report.is_clean() {
            return Err(report);
        }
        let sections = sections
            .into_iter()
            .map(|(k, v)| (k, normalize_content(&v)))
            .collect();
        Ok(ModelCard {
            card_id: card_id.into(),
            title: title.into(),
            created_at,
            sections,
        })
    }

    pub fn section_content(&self, id: SectionId) -> &str {
        // Construction guarantees totality.
        &self.sections[&id]
    }

    pub fn sections(&self) -> impl Iterator<Item = (SectionId, &str)> {
        self.sections.iter().map(|(k, v)| (*k, v.as_str()))
    }

    pub fn is_not_applicable(&self, id: SectionId) -> bool {
        self.section_content(id) == NOT_APPLICABLE
    }

    /// Content digest over the canonical serialization.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_canonical().as_bytes())
    }

    /// Word-count guidance violations. Advisory only.
    pub fn word_count_warnings(&self) -> Vec<WordCountWarning> {
        self.sections()
            .filter(|(_, text)| *text != NOT_APPLICABLE)
            .filter_map(|(id, text)| {
                let (min, max) = id.word_guidance()?;
                let words = text.split_whitespace().count();
                (words < min || words > max).then_some(WordCountWarning {
                    section: id,
                    words,
                    min,
                    max,
                })
            })
            .collect()
    }

    /// Deterministic canonical text, sections in canonical order.
    pub fn to_canonical(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("card_id: {}\n", self.card_id));
        out.push_str(&format!("title: {}\n", self.title));
        if let Some(ts) = self.created_at {
            out.push_str(&format!(
                "created_at: {}\n",
                ts.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
            ));
        }
        for (id, text) in self.sections() {
            out.push('\n');
            out.push_str(&format!("## {} :: {}\n", id.category().name(), id.name()));
            if text.starts_with('#') || text.starts_with('\\') {
                out.push('\\');
            }
            out.push_str(text);
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(["Category", "Section", "Content"])
            .expect("in-memory csv write");
        for (id, text) in self.sections() {
            writer
                .write_record([id.category().name(), id.name(), text])
                .expect("in-memory csv write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory csv flush"))
            .expect("csv output is utf-8")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordCountWarning {
    pub section: SectionId,
    pub words: usize,
    pub min: usize,
    pub max: usize,
}

/// Everything wrong with a card that otherwise parsed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub missing: Vec<String>,
    pub unknown: Vec<String>,
    pub duplicate: Vec<String>,
    pub empty: Vec<String>,
    /// `(section, category given)` where the category disagrees with the schema.
    pub miscategorized: Vec<(String, String)>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty()
            && self.unknown.is_empty()
            && self.duplicate.is_empty()
            && self.empty.is_empty()
            && self.miscategorized.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if !self.missing.is_empty() {
            parts.push(format!("missing sections: {}", self.missing.join(", ")));
        }
        if !self.unknown.is_empty() {
            parts.push(format!("unknown sections: {}", self.unknown.join(", ")));
        }
        if !self.duplicate.is_empty() {
            parts.push(format!("duplicate sections: {}", self.duplicate.join(", ")));
        }
        if !self.empty.is_empty() {
            parts.push(format!(
                "empty sections (use N/A): {}",
                self.empty.join(", ")
            ));
        }
        for (section, category) in &self.miscategorized {
            parts.push(format!("section `{section}` filed under `{category}`"));
        }
        f.write_str(&parts.join("; "))
    }
}

#[derive(Debug, Error)]
pub enum CardError {
    #[error("malformed card document at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("invalid model card: {0}")]
    Invalid(ValidationReport),
}

impl CardError {
    pub fn report(&self) -> Option<&ValidationReport> {
        match self {
            CardError::Invalid(report) => Some(report),
            CardError::Malformed { .. } => None,
        }
    }
}

/// Collapse every whitespace run to a single space and trim.
pub fn normalize_content(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

struct RawRecord {
    category: String,
    section: String,
    content: String,
}

/// Parse the canonical card text.
///
/// ```text
/// card_id: crop-health-monitor
/// title: Crop Health Monitor
/// created_at: 2025-12-03T00:00:00Z
///
/// ## General Information :: System Name
/// Crop Health Monitor
/// ```
pub fn parse_model_card(raw: &str) -> Result<ModelCard, CardError> {
    let mut meta: BTreeMap<String, String> = BTreeMap::new();
    let mut records: Vec<RawRecord> = Vec::new();

    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if let Some(heading) = line.strip_prefix("## ") {
            let (category, section) =
                heading
                    .split_once("::")
                    .ok_or_else(|| CardError::Malformed {
                        line: line_no,
                        message: "section heading must read `## <Category> :: <Section>`".into(),
                    })?;
            records.push(RawRecord {
                category: category.trim().to_string(),
                section: section.trim().to_string(),
                content: String::new(),
            });
            continue;
        }
        match records.last_mut() {
            Some(record) => {
                let body = line.strip_prefix('\\').unwrap_or(line);
                record.content.push_str(body);
                record.content.push('\n');
            }
            None => {
                let trimmed = line.trim();
                if trimmed.is_empty() || trimmed.starts_with("# ") {
                    continue;
                }
                let (key, value) = trimmed
                    .split_once(':')
                    .ok_or_else(|| CardError::Malformed {
                        line: line_no,
                        message: format!("expected `key: value` metadata, found `{trimmed}`"),
                    })?;
                let key = key.trim().to_ascii_lowercase();
                if !matches!(key.as_str(), "card_id" | "title" | "created_at") {
                    return Err(CardError::Malformed {
                        line: line_no,
                        message: format!("unknown metadata key `{key}`"),
                    });
                }
                meta.insert(key, value.trim().to_string());
            }
        }
    }

    let created_at = match meta.get("created_at") {
        Some(raw_ts) => Some(
            DateTime::parse_from_rfc3339(raw_ts)
                .map_err(|e| CardError::Malformed {
                    line: 0,
                    message: format!("created_at `{raw_ts}`: {e}"),
                })?
                .with_timezone(&Utc),
        ),
        None => None,
    };
    let non_empty = |key: &str| meta.get(key).filter(|v| !v.is_empty()).cloned();
    build_card(
        records,
        non_empty("card_id"),
        non_empty("title"),
        created_at,
    )
}

/// Parse a spreadsheet export with header `Category,Section,Content`.
pub fn parse_model_card_csv(raw: &str) -> Result<ModelCard, CardError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(raw.as_bytes());
    let mut rows = reader.records();
    let header = rows
        .next()
        .ok_or_else(|| CardError::Malformed {
            line: 1,
            message: "empty document".into(),
        })?
        .map_err(|e| CardError::Malformed {
            line: 1,
            message: e.to_string(),
        })?;
    let header_text = header.iter().collect::<Vec<_>>().join(",");
    if header_text.trim_start_matches('\u{feff}') != CSV_HEADER {
        return Err(CardError::Malformed {
            line: 1,
            message: format!("header must be exactly `{CSV_HEADER}`"),
        });
    }
    let mut records = Vec::new();
    for (idx, row) in rows.enumerate() {
        let row = row.map_err(|e| CardError::Malformed {
            line: idx + 2,
            message: e.to_string(),
        })?;
        if row.iter().all(|cell| cell.trim().is_empty()) {
            continue;
        }
        if row.len() != 3 {
            return Err(CardError::Malformed {
                line: idx + 2,
                message: format!("expected 3 columns, found {}", row.len()),
            });
        }
        records.push(RawRecord {
            category: row[0].trim().to_string(),
            section: row[1].trim().to_string(),
            content: row[2].to_string(),
        });
    }
    build_card(records, None, None, None)
}

/// Dispatch on content: the CSV header selects the tabular path.
pub fn parse_any(raw: &str) -> Result<ModelCard, CardError> {
    if raw
        .trim_start_matches('\u{feff}')
        .trim_start()
        .starts_with(CSV_HEADER)
    {
        parse_model_card_csv(raw)
    } else {
        parse_model_card(raw)
    }
}

fn build_card(
    records: Vec<RawRecord>,
    card_id: Option<String>,
    title: Option<String>,
    created_at: Option<DateTime<Utc>>,
) -> Result<ModelCard, CardError> {
    let mut report = ValidationReport::default();
    let mut sections = BTreeMap::new();
    for record in records {
        let Some(id) = SectionId::from_name(&record.section) else {
            report.unknown.push(record.section);
            continue;
        };
        match Category::from_name(&record.category) {
            Some(category) if category == id.category() => {}
            _ => report
                .miscategorized
                .push((id.name().to_string(), record.category.clone())),
        }
        let content = normalize_content(&record.content);
        if content.is_empty() {
            report.empty.push(id.name().to_string());
        }
        if sections.insert(id, content).is_some() {
            report.duplicate.push(id.name().to_string());
        }
    }
    for id in SectionId::ALL {
        if !sections.contains_key(&id) {
            report.missing.push(id.name().to_string());
        }
    }
    if !report.is_clean() {
        return Err(CardError::Invalid(report));
    }

    let title = title.unwrap_or_else(|| sections[&SectionId::SystemName].clone());
    let card_id = card_id.unwrap_or_else(|| {
        let mut body = String::new();
        for (id, text) in &sections {
            body.push_str(id.name());
            body.push('\u{1f}');
            body.push_str(text);
            body.push('\u{1e}');
        }
        format!("card-{}", &sha256_hex(body.as_bytes())[..12])
    });
    ModelCard::new(card_id, title, created_at, sections).map_err(CardError::Invalid)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn full_card_text(skip: Option<SectionId>, extra: Option<(&str, &str)>) -> String {
        let mut out = String::from("card_id: t1\ntitle: Test\n\n");
        for id in SectionId::ALL {
            if Some(id) == skip {
                continue;
            }
            let content = match id {
                SectionId::SystemName => "Crop Health Monitor".to_string(),
                SectionId::TermsAndConditions => "N/A".to_string(),
                other => format!("Content for {}.", other.name()),
            };
            out.push_str(&format!(
                "## {} :: {}\n{}\n\n",
                id.category(),
                id.name(),
                content
            ));
        }
        if let Some((category, section)) = extra {
            out.push_str(&format!("## {category} :: {section}\nsomething\n"));
        }
        out
    }

    #[test]
    fn section_list_matches_schema() {
        let names: Vec<&str> = SectionId::ALL.iter().map(|s| s.name()).collect();
        assert_eq!(
            names,
            vec![
                "System Name",
                "Versioning Information",
                "Primary Developer/Org",
                "Contact Information",
                "System Overview",
                "Primary Intended Uses",
                "Primary Intended Users",
                "Out-of-Scope Use Cases",
                "Terms and Conditions",
                "Current legal compliance status",
                "Dataset Description",
                "Collection Method",
                "Bias Mitigation Measures",
                "Usage Constraints",
                "Summary of Performance",
                "Disaggregated Performance",
                "Testing Contexts",
                "Edge/Adversarial Testing",
                "Potential Risks and Harms",
                "Actions Taken",
                "Misuse Scenarios",
                "Human Oversight",
                "Update Frequency",
            ]
        );
        let mut per_category = BTreeMap::new();
        for id in SectionId::ALL {
            *per_category.entry(id.category()).or_insert(0) += 1;
            assert_eq!(
                id.index(),
                SectionId::ALL.iter().position(|s| *s == id).unwrap()
            );
        }
        let counts: Vec<usize> = Category::ALL.iter().map(|c| per_category[c]).collect();
        assert_eq!(counts, vec![5, 3, 2, 4, 4, 3, 2]);
    }

    #[test]
    fn complete_card_parses() {
        let card = parse_model_card(&full_card_text(None, None)).unwrap();
        assert_eq!(card.sections().count(), 23);
        assert_eq!(
            card.section_content(SectionId::SystemName),
            "Crop Health Monitor"
        );
        assert_eq!(card.section_content(SectionId::TermsAndConditions), "N/A");
        assert!(card.is_not_applicable(SectionId::TermsAndConditions));
        for id in SectionId::ALL {
            assert!(!card.section_content(id).is_empty());
        }
    }

    #[test]
    fn missing_section_is_reported() {
        let err = parse_model_card(&full_card_text(Some(SectionId::SystemName), None)).unwrap_err();
        let report = err.report().unwrap();
        assert_eq!(report.missing, vec!["System Name".to_string()]);
        assert!(report.unknown.is_empty());
    }

    #[test]
    fn unknown_section_is_reported() {
        let err = parse_model_card(&full_card_text(
            None,
            Some(("General Information", "Budget")),
        ))
        .unwrap_err();
        let report = err.report().unwrap();
        assert_eq!(report.unknown, vec!["Budget".to_string()]);
        assert!(report.missing.is_empty());
    }

    #[test]
    fn empty_content_must_say_na() {
        let text = full_card_text(None, None).replace("Content for Actions Taken.", "   ");
        let report = parse_model_card(&text)
            .unwrap_err()
            .report()
            .cloned()
            .unwrap();
        assert_eq!(report.empty, vec!["Actions Taken".to_string()]);
    }

    #[test]
    fn wrong_category_is_reported() {
        let text = full_card_text(None, None).replace(
            "## Intended Use :: Primary Intended Users",
            "## General Information :: Primary Intended Users",
        );
        let report = parse_model_card(&text)
            .unwrap_err()
            .report()
            .cloned()
            .unwrap();
        assert_eq!(report.miscategorized.len(), 1);
    }

    #[test]
    fn malformed_heading_and_metadata() {
        assert!(matches!(
            parse_model_card("## System Name\nfoo\n"),
            Err(CardError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            parse_model_card("just some prose\n"),
            Err(CardError::Malformed { .. })
        ));
        assert!(matches!(
            parse_model_card("color: blue\n"),
            Err(CardError::Malformed { .. })
        ));
    }

    #[test]
    fn csv_import_matches_canonical() {
        let card = parse_model_card(&full_card_text(None, None)).unwrap();
        let from_csv = parse_model_card_csv(&card.to_csv()).unwrap();
        for id in SectionId::ALL {
            assert_eq!(card.section_content(id), from_csv.section_content(id));
        }
        assert_eq!(from_csv.title, "Crop Health Monitor");
        assert!(from_csv.card_id.starts_with("card-"));
        assert!(parse_any(&card.to_csv()).is_ok());
    }

    #[test]
    fn csv_header_must_be_exact() {
        let bad = "category,section,content\nGeneral Information,System Name,x\n";
        assert!(matches!(
            parse_model_card_csv(bad),
            Err(CardError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn csv_missing_section() {
        let card = parse_model_card(&full_card_text(None, None)).unwrap();
        let csv_text: String = card
            .to_csv()
            .lines()
            .filter(|l| !l.contains("Update Frequency"))
            .map(|l| format!("{l}\n"))
            .collect();
        let report = parse_model_card_csv(&csv_text)
            .unwrap_err()
            .report()
            .cloned()
            .unwrap();
        assert_eq!(report.missing, vec!["Update Frequency".to_string()]);
    }

    #[test]
    fn heading_like_content_is_escaped() {
        let text =
            full_card_text(None, None).replace("Content for Actions Taken.", "## not a heading");
        let card = parse_model_card(&text).unwrap_err();
        // An unescaped `##` line is a heading, so the card is malformed.
        assert!(matches!(card, CardError::Malformed { .. }));

        let escaped =
            full_card_text(None, None).replace("Content for Actions Taken.", "\\## literal hashes");
        let card = parse_model_card(&escaped).unwrap();
        assert_eq!(
            card.section_content(SectionId::ActionsTaken),
            "## literal hashes"
        );
        let again = parse_model_card(&card.to_canonical()).unwrap();
        assert_eq!(again, card);
    }

    #[test]
    fn word_count_warnings_are_advisory() {
        let card = parse_model_card(&full_card_text(None, None)).unwrap();
        let warnings = card.word_count_warnings();
        // "Content for X." is far below every 25+ word band.
        assert!(warnings
            .iter()
            .any(|w| w.section == SectionId::SystemOverview));
        assert!(!warnings.iter().any(|w| w.section == SectionId::SystemName));
        assert!(!warnings
            .iter()
            .any(|w| w.section == SectionId::TermsAndConditions));
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn content_strategy() -> impl Strategy<Value = String> {
        prop_oneof![
            Just("N/A".to_string()),
            "[A-Za-z0-9#\\\\ ,.:;()\\-\t\n]{1,80}".prop_filter("non-blank", |s| !s
                .split_whitespace()
                .collect::<Vec<_>>()
                .is_empty()),
        ]
    }

    proptest! {
        #[test]
        fn canonical_round_trip(contents in proptest::collection::vec(content_strategy(), 23)) {
            let sections: BTreeMap<SectionId, String> =
                SectionId::ALL.into_iter().zip(contents).collect();
            let card = ModelCard::new("c", "T", None, sections).unwrap();
            let text = card.to_canonical();
            let parsed = parse_model_card(&text).unwrap();
            prop_assert_eq!(&parsed, &card);
            prop_assert_eq!(parsed.to_canonical(), text);
        }

        #[test]
        fn parsing_is_total(raw in "(?s).{0,400}") {
            let _ = parse_model_card(&raw);
            let _ = parse_model_card_csv(&raw);
        }
    }
}
