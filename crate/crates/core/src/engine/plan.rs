//! Article clustering and batch planning.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::llm::{prompts, Gateway};
use crate::model_card::SectionId;
use crate::policy::PolicyDocument;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub label: String,
    pub articles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: String,
    pub policy_id: String,
    pub section: SectionId,
    pub articles: Vec<String>,
    pub cluster_label: String,
}

/// Document-order chunks of at most `max_cluster` articles.
pub fn fallback_clusters(policy: &PolicyDocument, max_cluster: usize) -> Vec<Cluster> {
    policy
        .article_numbers()
        .chunks(max_cluster.max(1))
        .enumerate()
        .map(|(i, chunk)| Cluster {
            label: format!("chunk-{}", i + 1),
            articles: chunk.to_vec(),
        })
        .collect()
}

#[derive(Deserialize)]
struct Grouping {
    clusters: Vec<Cluster>,
}

/// Check that `clusters` partition the policy's articles; restore document
/// order inside each cluster and split clusters above `max_cluster`.
pub fn validate_clusters(
    policy: &PolicyDocument,
    clusters: Vec<Cluster>,
    max_cluster: usize,
) -> Result<Vec<Cluster>, String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for cluster in clusters {
        let mut indexed = Vec::with_capacity(cluster.articles.len());
        for article in &cluster.articles {
            let index = policy
                .article_index(article)
                .ok_or_else(|| format!("unknown article `{article}`"))?;
            if !seen.insert(index) {
                return Err(format!("article `{article}` appears in two clusters"));
            }
            indexed.push((index, article.clone()));
        }
        if indexed.is_empty() {
            continue;
        }
        indexed.sort();
        let articles: Vec<String> = indexed.into_iter().map(|(_, a)| a).collect();
        for chunk in articles.chunks(max_cluster.max(1)) {
            out.push(Cluster {
                label: cluster.label.clone(),
                articles: chunk.to_vec(),
            });
        }
    }
    if seen.len() != policy.articles.len() {
        let missing: Vec<&str> = policy
            .articles
            .iter()
            .enumerate()
            .filter(|(i, _)| !seen.contains(i))
            .map(|(_, a)| a.number.as_str())
            .collect();
        return Err(format!(
            "articles missing from grouping: {}",
            missing.join(", ")
        ));
    }
    Ok(out)
}

fn parse_grouping(text: &str) -> Result<Vec<Cluster>, String> {
    let start = text.find('{').ok_or("no JSON object in grouping answer")?;
    let end = text.rfind('}').ok_or("no JSON object in grouping answer")?;
    if end < start {
        return Err("no JSON object in grouping answer".into());
    }
    serde_json::from_str::<Grouping>(&text[start..=end])
        .map(|g| g.clusters)
        .map_err(|e| format!("grouping is not valid JSON: {e}"))
}

/// Ask the provider to group related articles. Any failure, including a
/// grouping that is not a partition, falls back to document-order chunks.
/// The flag reports whether the fallback was used.
pub fn cluster_articles(
    policy: &PolicyDocument,
    gateway: &Gateway,
    scope: &str,
    max_cluster: usize,
) -> (Vec<Cluster>, bool) {
    let request = prompts::clustering_request(policy, max_cluster);
    let result = gateway
        .complete(scope, &request)
        .map_err(|e| e.to_string())
        .and_then(|c| parse_grouping(&c.text))
        .and_then(|clusters| validate_clusters(policy, clusters, max_cluster));
    match result {
        Ok(clusters) => (clusters, false),
        Err(reason) => {
            tracing::warn!(policy = %policy.policy_id, %reason, "clustering fell back to document order");
            (fallback_clusters(policy, max_cluster), true)
        }
    }
}

/// Group kept pairs into per-section batches.
///
/// For each section, the kept articles of each cluster form a segment.
/// Segments above `max_batch` are split into near-equal pieces of at most
/// `target` articles; adjacent segments are then merged while the merged size
/// stays within `max_batch`.
pub fn plan_batches(
    policy_id: &str,
    kept: &[(SectionId, String)],
    clusters: &[Cluster],
    max_batch: usize,
    target: usize,
) -> Vec<Batch> {
    let max_batch = max_batch.max(1);
    let target = target.clamp(1, max_batch);
    let mut by_section: BTreeMap<SectionId, HashSet<&str>> = BTreeMap::new();
    for (section, article) in kept {
        by_section
            .entry(*section)
            .or_default()
            .insert(article.as_str());
    }
    let mut batches = Vec::new();
    for (section, articles) in by_section {
        let mut segments: Vec<(String, Vec<String>)> = Vec::new();
        for cluster in clusters {
            let members: Vec<String> = cluster
                .articles
                .iter()
                .filter(|a| articles.contains(a.as_str()))
                .cloned()
                .collect();
            if members.is_empty() {
                continue;
            }
            if members.len() <= max_batch {
                segments.push((cluster.label.clone(), members));
                continue;
            }
            let pieces = members.len().div_ceil(target);
            let base = members.len() / pieces;
            let extra = members.len() % pieces;
            let mut rest = members.as_slice();
            for i in 0..pieces {
                let size = base + usize::from(i < extra);
                let (head, tail) = rest.split_at(size);
                segments.push((cluster.label.clone(), head.to_vec()));
                rest = tail;
            }
        }
        let mut merged: Vec<(String, Vec<String>)> = Vec::new();
        for (label, members) in segments {
            match merged.last_mut() {
                Some((prev_label, prev)) if prev.len() + members.len() <= max_batch => {
                    if *prev_label != label {
                        prev_label.push('+');
                        prev_label.push_str(&label);
                    }
                    prev.extend(members);
                }
                _ => merged.push((label, members)),
            }
        }
        for (n, (label, members)) in merged.into_iter().enumerate() {
            batches.push(Batch {
                batch_id: format!("{policy_id}-s{:02}-b{:02}", section.index() + 1, n + 1),
                policy_id: policy_id.to_string(),
                section,
                articles: members,
                cluster_label: label,
            });
        }
    }
    batches
}
