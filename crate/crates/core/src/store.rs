//! Content-addressed artifact store.
//!
//! Layout under the root:
//! - `cards/<digest>.txt` canonical card text, plus `cards/index.json`
//!   mapping card ids to their latest digest.
//! - `policies/<digest>/` a saved policy package, plus `policies/index.json`.
//! - `runs/<run_id>/record.json` and the run's artifacts.
//!
//! Every write goes through a temp file and a rename.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::exec::write_atomic;
use crate::model_card::{parse_model_card, CardError, ModelCard};
use crate::policy::{load_package, save_package, PackageError, PolicyPackage};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown {kind} `{id}`")]
    NotFound { kind: &'static str, id: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt artifact {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("run status cannot go from {from:?} to {to:?}")]
    InvalidTransition { from: RunStatus, to: RunStatus },
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error("stored card is invalid: {0}")]
    Card(#[from] CardError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Complete,
    Failed,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Complete | RunStatus::Failed)
    }

    fn can_become(self, next: RunStatus) -> bool {
        use RunStatus::*;
        matches!(
            (self, next),
            (Pending, Running) | (Pending, Failed) | (Running, Complete) | (Running, Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub card_id: String,
    pub card_digest: String,
    pub policy_ids: Vec<String>,
    pub provider: String,
    pub status: RunStatus,
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    /// Phase name to wall time in milliseconds.
    pub timings: BTreeMap<String, u64>,
    /// Artifact name to path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(
        run_id: impl Into<String>,
        card: &ModelCard,
        policy_ids: Vec<String>,
        provider: impl Into<String>,
    ) -> RunRecord {
        RunRecord {
            run_id: run_id.into(),
            card_id: card.card_id.clone(),
            card_digest: card.digest(),
            policy_ids,
            provider: provider.into(),
            status: RunStatus::Pending,
            error: None,
            created_at: Utc::now(),
            timings: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn advance(&mut self, next: RunStatus) -> Result<(), StoreError> {
        if !self.status.can_become(next) {
            return Err(StoreError::InvalidTransition {
                from: self.status,
                to: next,
            });
        }
        self.status = next;
        Ok(())
    }

    pub fn fail(&mut self, reason: impl Into<String>) -> Result<(), StoreError> {
        self.advance(RunStatus::Failed)?;
        self.error = Some(reason.into());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardRef {
    pub card_id: String,
    pub digest: String,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRef {
    pub policy_id: String,
    pub full_name: String,
    pub jurisdiction: String,
    pub version: u64,
    pub digest: String,
    pub articles: usize,
}

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
    index_lock: Arc<Mutex<()>>,
}

const INDEX_FILE: &str = "index.json";
const RECORD_FILE: &str = "record.json";

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<ArtifactStore, StoreError> {
        let root = root.into();
        for sub in ["cards", "policies", "runs"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(ArtifactStore {
            root,
            index_lock: Arc::new(Mutex::new(())),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn read_index(&self, kind: &str) -> Result<BTreeMap<String, String>, StoreError> {
        let path = self.root.join(kind).join(INDEX_FILE);
        match fs::read_to_string(&path) {
            Ok(raw) => serde_json::from_str(&raw).map_err(|e| StoreError::Corrupt {
                path,
                reason: e.to_string(),
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(BTreeMap::new()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn update_index(&self, kind: &str, id: &str, digest: &str) -> Result<(), StoreError> {
        let _guard = self.index_lock.lock().expect("index lock poisoned");
        let mut index = self.read_index(kind)?;
        index.insert(id.to_string(), digest.to_string());
        let path = self.root.join(kind).join(INDEX_FILE);
        let body = serde_json::to_string_pretty(&index).expect("index serializes");
        write_atomic(&path, body.as_bytes()).map_err(io_err(&path))
    }

    pub fn put_card(&self, card: &ModelCard) -> Result<CardRef, StoreError> {
        let digest = card.digest();
        let path = self.root.join("cards").join(format!("{digest}.txt"));
        if !path.exists() {
            write_atomic(&path, card.to_canonical().as_bytes()).map_err(io_err(&path))?;
        }
        self.update_index("cards", &card.card_id, &digest)?;
        Ok(CardRef {
            card_id: card.card_id.clone(),
            digest,
            title: card.title.clone(),
        })
    }

    /// Look up a card by id (latest upload) or by content digest.
    pub fn card(&self, id_or_digest: &str) -> Result<ModelCard, StoreError> {
        let index = self.read_index("cards")?;
        let digest = match index.get(id_or_digest) {
            Some(d) => d.clone(),
            None if is_hex_digest(id_or_digest) => id_or_digest.to_string(),
            None => return Err(not_found("card", id_or_digest)),
        };
        let path = self.root.join("cards").join(format!("{digest}.txt"));
        let raw = match fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(not_found("card", id_or_digest))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        let card = parse_model_card(&raw)?;
        if card.digest() != digest {
            return Err(StoreError::Corrupt {
                path,
                reason: "card content does not match its digest".into(),
            });
        }
        Ok(card)
    }

    pub fn list_cards(&self) -> Result<Vec<CardRef>, StoreError> {
        self.read_index("cards")?
            .keys()
            .map(|id| {
                let card = self.card(id)?;
                Ok(CardRef {
                    card_id: card.card_id.clone(),
                    digest: card.digest(),
                    title: card.title.clone(),
                })
            })
            .collect()
    }

    pub fn package_digest(package: &PolicyPackage) -> String {
        let material = format!(
            "{}\n{}\n{}",
            package.version,
            package.document.to_json(),
            package.relevancy.to_csv()
        );
        sha256_hex(material.as_bytes())
    }

    pub fn put_policy(&self, package: &PolicyPackage) -> Result<PolicyRef, StoreError> {
        let digest = ArtifactStore::package_digest(package);
        let dir = self.root.join("policies").join(&digest);
        if !dir.join("manifest.json").exists() {
            save_package(package, &dir)?;
        }
        self.update_index("policies", package.policy_id(), &digest)?;
        Ok(policy_ref(package, digest))
    }

    pub fn policy(&self, policy_id: &str) -> Result<PolicyPackage, StoreError> {
        let index = self.read_index("policies")?;
        let digest = index
            .get(policy_id)
            .ok_or_else(|| not_found("policy", policy_id))?;
        Ok(load_package(&self.root.join("policies").join(digest))?)
    }

    pub fn list_policies(&self) -> Result<Vec<PolicyRef>, StoreError> {
        self.read_index("policies")?
            .iter()
            .map(|(id, digest)| Ok(policy_ref(&self.policy(id)?, digest.clone())))
            .collect()
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn save_run(&self, record: &RunRecord) -> Result<(), StoreError> {
        let dir = self.run_dir(&record.run_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(RECORD_FILE);
        let body = serde_json::to_string_pretty(record).expect("run record serializes");
        write_atomic(&path, body.as_bytes()).map_err(io_err(&path))
    }

    pub fn run(&self, run_id: &str) -> Result<RunRecord, StoreError> {
        if !is_safe_id(run_id) {
            return Err(not_found("run", run_id));
        }
        let path = self.run_dir(run_id).join(RECORD_FILE);
        let raw = match fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(not_found("run", run_id)),
            Err(e) => return Err(io_err(&path)(e)),
        };
        serde_json::from_str(&raw).map_err(|e| StoreError::Corrupt {
            path,
            reason: e.to_string(),
        })
    }

    pub fn list_runs(&self) -> Result<Vec<RunRecord>, StoreError> {
        let dir = self.root.join("runs");
        let mut runs = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            if let Some(name) = entry.file_name().to_str() {
                if entry.path().join(RECORD_FILE).exists() {
                    runs.push(self.run(name)?);
                }
            }
        }
        runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        Ok(runs)
    }

    /// Write `bytes` as `name` in the run directory and return its relative path.
    pub fn write_run_artifact(
        &self,
        run_id: &str,
        name: &str,
        bytes: &[u8],
    ) -> Result<String, StoreError> {
        let path = self.run_dir(run_id).join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        write_atomic(&path, bytes).map_err(io_err(&path))?;
        Ok(name.to_string())
    }

    pub fn read_run_artifact(&self, run_id: &str, name: &str) -> Result<String, StoreError> {
        if !is_safe_id(run_id) || name.split('/').any(|part| !is_safe_id(part)) {
            return Err(not_found("artifact", name));
        }
        let path = self.run_dir(run_id).join(name);
        match fs::read_to_string(&path) {
            Ok(body) => Ok(body),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(not_found("artifact", name)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Mark runs left pending or running by a previous process as failed.
    pub fn recover_interrupted(&self) -> Result<Vec<String>, StoreError> {
        let mut recovered = Vec::new();
        for mut record in self.list_runs()? {
            if !record.status.is_terminal() {
                record.fail("interrupted by service restart")?;
                self.save_run(&record)?;
                recovered.push(record.run_id);
            }
        }
        Ok(recovered)
    }
}

fn policy_ref(package: &PolicyPackage, digest: String) -> PolicyRef {
    PolicyRef {
        policy_id: package.document.policy_id.clone(),
        full_name: package.document.full_name.clone(),
        jurisdiction: package.document.jurisdiction.clone(),
        version: package.version,
        digest,
        articles: package.document.articles.len(),
    }
}

fn not_found(kind: &'static str, id: &str) -> StoreError {
    StoreError::NotFound {
        kind,
        id: id.to_string(),
    }
}

fn is_hex_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit())
}

fn is_safe_id(s: &str) -> bool {
    !s.is_empty()
        && s != "."
        && s != ".."
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"-_.".contains(&b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_card::SectionId;
    use crate::policy::test_support::doc;
    use crate::relevancy::{RelevancyMap, Thresholds};

    fn card() -> ModelCard {
        parse_model_card(include_str!("../fixtures/card_crop_health.txt")).unwrap()
    }

    fn package() -> PolicyPackage {
        let document = doc(
            "P",
            &[("1", &["Text about data."]), ("2", &["Other text."])],
        );
        let mut scores = BTreeMap::new();
        for section in SectionId::ALL {
            for article in ["1", "2"] {
                scores.insert((section, article.to_string()), vec![Some(3)]);
            }
        }
        let map =
            RelevancyMap::from_scores(&document, vec!["c".into()], Thresholds::default(), scores)
                .unwrap();
        PolicyPackage::new(document, map, 1).unwrap()
    }

    #[test]
    fn cards_and_policies_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let c = card();
        let r = store.put_card(&c).unwrap();
        assert_eq!(store.card(&r.card_id).unwrap(), c);
        assert_eq!(store.card(&r.digest).unwrap(), c);
        assert!(matches!(
            store.card("nope"),
            Err(StoreError::NotFound { .. })
        ));

        let p = package();
        let pr = store.put_policy(&p).unwrap();
        assert_eq!(store.policy("P").unwrap(), p);
        assert_eq!(store.list_policies().unwrap(), vec![pr.clone()]);
        // Same content, same address.
        assert_eq!(store.put_policy(&p).unwrap().digest, pr.digest);
    }

    #[test]
    fn run_status_is_monotone_and_restart_fails_running_runs() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let mut done = RunRecord::new("run-a", &card(), vec!["P".into()], "mock");
        done.advance(RunStatus::Running).unwrap();
        done.advance(RunStatus::Complete).unwrap();
        assert!(done.advance(RunStatus::Running).is_err());
        store.save_run(&done).unwrap();
        let mut live = RunRecord::new("run-b", &card(), vec!["P".into()], "mock");
        live.advance(RunStatus::Running).unwrap();
        store.save_run(&live).unwrap();

        let reopened = ArtifactStore::open(dir.path()).unwrap();
        assert_eq!(
            reopened.recover_interrupted().unwrap(),
            vec!["run-b".to_string()]
        );
        assert_eq!(reopened.run("run-a").unwrap().status, RunStatus::Complete);
        assert_eq!(reopened.run("run-b").unwrap().status, RunStatus::Failed);
    }

    #[test]
    fn artifact_paths_cannot_escape_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        store
            .write_run_artifact("run-x", "report.json", b"{}")
            .unwrap();
        assert_eq!(
            store.read_run_artifact("run-x", "report.json").unwrap(),
            "{}"
        );
        assert!(store
            .read_run_artifact("run-x", "../../cards/index.json")
            .is_err());
        assert!(store.run("..").is_err());
    }
}
