//! On-disk policy packages: one directory per policy.
//!
//! ```text
//! <dir>/document.json   structured PolicyDocument
//! <dir>/policy.md       rendered Article | Paragraph | Content table
//! <dir>/relevancy.csv   one row per (section, article) cell
//! <dir>/manifest.json   versions, source hash, file digests, thresholds
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::exec::write_atomic;
use crate::relevancy::{RelevancyError, RelevancyMap, Thresholds};

use super::{render_markdown_table, PolicyDocument, PolicyError};

pub const PACKAGE_SCHEMA_VERSION: u32 = 1;

const DOCUMENT_FILE: &str = "document.json";
const MARKDOWN_FILE: &str = "policy.md";
const RELEVANCY_FILE: &str = "relevancy.csv";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPackage {
    pub document: PolicyDocument,
    pub relevancy: RelevancyMap,
    pub version: u64,
}

impl PolicyPackage {
    /// Bundle a document with its map; the map must cover the document.
    pub fn new(
        document: PolicyDocument,
        relevancy: RelevancyMap,
        version: u64,
    ) -> Result<PolicyPackage, PackageError> {
        relevancy.check_coverage(&document)?;
        Ok(PolicyPackage {
            document,
            relevancy,
            version,
        })
    }

    pub fn policy_id(&self) -> &str {
        &self.document.policy_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    version: u64,
    policy_id: String,
    source_hash: String,
    calibration_card_ids: Vec<String>,
    thresholds: Thresholds,
    /// File name to sha256 of its bytes.
    files: BTreeMap<String, String>,
}

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("corrupt package at {path}: {reason}")]
    CorruptPackage { path: PathBuf, reason: String },
    #[error("package schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("relevancy map invalid: {0}")]
    Relevancy(#[from] RelevancyError),
    #[error("policy document invalid: {0}")]
    Policy(#[from] PolicyError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PackageError + '_ {
    move |source| PackageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_package(package: &PolicyPackage, dir: &Path) -> Result<(), PackageError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = [
        (DOCUMENT_FILE, package.document.to_json()),
        (MARKDOWN_FILE, render_markdown_table(&package.document)),
        (RELEVANCY_FILE, package.relevancy.to_csv()),
    ];
    let mut digests = BTreeMap::new();
    for (name, body) in &files {
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes()).map_err(io_err(&path))?;
        digests.insert(name.to_string(), sha256_hex(body.as_bytes()));
    }
    let manifest = Manifest {
        schema_version: PACKAGE_SCHEMA_VERSION,
        version: package.version,
        policy_id: package.document.policy_id.clone(),
        source_hash: package.document.source_hash.clone(),
        calibration_card_ids: package.relevancy.calibration_card_ids.clone(),
        thresholds: package.relevancy.thresholds,
        files: digests,
    };
    let path = dir.join(MANIFEST_FILE);
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&path, body.as_bytes()).map_err(io_err(&path))
}

pub fn load_package(dir: &Path) -> Result<PolicyPackage, PackageError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&raw).map_err(|source| PackageError::Json {
        path: manifest_path.clone(),
        source,
    })?;
    if manifest.schema_version != PACKAGE_SCHEMA_VERSION {
        return Err(PackageError::SchemaVersionMismatch {
            found: manifest.schema_version,
            expected: PACKAGE_SCHEMA_VERSION,
        });
    }
    let read_checked = |name: &str| -> Result<String, PackageError> {
        let path = dir.join(name);
        let body = fs::read_to_string(&path).map_err(io_err(&path))?;
        let expected = manifest
            .files
            .get(name)
            .ok_or_else(|| PackageError::CorruptPackage {
                path: path.clone(),
                reason: "file is not listed in the manifest".into(),
            })?;
        if sha256_hex(body.as_bytes()) != *expected {
            return Err(PackageError::CorruptPackage {
                path,
                reason: "content hash does not match the manifest".into(),
            });
        }
        Ok(body)
    };
    let document_json = read_checked(DOCUMENT_FILE)?;
    let document: PolicyDocument =
        serde_json::from_str(&document_json).map_err(|source| PackageError::Json {
            path: dir.join(DOCUMENT_FILE),
            source,
        })?;
    document.validate()?;
    if document.source_hash != manifest.source_hash || document.policy_id != manifest.policy_id {
        return Err(PackageError::CorruptPackage {
            path: dir.join(DOCUMENT_FILE),
            reason: "document identity differs from the manifest".into(),
        });
    }
    let markdown = read_checked(MARKDOWN_FILE)?;
    if markdown != render_markdown_table(&document) {
        return Err(PackageError::CorruptPackage {
            path: dir.join(MARKDOWN_FILE),
            reason: "rendered table does not match the document".into(),
        });
    }
    let relevancy = RelevancyMap::from_csv(
        &read_checked(RELEVANCY_FILE)?,
        &document,
        manifest.calibration_card_ids.clone(),
        manifest.thresholds,
    )?;
    PolicyPackage::new(document, relevancy, manifest.version)
}
