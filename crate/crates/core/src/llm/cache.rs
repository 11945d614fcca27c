use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use crate::digest::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Miss,
}

/// Content-addressed store of cached prompt contexts.
///
/// Pricing discounts for cached reads are not modeled; the cache only tells
/// the ledger (and a live provider) that a context has been sent before.
#[derive(Debug, Default)]
pub struct PromptCache {
    entries: RwLock<HashMap<String, Arc<str>>>,
    spill_dir: Option<PathBuf>,
}

impl PromptCache {
    pub fn new() -> PromptCache {
        PromptCache::default()
    }

    /// Also write each new context to `<dir>/<digest>.txt`.
    pub fn with_spill_dir(dir: impl Into<PathBuf>) -> PromptCache {
        PromptCache {
            entries: RwLock::default(),
            spill_dir: Some(dir.into()),
        }
    }

    pub fn observe(&self, context: &str) -> CacheOutcome {
        let digest = sha256_hex(context.as_bytes());
        if self.contains(&digest) {
            return CacheOutcome::Hit;
        }
        let mut entries = self.entries.write().expect("prompt cache lock poisoned");
        if entries.contains_key(&digest) {
            return CacheOutcome::Hit;
        }
        if let Some(dir) = &self.spill_dir {
            let path = dir.join(format!("{digest}.txt"));
            if path.exists() {
                entries.insert(digest, Arc::from(context));
                return CacheOutcome::Hit;
            }
            if let Err(err) = fs::create_dir_all(dir).and_then(|_| fs::write(&path, context)) {
                tracing::warn!(path = %path.display(), %err, "prompt cache spill failed");
            }
        }
        entries.insert(digest, Arc::from(context));
        CacheOutcome::Miss
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.entries
            .read()
            .expect("prompt cache lock poisoned")
            .contains_key(digest)
    }

    pub fn get(&self, digest: &str) -> Option<Arc<str>> {
        self.entries
            .read()
            .expect("prompt cache lock poisoned")
            .get(digest)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.entries
            .read()
            .expect("prompt cache lock poisoned")
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
