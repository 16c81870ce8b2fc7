//! Response cache keyed by a SHA-256 of the request content.
//!
//! Entries live in memory and, when a directory is configured, one JSON file
//! per key (`<key>.json`) written via temp file + rename.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::wire::TokenLogprob;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Default)]
pub struct ResponseCache {
    memory: RwLock<HashMap<String, CachedResponse>>,
    dir: Option<PathBuf>,
    write_lock: Mutex<()>,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Write `bytes` to `path` atomically.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "tmp.{}.{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ResponseCache {
            dir: Some(dir),
            ..Default::default()
        })
    }

    fn file(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> Option<CachedResponse> {
        if let Some(hit) = self.memory.read().unwrap_or_else(|p| p.into_inner()).get(key) {
            return Some(hit.clone());
        }
        let path = self.file(key)?;
        let text = std::fs::read_to_string(&path).ok()?;
        match serde_json::from_str::<CachedResponse>(&text) {
            Ok(hit) => {
                self.memory
                    .write()
                    .unwrap_or_else(|p| p.into_inner())
                    .insert(key.to_string(), hit.clone());
                Some(hit)
            }
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {}: {e}", path.display());
                None
            }
        }
    }

    pub fn put(&self, key: &str, value: &CachedResponse) -> Result<()> {
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(path) = self.file(key) {
            write_atomic(&path, &serde_json::to_vec(value)?)?;
        }
        self.memory
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(key.to_string(), value.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.memory.read().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
