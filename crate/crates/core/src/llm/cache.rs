//! Memo of suggestion outcomes keyed by the topic's word set.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{Confidence, LlmError, Suggestion};

/// Sorted, comma-joined word list.
pub fn canonical_key<S: AsRef<str>>(words: &[S]) -> String {
    let mut w: Vec<&str> = words.iter().map(|s| s.as_ref()).collect();
    w.sort_unstable();
    w.join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CachedOutcome {
    Refined {
        suggestion: Suggestion,
        confidence: Confidence,
    },
    /// The completion could not be parsed into a usable suggestion.
    Failed { reason: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    outcome: CachedOutcome,
}

/// Concurrent map with optional append-only persistence. Later records in
/// the file override earlier ones.
#[derive(Debug, Default)]
pub struct SuggestionCache {
    map: RwLock<HashMap<String, CachedOutcome>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl SuggestionCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads existing records from `path` (if present) and appends new ones
    /// to it.
    pub fn persistent(path: &Path) -> Result<Self, LlmError> {
        let io = |e: std::io::Error| LlmError::CacheIo(format!("{}: {e}", path.display()));
        let mut map = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(r) => {
                        map.insert(r.key, r.outcome);
                    }
                    Err(e) => log::warn!("{}:{}: skipping bad cache record: {e}", path.display(), i + 1),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok(Self {
            map: RwLock::new(map),
            file: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<CachedOutcome> {
        self.map.read().expect("cache lock").get(key).cloned()
    }

    /// Stores in memory; a failed disk write is reported but the in-memory
    /// entry is kept.
    pub fn put(&self, key: &str, value: CachedOutcome) -> Result<(), LlmError> {
        self.map
            .write()
            .expect("cache lock")
            .insert(key.to_string(), value.clone());
        if let Some(file) = &self.file {
            let line = serde_json::to_string(&CacheRecord {
                key: key.to_string(),
                outcome: value,
            })
            .expect("cache record serializes");
            let mut f = file.lock().expect("cache file lock");
            writeln!(f, "{line}").map_err(|e| {
                LlmError::CacheIo(format!(
                    "{}: {e}",
                    self.path.as_deref().unwrap_or(Path::new("?")).display()
                ))
            })?;
        }
        Ok(())
    }
}
