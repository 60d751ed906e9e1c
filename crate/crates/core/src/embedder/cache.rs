//! Content-addressed embedding cache.
//!
//! Entries are keyed by `sha256(model_id || 0x00 || text)`. When backed by a
//! file, each entry is one JSONL record appended with a single write, so a
//! crash can at worst leave a truncated final line. Unreadable lines are
//! skipped on load and the vectors get recomputed.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EmbeddingVector;
use crate::error::{Error, Result};

pub fn cache_key(model_id: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(model_id.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct Record {
    text_hash: String,
    model: String,
    vector: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, Vec<f64>>>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates on first insert) a cache file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let Ok(line) = line else {
                    log::warn!("{}: unreadable line {}, dropped", path.display(), n + 1);
                    continue;
                };
                match serde_json::from_str::<Record>(&line) {
                    Ok(r)
                        if r.text_hash.len() == 64
                            && !r.vector.is_empty()
                            && r.vector.iter().all(|v| v.is_finite()) =>
                    {
                        entries.insert(r.text_hash, r.vector);
                    }
                    _ => log::warn!(
                        "{}: corrupt entry on line {}, dropped",
                        path.display(),
                        n + 1
                    ),
                }
            }
        }
        Ok(EmbeddingCache {
            path: Some(path),
            entries: Mutex::new(entries),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, model_id: &str, text: &str) -> Option<EmbeddingVector> {
        let key = cache_key(model_id, text);
        self.entries
            .lock()
            .unwrap()
            .get(&key)
            .map(|v| EmbeddingVector::from_normalized(v.clone()))
    }

    pub fn insert(&self, model_id: &str, text: &str, vector: &EmbeddingVector) -> Result<()> {
        let key = cache_key(model_id, text);
        let mut entries = self.entries.lock().unwrap();
        if entries.contains_key(&key) {
            return Ok(());
        }
        if let Some(path) = &self.path {
            let record = Record {
                text_hash: key.clone(),
                model: model_id.to_string(),
                vector: vector.values().to_vec(),
            };
            let mut line = serde_json::to_vec(&record).expect("record serializes");
            line.push(b'\n');
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            file.write_all(&line).map_err(|e| Error::io(path, e))?;
        }
        entries.insert(key, vector.values().to_vec());
        Ok(())
    }
}
