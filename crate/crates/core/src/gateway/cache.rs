//! Persistent result cache keyed by `(model_id, op, payload digest)`.
//!
//! Stored as an append-only JSONL file; on load the last valid entry for a
//! key wins and unparseable lines are ignored, so a corrupt entry is simply
//! recomputed and re-appended.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::protocol::Op;
use crate::corpus::CorpusError;

pub const CACHE_FILE: &str = "gateway-cache.jsonl";

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    result: Value,
}

pub struct ScoreCache {
    path: PathBuf,
    entries: Mutex<HashMap<String, Value>>,
    writer: Mutex<BufWriter<File>>,
}

impl ScoreCache {
    pub fn open(dir: &Path) -> Result<Self, CorpusError> {
        fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        let path = dir.join(CACHE_FILE);
        let mut entries = HashMap::new();
        if let Ok(file) = File::open(&path) {
            for line in BufReader::new(file).lines().map_while(Result::ok) {
                if let Ok(entry) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert(entry.key, entry.result);
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CorpusError::io(&path, e))?;
        Ok(ScoreCache {
            path,
            entries: Mutex::new(entries),
            writer: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn key(model_id: &str, op: Op, payload: &Value) -> String {
        let mut h = Sha256::new();
        h.update(model_id.as_bytes());
        h.update([0x1f]);
        h.update(op.as_str().as_bytes());
        h.update([0x1f]);
        h.update(
            serde_json::to_string(payload)
                .expect("payload serializes")
                .as_bytes(),
        );
        hex::encode(h.finalize())
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn put(&self, key: String, result: Value) -> std::io::Result<()> {
        let line = serde_json::to_string(&CacheLine {
            key: key.clone(),
            result: result.clone(),
        })
        .expect("cache line serializes");
        {
            let mut w = self.writer.lock().expect("cache writer lock");
            writeln!(w, "{line}")?;
        }
        self.entries.lock().expect("cache lock").insert(key, result);
        Ok(())
    }

    pub fn flush(&self) -> std::io::Result<()> {
        self.writer.lock().expect("cache writer lock").flush()
    }
}

impl Drop for ScoreCache {
    fn drop(&mut self) {
        if let Ok(mut w) = self.writer.lock() {
            let _ = w.flush();
        }
    }
}
