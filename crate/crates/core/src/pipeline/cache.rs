use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RetryPolicy, RunOutcome};
use crate::backend::SamplingParams;
use crate::prompting::{PromptStyle, PromptTemplate};

/// Everything that determines a cached outcome.
#[derive(Debug, Clone, Serialize)]
pub struct CacheKeyFields<'a> {
    pub model_name: &'a str,
    pub style: PromptStyle,
    pub template_digest: String,
    pub shot_mode: &'a str,
    pub sampling: SamplingParams,
    pub policy: RetryPolicy,
    pub instance_id: &'a str,
    pub dataset_tag: &'a str,
    pub stage: &'a str,
}

pub(crate) fn template_digest(t: &PromptTemplate) -> String {
    let mut h = Sha256::new();
    for part in [&t.instruction_text, &t.retry_text, &t.delimiter] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(fields: &CacheKeyFields<'_>) -> Self {
        let canonical = serde_json::to_vec(fields).expect("key fields serialize");
        CacheKey(hex::encode(Sha256::digest(&canonical)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    key: CacheKey,
    outcome_digest: String,
    outcome: RunOutcome,
}

fn outcome_digest(outcome: &RunOutcome) -> String {
    hex::encode(Sha256::digest(
        serde_json::to_vec(outcome).expect("outcome serializes"),
    ))
}

/// Completed outcomes keyed by [`CacheKey`], optionally backed by an
/// append-only record-lines file. Each stored record carries a digest of its
/// outcome; records that fail verification on load are dropped.
#[derive(Debug, Default)]
pub struct OutcomeCache {
    entries: RwLock<HashMap<CacheKey, RunOutcome>>,
    file: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
    rejected: usize,
}

impl OutcomeCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (creating if needed) a cache file and load its valid records.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        let mut rejected = 0;
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(rec) if outcome_digest(&rec.outcome) == rec.outcome_digest => {
                        entries.insert(rec.key, rec.outcome);
                    }
                    _ => rejected += 1,
                }
            }
        }
        if rejected > 0 {
            log::warn!(
                "{}: ignored {rejected} unreadable or unverified cache records",
                path.display()
            );
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        // A crash may have left a partial last line; start fresh records on a new line.
        let len = file.metadata()?.len();
        if len > 0 {
            use std::io::{Read, Seek, SeekFrom};
            let mut last = [0u8; 1];
            let mut reader = File::open(path)?;
            reader.seek(SeekFrom::Start(len - 1))?;
            reader.read_exact(&mut last)?;
            if last[0] != b'\n' {
                file.write_all(b"\n")?;
            }
        }
        Ok(OutcomeCache {
            entries: RwLock::new(entries),
            file: Some(Mutex::new(BufWriter::new(file))),
            path: Some(path.to_path_buf()),
            rejected,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Records skipped while loading.
    pub fn rejected(&self) -> usize {
        self.rejected
    }

    pub fn get(&self, key: &CacheKey) -> Option<RunOutcome> {
        self.entries
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(key)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Store an outcome, appending and flushing it to the backing file first.
    pub fn insert(&self, key: CacheKey, outcome: RunOutcome) -> std::io::Result<()> {
        if let Some(file) = &self.file {
            let rec = CacheRecord {
                outcome_digest: outcome_digest(&outcome),
                key: key.clone(),
                outcome,
            };
            let mut out = file.lock().unwrap_or_else(|e| e.into_inner());
            serde_json::to_writer(&mut *out, &rec)?;
            out.write_all(b"\n")?;
            out.flush()?;
            self.entries
                .write()
                .unwrap_or_else(|e| e.into_inner())
                .insert(key, rec.outcome);
        } else {
            self.entries
                .write()
                .unwrap_or_else(|e| e.into_inner())
                .insert(key, outcome);
        }
        Ok(())
    }
}
