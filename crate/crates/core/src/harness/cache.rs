use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::client::PROMPT_TEMPLATE_VERSION;
use crate::watermark::ConditionDescriptor;

pub const CACHE_FILE: &str = "replies.jsonl";

/// Cache key of one query: dataset, item, full condition descriptor, model and
/// prompt template version.
pub fn reply_key(dataset: &str, item_id: &str, condition: &ConditionDescriptor, model: &str) -> String {
    let material = serde_json::json!([
        dataset,
        item_id,
        condition,
        model,
        PROMPT_TEMPLATE_VERSION
    ]);
    hex::encode(Sha256::digest(material.to_string().as_bytes()))
}

/// One completed query, as stored in the reply log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedReply {
    pub key: String,
    pub model: String,
    pub dataset: String,
    pub item_id: String,
    pub condition_id: String,
    pub raw_text: String,
    pub latency_secs: f64,
    pub attempt_count: u32,
}

/// Replies loaded from an append-only JSONL log.
#[derive(Debug, Default)]
pub struct ReplyCache {
    entries: HashMap<String, CachedReply>,
}

impl ReplyCache {
    /// Loads `path` if it exists. Unparseable lines (such as a line cut short by a
    /// crash) are skipped with a warning.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut cache = ReplyCache::default();
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(cache),
            Err(source) => {
                return Err(HarnessError::Io {
                    path: path.to_path_buf(),
                    source,
                })
            }
        };
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| HarnessError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CachedReply>(&line) {
                Ok(r) => {
                    cache.entries.insert(r.key.clone(), r);
                }
                Err(e) => log::warn!("{}:{}: skipping unreadable cache line: {e}", path.display(), i + 1),
            }
        }
        Ok(cache)
    }

    pub fn get(&self, key: &str) -> Option<&CachedReply> {
        self.entries.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn insert(&mut self, reply: CachedReply) {
        self.entries.insert(reply.key.clone(), reply);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Append-only writer; every record is flushed before the next is accepted.
pub struct ReplyLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl ReplyLog {
    pub fn open(path: &Path) -> Result<Self, HarnessError> {
        let io = |source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).read(true).open(path).map_err(io)?;
        // a crash can leave a partial last line; terminate it so the next record parses
        let len = file.metadata().map_err(io)?.len();
        if len > 0 {
            use std::io::{Read, Seek, SeekFrom};
            let mut last = [0u8; 1];
            file.seek(SeekFrom::End(-1)).map_err(io)?;
            file.read_exact(&mut last).map_err(io)?;
            if last[0] != b'\n' {
                file.write_all(b"\n").map_err(io)?;
            }
        }
        Ok(ReplyLog {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, reply: &CachedReply) -> Result<(), HarnessError> {
        let line = serde_json::to_string(reply).expect("reply serializes");
        let io = |source| HarnessError::Io {
            path: self.path.clone(),
            source,
        };
        writeln!(self.out, "{line}").map_err(io)?;
        self.out.flush().map_err(io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::watermark::{Condition, PositionMode, WatermarkContent, WatermarkSpec};

    fn reply(key: &str) -> CachedReply {
        CachedReply {
            key: key.into(),
            model: "m".into(),
            dataset: "d".into(),
            item_id: "i".into(),
            condition_id: "c".into(),
            raw_text: "B".into(),
            latency_secs: 0.1,
            attempt_count: 1,
        }
    }

    #[test]
    fn keys_depend_on_every_part() {
        let clean = Condition::clean().descriptor();
        let mark = Condition::watermark(WatermarkSpec::new(WatermarkContent::text(), PositionMode::Center)).descriptor();
        let k = reply_key("d", "i", &clean, "m");
        assert_eq!(k, reply_key("d", "i", &clean, "m"));
        assert_eq!(k.len(), 64);
        for other in [
            reply_key("e", "i", &clean, "m"),
            reply_key("d", "j", &clean, "m"),
            reply_key("d", "i", &mark, "m"),
            reply_key("d", "i", &clean, "n"),
        ] {
            assert_ne!(k, other);
        }
    }

    #[test]
    fn log_round_trip_and_partial_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(CACHE_FILE);
        assert!(ReplyCache::load(&p).unwrap().is_empty());
        {
            let mut log = ReplyLog::open(&p).unwrap();
            log.append(&reply("a")).unwrap();
            log.append(&reply("b")).unwrap();
        }
        // simulate a crash mid-write
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        f.write_all(br#"{"key":"c","mod"#).unwrap();
        drop(f);
        let c = ReplyCache::load(&p).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get("a").unwrap().raw_text, "B");
        {
            let mut log = ReplyLog::open(&p).unwrap();
            log.append(&reply("d")).unwrap();
        }
        let c = ReplyCache::load(&p).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.contains("d") && !c.contains("c"));
    }
}
