//! Append-only log streams, one per (job, task), read by byte cursor.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use acm_core::JobId;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::StorageError;

/// Position in one task's log stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LogCursor {
    pub job_id: JobId,
    pub task_name: String,
    pub byte_offset: u64,
}

impl LogCursor {
    pub fn start(job_id: JobId, task_name: impl Into<String>) -> Self {
        Self {
            job_id,
            task_name: task_name.into(),
            byte_offset: 0,
        }
    }
}

type StreamKey = (JobId, String);

#[derive(Default)]
struct Stream {
    bytes: RwLock<Vec<u8>>,
}

/// Stream registry. Appends to one stream are serialized by that stream's
/// lock; distinct streams never contend after creation.
#[derive(Default)]
pub struct LogStore {
    streams: RwLock<BTreeMap<StreamKey, Arc<Stream>>>,
}

impl LogStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn stream(&self, job: JobId, task: &str) -> Option<Arc<Stream>> {
        self.streams.read().get(&(job, task.to_string())).cloned()
    }

    /// Appends to a stream, creating it on first use.
    pub fn append(&self, job: JobId, task: &str, bytes: &[u8]) {
        let stream = match self.stream(job, task) {
            Some(s) => s,
            None => self.streams.write().entry((job, task.to_string())).or_default().clone(),
        };
        stream.bytes.write().extend_from_slice(bytes);
    }

    /// Reads up to `max_bytes` from the cursor. At the end of the stream
    /// returns no bytes and the same cursor.
    pub fn read(&self, cursor: &LogCursor, max_bytes: usize) -> Result<(Vec<u8>, LogCursor), StorageError> {
        let stream = self
            .stream(cursor.job_id, &cursor.task_name)
            .ok_or_else(|| StorageError::UnknownStream(format!("{}/{}", cursor.job_id, cursor.task_name)))?;
        let data = stream.bytes.read();
        let start = usize::try_from(cursor.byte_offset)
            .unwrap_or(usize::MAX)
            .min(data.len());
        let end = start.saturating_add(max_bytes).min(data.len());
        let chunk = data[start..end].to_vec();
        let next = LogCursor {
            byte_offset: end as u64,
            ..cursor.clone()
        };
        Ok((chunk, next))
    }

    pub fn len(&self, job: JobId, task: &str) -> Option<u64> {
        self.stream(job, task).map(|s| s.bytes.read().len() as u64)
    }

    /// Task names with a stream for `job`, sorted.
    pub fn tasks(&self, job: JobId) -> Vec<String> {
        self.streams
            .read()
            .keys()
            .filter(|(j, _)| *j == job)
            .map(|(_, t)| t.clone())
            .collect()
    }

    /// Every byte of every stream, for audits that scan logs for secrets.
    pub fn all_bytes(&self) -> Vec<u8> {
        let streams = self.streams.read();
        streams.values().flat_map(|s| s.bytes.read().clone()).collect()
    }
}

/// Append-only newline-delimited record log, optionally mirrored to a file.
pub struct RecordLog {
    lines: RwLock<Vec<String>>,
    file: Mutex<Option<File>>,
}

impl Default for RecordLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl RecordLog {
    pub fn in_memory() -> Self {
        Self {
            lines: RwLock::new(Vec::new()),
            file: Mutex::new(None),
        }
    }

    pub fn with_file(path: &Path) -> Result<Self, StorageError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            lines: RwLock::new(Vec::new()),
            file: Mutex::new(Some(file)),
        })
    }

    pub fn append<T: Serialize>(&self, record: &T) -> Result<u64, StorageError> {
        let line = serde_json::to_string(record).map_err(|e| StorageError::Encode(e.to_string()))?;
        self.append_line(line)
    }

    pub fn append_line(&self, line: String) -> Result<u64, StorageError> {
        debug_assert!(!line.contains('\n'));
        if let Some(file) = self.file.lock().as_mut() {
            writeln!(file, "{line}")?;
        }
        let mut lines = self.lines.write();
        lines.push(line);
        Ok(lines.len() as u64)
    }

    pub fn len(&self) -> usize {
        self.lines.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lines_from(&self, index: usize) -> Vec<String> {
        self.lines.read().iter().skip(index).cloned().collect()
    }

    /// The whole log as newline-terminated bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let lines = self.lines.read();
        let mut out = Vec::new();
        for l in lines.iter() {
            out.extend_from_slice(l.as_bytes());
            out.push(b'\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn appends_concatenate() {
        let logs = LogStore::new();
        logs.append(JobId(1), "worker-0", b"a");
        logs.append(JobId(1), "worker-0", b"b");
        let (bytes, next) = logs.read(&LogCursor::start(JobId(1), "worker-0"), 1024).unwrap();
        assert_eq!(bytes, b"ab");
        assert_eq!(next.byte_offset, 2);
    }

    #[test]
    fn read_at_end_is_empty_and_keeps_cursor() {
        let logs = LogStore::new();
        logs.append(JobId(1), "t", b"xyz");
        let (_, end) = logs.read(&LogCursor::start(JobId(1), "t"), 1024).unwrap();
        let (bytes, again) = logs.read(&end, 1024).unwrap();
        assert!(bytes.is_empty());
        assert_eq!(again, end);
    }

    #[test]
    fn streams_are_isolated() {
        let logs = LogStore::new();
        for i in 0..10 {
            logs.append(JobId(1), "worker-0", format!("w0-{i}\n").as_bytes());
            logs.append(JobId(1), "worker-1", format!("w1-{i}\n").as_bytes());
        }
        let (w1, _) = logs.read(&LogCursor::start(JobId(1), "worker-1"), 1 << 20).unwrap();
        let text = String::from_utf8(w1).unwrap();
        assert!(text.lines().all(|l| l.starts_with("w1-")));
        assert_eq!(logs.tasks(JobId(1)), ["worker-0", "worker-1"]);
    }

    #[test]
    fn unknown_stream() {
        let logs = LogStore::new();
        assert!(matches!(
            logs.read(&LogCursor::start(JobId(9), "x"), 1),
            Err(StorageError::UnknownStream(_))
        ));
    }

    #[test]
    fn max_bytes_limits_the_chunk() {
        let logs = LogStore::new();
        logs.append(JobId(1), "t", b"0123456789");
        let (a, c) = logs.read(&LogCursor::start(JobId(1), "t"), 4).unwrap();
        let (b, _) = logs.read(&c, 4).unwrap();
        assert_eq!((a.as_slice(), b.as_slice()), (&b"0123"[..], &b"4567"[..]));
    }

    #[test]
    fn record_log_mirrors_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let log = RecordLog::with_file(&path).unwrap();
        log.append(&serde_json::json!({"tick": 1})).unwrap();
        log.append(&serde_json::json!({"tick": 2})).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), log.to_bytes());
        assert_eq!(log.lines_from(1), [r#"{"tick":2}"#]);
    }
}
