//! Structured event log: state transitions, scaling decisions, cleanup
//! audits and alerts, one JSON record per line. Sequence numbers start at 1
//! and are shared by every record kind.

use std::collections::BTreeMap;

use acm_core::{JobId, NodeId, Tick};
use acm_storage::{RecordLog, StorageError};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventRecord {
    Transition {
        seq: u64,
        tick: Tick,
        job_id: JobId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        task_name: Option<String>,
        /// `None` for the submission record.
        old_state: Option<String>,
        new_state: String,
        reason: String,
    },
    Scaling {
        seq: u64,
        tick: Tick,
        demand: BTreeMap<String, u32>,
        launches: BTreeMap<String, u32>,
        terminations: Vec<NodeId>,
        rationale: Vec<String>,
    },
    Cleanup {
        seq: u64,
        tick: Tick,
        job_id: JobId,
        attempt: u32,
        removed: usize,
        residual: usize,
        complete: bool,
    },
    Alert {
        seq: u64,
        tick: Tick,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        job_id: Option<JobId>,
        alert: String,
        message: String,
    },
}

impl EventRecord {
    pub fn seq(&self) -> u64 {
        match self {
            EventRecord::Transition { seq, .. }
            | EventRecord::Scaling { seq, .. }
            | EventRecord::Cleanup { seq, .. }
            | EventRecord::Alert { seq, .. } => *seq,
        }
    }

    pub fn tick(&self) -> Tick {
        match self {
            EventRecord::Transition { tick, .. }
            | EventRecord::Scaling { tick, .. }
            | EventRecord::Cleanup { tick, .. }
            | EventRecord::Alert { tick, .. } => *tick,
        }
    }

    pub fn job_id(&self) -> Option<JobId> {
        match self {
            EventRecord::Transition { job_id, .. } | EventRecord::Cleanup { job_id, .. } => Some(*job_id),
            EventRecord::Alert { job_id, .. } => *job_id,
            EventRecord::Scaling { .. } => None,
        }
    }
}

/// Append-only, shareable between the control loop (writer) and readers.
#[derive(Default)]
pub struct EventLog {
    records: RwLock<Vec<EventRecord>>,
    mirror: Option<RecordLog>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also appends every record to `mirror`.
    pub fn with_mirror(mirror: RecordLog) -> Self {
        Self {
            records: RwLock::new(Vec::new()),
            mirror: Some(mirror),
        }
    }

    /// Appends the record built from the next sequence number.
    pub fn push(&self, build: impl FnOnce(u64) -> EventRecord) -> u64 {
        let mut records = self.records.write();
        let seq = records.len() as u64 + 1;
        let record = build(seq);
        debug_assert_eq!(record.seq(), seq);
        if let Some(m) = &self.mirror {
            if let Err(e) = m.append(&record) {
                tracing::warn!("event mirror append failed: {e}");
            }
        }
        records.push(record);
        seq
    }

    /// Sequence number of the last record, 0 when empty.
    pub fn last_seq(&self) -> u64 {
        self.records.read().len() as u64
    }

    pub fn len(&self) -> usize {
        self.records.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<EventRecord> {
        self.records.read().clone()
    }

    /// Records with `seq` in `(after, up_to]`.
    pub fn range(&self, after: u64, up_to: u64) -> Vec<EventRecord> {
        let records = self.records.read();
        let lo = (after as usize).min(records.len());
        let hi = (up_to as usize).clamp(lo, records.len());
        records[lo..hi].to_vec()
    }

    pub fn for_job(&self, job: JobId, up_to: u64) -> Vec<EventRecord> {
        self.range(0, up_to)
            .into_iter()
            .filter(|r| r.job_id() == Some(job))
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String, StorageError> {
        let mut out = String::new();
        for r in self.records.read().iter() {
            out.push_str(&serde_json::to_string(r).map_err(|e| StorageError::Encode(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }
}
