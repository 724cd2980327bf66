//! Request and response documents. Field names are stable; the CLI and the
//! web UI both decode these.

use std::collections::BTreeMap;

use acm_control::backend::Node;
use acm_control::events::EventRecord;
use acm_control::plane::JobView;
use acm_core::{CodeDigest, JobId, JobSpec, JobState, TaskRecord, Tick};
use acm_storage::WorkspaceEntry;
use serde::{Deserialize, Serialize};

/// Response header carrying the event sequence number of the state a
/// response was served from.
pub const SEQ_HEADER: &str = "x-acm-seq";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeUploaded {
    pub digest: CodeDigest,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSubmitted {
    pub job_id: JobId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobCanceled {
    pub job_id: JobId,
    pub state: JobState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: JobId,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principal: Option<String>,
    pub state: JobState,
    pub queue_position: Option<usize>,
    pub submitted_at: Tick,
    pub started_at: Option<Tick>,
    pub finished_at: Option<Tick>,
    pub task_count: usize,
    /// Tasks per state name.
    pub task_states: BTreeMap<String, usize>,
}

impl From<&JobView> for JobSummary {
    fn from(view: &JobView) -> Self {
        let r = &view.record;
        let mut task_states = BTreeMap::new();
        for t in &r.tasks {
            *task_states.entry(t.state.as_str().to_string()).or_insert(0) += 1;
        }
        Self {
            job_id: r.id,
            name: r.spec.name.clone(),
            principal: r.principal.clone(),
            state: r.state,
            queue_position: view.queue_position,
            submitted_at: r.submitted_at,
            started_at: r.started_at,
            finished_at: r.finished_at,
            task_count: r.tasks.len(),
            task_states,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobPage {
    pub jobs: Vec<JobSummary>,
    /// Pass as `cursor` to fetch the next page.
    pub next_cursor: Option<JobId>,
}

/// A full job record. `tasks` holds one page of tasks starting at
/// `task_offset`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobDetail {
    pub job_id: JobId,
    pub spec: JobSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principal: Option<String>,
    pub state: JobState,
    pub queue_position: Option<usize>,
    pub submitted_at: Tick,
    pub started_at: Option<Tick>,
    pub finished_at: Option<Tick>,
    pub task_count: usize,
    pub task_offset: usize,
    pub tasks: Vec<TaskRecord>,
    pub next_task_cursor: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogChunk {
    pub job_id: JobId,
    pub task: String,
    pub cursor: u64,
    pub next_cursor: u64,
    pub data: String,
    /// The job is terminal and `next_cursor` is at the end of the stream.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventPage {
    pub job_id: JobId,
    pub events: Vec<EventRecord>,
    pub last_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterNodes {
    pub tick: Tick,
    pub nodes: Vec<Node>,
    pub queue_depth: usize,
    pub pending_cleanups: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalingHistory {
    pub plans: Vec<EventRecord>,
}

/// Headline numbers for dashboards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterHealth {
    pub tick: Tick,
    pub seq: u64,
    pub queue_depth: usize,
    pub jobs_by_state: BTreeMap<String, usize>,
    pub nodes_by_state: BTreeMap<String, usize>,
    pub last_scaling: Option<EventRecord>,
    pub accepting_jobs: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkspaceFiles {
    pub workspace: String,
    pub entries: Vec<WorkspaceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    /// Machine-readable class, e.g. `NotFound` or `InvalidSpec`.
    pub code: String,
    pub message: String,
    /// Spec violations for `InvalidSpec`, each tagged with its own `code`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<serde_json::Value>,
}
