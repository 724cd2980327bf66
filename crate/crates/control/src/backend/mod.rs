//! Container-orchestration abstraction.
//!
//! The scheduler talks to a [`Backend`] only through launches, kills,
//! deletes and inventory reads, and learns about progress only through
//! [`BackendEvent`]s it drains once per loop iteration. Two implementations
//! exist: a deterministic tick-based simulator and a local-process runner.

mod inventory;
pub mod local;
pub mod sim;

use std::collections::BTreeSet;

use acm_core::{CodeDigest, Harness, InstanceType, JobId, NodeId, ResourceVector, Tick};
use acm_storage::MountRef;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::PreflightReport;

pub(crate) use inventory::Inventory;

/// Exit code reported for tasks that were running on a lost node.
pub const NODE_LOST_EXIT_CODE: i32 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeState {
    Booting,
    Ready,
    Terminating,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub node_id: NodeId,
    pub instance_type: String,
    pub capacity: ResourceVector,
    pub allocatable: ResourceVector,
    pub state: NodeState,
    /// Set while the node is Ready with nothing bound to it.
    pub idle_since: Option<Tick>,
    pub running_tasks: BTreeSet<(JobId, String)>,
}

impl Node {
    pub fn is_idle(&self) -> bool {
        self.state == NodeState::Ready && self.running_tasks.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendEventKind {
    NodeReady {
        node: NodeId,
    },
    InitCompleted {
        job: JobId,
        task: String,
        report: PreflightReport,
    },
    TaskStarted {
        job: JobId,
        task: String,
    },
    TaskExited {
        job: JobId,
        task: String,
        code: i32,
    },
    NodeLost {
        node: NodeId,
    },
    DeleteConfirmed {
        job: JobId,
    },
}

/// Events are totally ordered by `(tick, seq)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEvent {
    pub tick: Tick,
    pub seq: u64,
    #[serde(flatten)]
    pub kind: BackendEventKind,
}

/// Everything the init container needs for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitRequest {
    pub job_id: JobId,
    pub task_name: String,
    pub node_id: NodeId,
    pub resources: ResourceVector,
    pub code_ref: Option<CodeDigest>,
    pub dataset: Option<MountRef>,
    pub workspace: Option<MountRef>,
    /// Set for tasks that take part in an MPI rendezvous.
    pub rendezvous: Option<RendezvousTicket>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RendezvousTicket {
    pub endpoint: String,
    pub generation: u64,
    /// Rank by lexicographic task name among the job's MPI tasks.
    pub rank: u32,
}

/// The user task container, launched after a passing init.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskLaunch {
    pub job_id: JobId,
    pub task_name: String,
    pub node_id: NodeId,
    pub image: String,
    pub command: Vec<String>,
    pub harness: Harness,
    pub dataset: Option<MountRef>,
    pub workspace: Option<MountRef>,
    pub rendezvous: Option<RendezvousTicket>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("node {0} is not ready")]
    NodeNotReady(NodeId),
    #[error("node {node} cannot fit {requested}; {allocatable} allocatable")]
    InsufficientAllocatable {
        node: NodeId,
        requested: ResourceVector,
        allocatable: ResourceVector,
    },
    #[error("unknown task {job}/{task}")]
    UnknownTask { job: JobId, task: String },
    #[error("task {job}/{task} is already launched")]
    AlreadyLaunched { job: JobId, task: String },
    #[error("launch of {job}/{task} rejected: {reason}")]
    LaunchRejected { job: JobId, task: String, reason: String },
    #[error("delete of {job} refused: {reason}")]
    DeleteRefused { job: JobId, reason: String },
    #[error("spawn failed: {0}")]
    SpawnFailed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("quota exceeded for instance type {0}")]
    QuotaExceeded(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} still has bound tasks")]
    NodeBusy(NodeId),
}

/// Instance lifecycle, as a cloud provider API would expose it.
pub trait InstanceProvider {
    /// Starts a node of `instance_type`; it is Booting until its boot delay
    /// elapses.
    fn launch_instance(&mut self, instance_type: &InstanceType) -> Result<NodeId, ProviderError>;

    /// Terminates a node. Refused while tasks are bound to it.
    fn terminate_instance(&mut self, node: &NodeId) -> Result<(), ProviderError>;
}

pub trait Backend: InstanceProvider {
    fn now(&self) -> Tick;

    /// Advances the backend clock by `ticks`, realizing boots, scripted
    /// exits and faults due in that window.
    fn advance(&mut self, ticks: Tick);

    /// Reserves the task's resources on its node and starts the init
    /// container. Reports back with [`BackendEventKind::InitCompleted`].
    fn launch_init(&mut self, request: InitRequest) -> Result<(), BackendError>;

    /// Starts the user container for a task whose init passed.
    fn launch_task(&mut self, launch: TaskLaunch) -> Result<(), BackendError>;

    /// Stops a task and releases its resources. Unknown tasks are ignored.
    fn kill(&mut self, job: JobId, task: &str) -> Result<(), BackendError>;

    /// Deletes every object tagged with `job`. Idempotent; returns how many
    /// objects were removed.
    fn delete_all(&mut self, job: JobId) -> Result<usize, BackendError>;

    fn inventory(&self) -> Vec<Node>;

    /// Stable address of a started task, valid until it exits.
    fn resolve(&self, job: JobId, task: &str) -> Result<String, BackendError>;

    /// Objects (containers, name registrations, mounts) still tagged with
    /// `job`.
    fn object_count(&self, job: JobId) -> usize;

    fn drain_events(&mut self) -> Vec<BackendEvent>;
}
