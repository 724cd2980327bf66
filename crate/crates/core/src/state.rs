//! Job and task lifecycle state machines.
//!
//! ```text
//!   Queued ──> Scheduling ──> Initializing ──> Running ──> Succeeded
//!     ^            │               │              │
//!     └────────────┘               └──────────────┴──────> Failed
//!   (bind rolled back)
//!
//!   any non-terminal state ──> Canceled
//! ```
//!
//! Illegal transitions leave the record untouched.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{JobId, NodeId, Tick};
use crate::spec::JobSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JobState {
    Queued,
    Scheduling,
    Initializing,
    Running,
    Succeeded,
    Failed,
    Canceled,
}

impl JobState {
    pub const ALL: [JobState; 7] = [
        JobState::Queued,
        JobState::Scheduling,
        JobState::Initializing,
        JobState::Running,
        JobState::Succeeded,
        JobState::Failed,
        JobState::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed | JobState::Canceled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "Queued",
            JobState::Scheduling => "Scheduling",
            JobState::Initializing => "Initializing",
            JobState::Running => "Running",
            JobState::Succeeded => "Succeeded",
            JobState::Failed => "Failed",
            JobState::Canceled => "Canceled",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for JobState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        JobState::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown job state {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskState {
    Pending,
    Initializing,
    Running,
    Succeeded,
    Failed,
    Terminated,
}

impl TaskState {
    pub const ALL: [TaskState; 6] = [
        TaskState::Pending,
        TaskState::Initializing,
        TaskState::Running,
        TaskState::Succeeded,
        TaskState::Failed,
        TaskState::Terminated,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Succeeded | TaskState::Failed | TaskState::Terminated)
    }

    /// Holding node resources.
    pub fn is_bound(self) -> bool {
        matches!(self, TaskState::Initializing | TaskState::Running)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Pending => "Pending",
            TaskState::Initializing => "Initializing",
            TaskState::Running => "Running",
            TaskState::Succeeded => "Succeeded",
            TaskState::Failed => "Failed",
            TaskState::Terminated => "Terminated",
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JobEvent {
    /// The scheduler picked the job for a gang placement attempt.
    BeginScheduling,
    /// Every task was bound. From `Queued` this passes through `Scheduling`.
    ResourcesBound,
    /// A bind failed part-way and was undone.
    BindRolledBack,
    AllTasksRunning,
    /// A task of the job exited. Does not by itself change the job state.
    TaskExit,
    AllTasksSucceeded,
    FailurePolicyExhausted,
    CancelRequested,
}

impl JobEvent {
    pub const ALL: [JobEvent; 8] = [
        JobEvent::BeginScheduling,
        JobEvent::ResourcesBound,
        JobEvent::BindRolledBack,
        JobEvent::AllTasksRunning,
        JobEvent::TaskExit,
        JobEvent::AllTasksSucceeded,
        JobEvent::FailurePolicyExhausted,
        JobEvent::CancelRequested,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskEvent {
    Bind(NodeId),
    /// Undo a bind that was rolled back before the task started.
    Unbind,
    Start,
    Exit(i32),
    InitFailed,
    Kill,
    Relaunch,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("illegal transition: {event} in state {state}")]
pub struct IllegalTransition {
    pub state: String,
    pub event: String,
}

impl IllegalTransition {
    fn new(state: impl fmt::Display, event: impl fmt::Debug) -> Self {
        Self {
            state: state.to_string(),
            event: format!("{event:?}"),
        }
    }
}

/// The job transition table.
pub fn next_job_state(state: JobState, event: JobEvent) -> Result<JobState, IllegalTransition> {
    use JobEvent as E;
    use JobState as S;
    let next = match (state, event) {
        (s, E::CancelRequested) if !s.is_terminal() => S::Canceled,
        (S::Queued, E::BeginScheduling) => S::Scheduling,
        (S::Queued | S::Scheduling, E::ResourcesBound) => S::Initializing,
        (S::Scheduling, E::BindRolledBack) => S::Queued,
        (S::Initializing, E::AllTasksRunning) => S::Running,
        (s @ (S::Initializing | S::Running), E::TaskExit) => s,
        (S::Initializing | S::Running, E::AllTasksSucceeded) => S::Succeeded,
        (S::Scheduling | S::Initializing | S::Running, E::FailurePolicyExhausted) => S::Failed,
        (s, e) => return Err(IllegalTransition::new(s, e)),
    };
    Ok(next)
}

/// The task transition table.
pub fn next_task_state(state: TaskState, event: &TaskEvent) -> Result<TaskState, IllegalTransition> {
    use TaskEvent as E;
    use TaskState as S;
    let next = match (state, event) {
        (S::Pending, E::Bind(_)) => S::Initializing,
        (S::Initializing, E::Unbind) => S::Pending,
        (S::Initializing, E::Start) => S::Running,
        (S::Initializing | S::Running, E::Exit(0)) => S::Succeeded,
        (S::Initializing | S::Running, E::Exit(_)) => S::Failed,
        (S::Initializing, E::InitFailed) => S::Failed,
        (S::Pending | S::Initializing | S::Running, E::Kill) => S::Terminated,
        (S::Failed, E::Relaunch) => S::Pending,
        (s, e) => return Err(IllegalTransition::new(s, e)),
    };
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition<S> {
    pub from: S,
    pub to: S,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_name: String,
    pub group: String,
    pub state: TaskState,
    pub node_id: Option<NodeId>,
    pub relaunch_count: u32,
    pub exit_code: Option<i32>,
}

impl TaskRecord {
    pub fn new(group: impl Into<String>, task_name: impl Into<String>) -> Self {
        Self {
            task_name: task_name.into(),
            group: group.into(),
            state: TaskState::Pending,
            node_id: None,
            relaunch_count: 0,
            exit_code: None,
        }
    }

    pub fn apply(&mut self, event: TaskEvent) -> Result<Transition<TaskState>, IllegalTransition> {
        let from = self.state;
        let to = next_task_state(from, &event)?;
        match event {
            TaskEvent::Bind(node) => {
                self.node_id = Some(node);
                self.exit_code = None;
            }
            TaskEvent::Unbind => self.node_id = None,
            TaskEvent::Exit(code) => self.exit_code = Some(code),
            TaskEvent::Relaunch => {
                self.relaunch_count += 1;
                self.node_id = None;
                self.exit_code = None;
            }
            TaskEvent::Kill if from == TaskState::Pending => self.node_id = None,
            TaskEvent::Start | TaskEvent::InitFailed | TaskEvent::Kill => {}
        }
        self.state = to;
        Ok(Transition { from, to })
    }

    /// Pending and never bound: part of a gang that has not been placed.
    pub fn is_unplaced(&self) -> bool {
        self.state == TaskState::Pending && self.relaunch_count == 0
    }

    /// Pending after a relaunch, waiting to be re-bound.
    pub fn awaiting_relaunch(&self) -> bool {
        self.state == TaskState::Pending && self.relaunch_count > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: JobId,
    pub spec: JobSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principal: Option<String>,
    pub state: JobState,
    pub tasks: Vec<TaskRecord>,
    pub submitted_at: Tick,
    pub started_at: Option<Tick>,
    pub finished_at: Option<Tick>,
}

impl JobRecord {
    /// A fresh `Queued` record with one `Pending` task per replica.
    pub fn new(id: JobId, spec: JobSpec, submitted_at: Tick) -> Self {
        let tasks = spec
            .tasks()
            .map(|(group, name)| TaskRecord::new(group.name.clone(), name))
            .collect();
        Self {
            id,
            spec,
            principal: None,
            state: JobState::Queued,
            tasks,
            submitted_at,
            started_at: None,
            finished_at: None,
        }
    }

    pub fn apply(&mut self, event: JobEvent, tick: Tick) -> Result<Transition<JobState>, IllegalTransition> {
        let from = self.state;
        let to = next_job_state(from, event)?;
        if to == JobState::Initializing && self.started_at.is_none() {
            self.started_at = Some(tick);
        }
        if to == JobState::Queued {
            self.started_at = None;
        }
        if to.is_terminal() {
            self.finished_at = Some(tick);
        }
        self.state = to;
        Ok(Transition { from, to })
    }

    pub fn task(&self, name: &str) -> Option<&TaskRecord> {
        self.tasks.iter().find(|t| t.task_name == name)
    }

    pub fn task_mut(&mut self, name: &str) -> Option<&mut TaskRecord> {
        self.tasks.iter_mut().find(|t| t.task_name == name)
    }

    pub fn all_tasks_in(&self, state: TaskState) -> bool {
        self.tasks.iter().all(|t| t.state == state)
    }

    /// Checks that the job state agrees with its task states.
    pub fn check_consistency(&self) -> Result<(), String> {
        let bad = |t: &TaskRecord| {
            Err(format!(
                "{} is {} but task {} is {}",
                self.id, self.state, t.task_name, t.state
            ))
        };
        for t in &self.tasks {
            if t.node_id.is_none() && t.state.is_bound() {
                return Err(format!(
                    "{} task {} is {} without a node",
                    self.id, t.task_name, t.state
                ));
            }
            let ok = match self.state {
                JobState::Queued | JobState::Scheduling => t.is_unplaced(),
                JobState::Initializing => {
                    !matches!(t.state, TaskState::Failed | TaskState::Terminated) && !t.is_unplaced()
                }
                JobState::Running => !matches!(t.state, TaskState::Failed | TaskState::Terminated) && !t.is_unplaced(),
                JobState::Succeeded => t.state == TaskState::Succeeded,
                JobState::Failed | JobState::Canceled => t.state.is_terminal(),
            };
            if !ok {
                return bad(t);
            }
        }
        if self.state == JobState::Running
            && self
                .tasks
                .iter()
                .any(|t| t.state == TaskState::Initializing && t.relaunch_count == 0)
        {
            return Err(format!("{} is Running before every task started", self.id));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resources::ResourceVector;
    use crate::spec::{FailurePolicy, Harness, TaskGroupSpec, TaskRole};

    fn record(replicas: u32) -> JobRecord {
        let spec = JobSpec {
            name: "j".into(),
            dataset_uri: None,
            workspace_uri: None,
            code_ref: None,
            task_groups: vec![TaskGroupSpec {
                name: "worker".into(),
                replicas,
                image: String::new(),
                instance_type: "t".into(),
                resources_per_replica: ResourceVector::cores(1, 0, 0),
                command: vec![],
                harness: Harness::Plain,
                role: TaskRole::Worker,
            }],
            failure_policy: FailurePolicy::TerminateAll,
            max_relaunches: 0,
        };
        JobRecord::new(JobId(1), spec, 0)
    }

    #[test]
    fn bind_from_queued_lands_in_initializing() {
        let mut job = record(2);
        let t = job.apply(JobEvent::ResourcesBound, 4).unwrap();
        assert_eq!((t.from, t.to), (JobState::Queued, JobState::Initializing));
        assert_eq!(job.started_at, Some(4));
    }

    #[test]
    fn cancel_from_running() {
        assert_eq!(
            next_job_state(JobState::Running, JobEvent::CancelRequested),
            Ok(JobState::Canceled)
        );
    }

    #[test]
    fn terminal_states_absorb() {
        let mut job = record(1);
        job.state = JobState::Succeeded;
        let before = job.clone();
        assert!(job.apply(JobEvent::TaskExit, 9).is_err());
        assert_eq!(job, before);
    }

    #[test]
    fn task_names_are_zero_indexed() {
        let job = record(3);
        let names: Vec<_> = job.tasks.iter().map(|t| t.task_name.as_str()).collect();
        assert_eq!(names, ["worker-0", "worker-1", "worker-2"]);
    }

    #[test]
    fn relaunch_keeps_the_name_and_clears_the_binding() {
        let mut task = TaskRecord::new("worker", "worker-1");
        task.apply(TaskEvent::Bind(NodeId::from("node-1"))).unwrap();
        task.apply(TaskEvent::Start).unwrap();
        task.apply(TaskEvent::Exit(137)).unwrap();
        assert_eq!(task.exit_code, Some(137));
        assert_eq!(task.node_id, Some(NodeId::from("node-1")));
        task.apply(TaskEvent::Relaunch).unwrap();
        assert_eq!(task.task_name, "worker-1");
        assert_eq!(task.relaunch_count, 1);
        assert_eq!(task.node_id, None);
        assert!(task.awaiting_relaunch());
    }

    /// Every (state, event) pair either lands inside the declared graph or
    /// is rejected without side effects.
    #[test]
    fn job_state_machine_is_closed() {
        let allowed: &[(JobState, JobState)] = &[
            (JobState::Queued, JobState::Scheduling),
            (JobState::Queued, JobState::Initializing),
            (JobState::Scheduling, JobState::Initializing),
            (JobState::Scheduling, JobState::Queued),
            (JobState::Initializing, JobState::Running),
            (JobState::Initializing, JobState::Initializing),
            (JobState::Running, JobState::Running),
            (JobState::Initializing, JobState::Succeeded),
            (JobState::Running, JobState::Succeeded),
            (JobState::Scheduling, JobState::Failed),
            (JobState::Initializing, JobState::Failed),
            (JobState::Running, JobState::Failed),
        ];
        for state in JobState::ALL {
            for event in JobEvent::ALL {
                let mut job = record(1);
                job.state = state;
                let before = job.clone();
                match job.apply(event, 1) {
                    Ok(t) => {
                        assert!(!state.is_terminal(), "{state:?} accepted {event:?}");
                        assert!(
                            t.to == JobState::Canceled || allowed.contains(&(t.from, t.to)),
                            "{state:?} --{event:?}--> {:?} not in graph",
                            t.to
                        );
                    }
                    Err(_) => assert_eq!(job, before),
                }
            }
        }
    }

    #[test]
    fn task_state_machine_is_closed() {
        let events = [
            TaskEvent::Bind(NodeId::from("n")),
            TaskEvent::Unbind,
            TaskEvent::Start,
            TaskEvent::Exit(0),
            TaskEvent::Exit(1),
            TaskEvent::InitFailed,
            TaskEvent::Kill,
            TaskEvent::Relaunch,
        ];
        for state in TaskState::ALL {
            for event in &events {
                let mut task = TaskRecord::new("g", "g-0");
                task.state = state;
                let before = task.clone();
                match task.apply(event.clone()) {
                    Ok(t) => {
                        if state.is_terminal() {
                            assert_eq!((state, event), (TaskState::Failed, &TaskEvent::Relaunch));
                        }
                        assert_ne!(t.to, t.from);
                    }
                    Err(_) => assert_eq!(task, before),
                }
            }
        }
    }

    #[test]
    fn consistency_catches_early_running() {
        let mut job = record(2);
        job.apply(JobEvent::ResourcesBound, 1).unwrap();
        for t in &mut job.tasks {
            t.apply(TaskEvent::Bind(NodeId::from("n"))).unwrap();
        }
        assert!(job.check_consistency().is_ok());
        job.state = JobState::Running;
        assert!(job.check_consistency().is_err());
    }
}
