//! FIFO job queue with gang placement, lifecycle supervision, failure
//! policies and stateless cleanup.
//!
//! The scheduler owns every job record. It is driven by one loop: backend
//! events, submissions, cancels and periodic passes arrive in order and are
//! handled to completion, so the invariants hold between any two calls.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use acm_core::packing::pack_into_bins;
use acm_core::{
    FailurePolicy, Harness, InstanceCatalog, InstanceType, JobEvent, JobId, JobRecord, JobSpec, JobState, NodeId,
    ResourceVector, TaskEvent, TaskState, Tick, Transition,
};
use acm_storage::MountRef;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    Backend, BackendEvent, BackendEventKind, InitRequest, Node, NodeState, RendezvousTicket, TaskLaunch,
};
use crate::events::{EventLog, EventRecord};
use crate::harness::RendezvousServer;

/// Longest wait between cleanup retries.
pub const MAX_CLEANUP_BACKOFF: Tick = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub backfill_enabled: bool,
    pub schedule_interval_ticks: Tick,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            backfill_enabled: false,
            schedule_interval_ticks: 1,
        }
    }
}

/// Bindings for every task of a job (gang placement) or for tasks awaiting
/// relaunch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub job_id: JobId,
    pub bindings: BTreeMap<String, NodeId>,
    pub relaunch: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedulerError {
    #[error("the queue is closed")]
    QueueClosed,
    #[error("{0} not found")]
    JobNotFound(JobId),
    #[error("{0} is already terminal")]
    AlreadyTerminal(JobId),
    #[error("unknown task {job}/{task}")]
    UnknownTask { job: JobId, task: String },
    #[error("placement for {0} no longer fits the inventory")]
    StaleInventory(JobId),
    #[error("bind of {job} rolled back: {reason}")]
    BindRejected { job: JobId, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanupRetry {
    pub attempts: u32,
    pub next_at: Tick,
}

pub struct Scheduler {
    config: SchedulerConfig,
    catalog: InstanceCatalog,
    jobs: BTreeMap<JobId, JobRecord>,
    queue: VecDeque<JobId>,
    next_id: u64,
    closed: bool,
    rendezvous: Arc<RendezvousServer>,
    rendezvous_endpoint: String,
    events: Arc<EventLog>,
    cleanups: BTreeMap<JobId, CleanupRetry>,
    fleet_limit: Option<u32>,
}

fn log_job(events: &EventLog, job: &JobRecord, tr: Transition<JobState>, tick: Tick, reason: impl Into<String>) {
    if tr.from == tr.to {
        return;
    }
    events.push(|seq| EventRecord::Transition {
        seq,
        tick,
        job_id: job.id,
        task_name: None,
        old_state: Some(tr.from.to_string()),
        new_state: tr.to.to_string(),
        reason: reason.into(),
    });
}

fn log_task(
    events: &EventLog,
    job: JobId,
    task: &str,
    tr: Transition<TaskState>,
    tick: Tick,
    reason: impl Into<String>,
) {
    events.push(|seq| EventRecord::Transition {
        seq,
        tick,
        job_id: job,
        task_name: Some(task.to_string()),
        old_state: Some(tr.from.to_string()),
        new_state: tr.to.to_string(),
        reason: reason.into(),
    });
}

fn job_event(events: &EventLog, job: &mut JobRecord, event: JobEvent, tick: Tick, reason: impl Into<String>) {
    let tr = job.apply(event, tick).unwrap_or_else(|e| panic!("{}: {e}", job.id));
    log_job(events, job, tr, tick, reason);
}

fn task_event(
    events: &EventLog,
    job: &mut JobRecord,
    task: &str,
    event: TaskEvent,
    tick: Tick,
    reason: impl Into<String>,
) {
    let id = job.id;
    let rec = job.task_mut(task).expect("task belongs to job");
    let tr = rec.apply(event).unwrap_or_else(|e| panic!("{id}/{task}: {e}"));
    log_task(events, id, task, tr, tick, reason);
}

/// Free capacity of one Ready node during a pass.
#[derive(Debug, Clone)]
struct Slot {
    node: NodeId,
    instance_type: String,
    free: ResourceVector,
}

/// Tasks of `job` matching `filter`, as `(name, instance_type, resources)`.
fn task_demands(
    job: &JobRecord,
    filter: impl Fn(&acm_core::TaskRecord) -> bool,
) -> Vec<(String, String, ResourceVector)> {
    job.tasks
        .iter()
        .filter(|t| filter(t))
        .filter_map(|t| {
            let g = job.spec.group(&t.group)?;
            Some((t.task_name.clone(), g.instance_type.clone(), g.resources_per_replica))
        })
        .collect()
}

/// First-fit-decreasing placement of all `demands` onto `slots`, per
/// instance type. All or nothing; `slots` is updated only on success.
fn gang_fit(demands: &[(String, String, ResourceVector)], slots: &mut [Slot]) -> Option<BTreeMap<String, NodeId>> {
    let mut trial = slots.to_vec();
    let mut bindings = BTreeMap::new();
    let mut by_type: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (_, ty, _)) in demands.iter().enumerate() {
        by_type.entry(ty.as_str()).or_default().push(i);
    }
    for (ty, idx) in by_type {
        let bins: Vec<usize> = (0..trial.len()).filter(|&s| trial[s].instance_type == ty).collect();
        let items: Vec<ResourceVector> = idx.iter().map(|&i| demands[i].2).collect();
        let free: Vec<ResourceVector> = bins.iter().map(|&s| trial[s].free).collect();
        let assignment = pack_into_bins(&items, &free)?;
        for (k, &bin) in assignment.iter().enumerate() {
            let slot = &mut trial[bins[bin]];
            slot.free = slot.free.checked_sub(&items[k]).ok()?;
            bindings.insert(demands[idx[k]].0.clone(), slot.node.clone());
        }
    }
    slots.clone_from_slice(&trial);
    Some(bindings)
}

/// Whether `head`'s tasks of `instance_type` could never be packed onto that
/// type's fleet: its Ready and Booting nodes, taken as empty, plus the nodes
/// the autoscaler may still add up to `fleet_limit`. Backfill on such a type
/// cannot delay the head, since the head cannot start there anyway.
fn infeasible_on_type(
    head: &JobRecord,
    instance_type: &InstanceType,
    inventory: &[Node],
    fleet_limit: Option<u32>,
) -> bool {
    let items: Vec<ResourceVector> = task_demands(head, |t| t.is_unplaced())
        .into_iter()
        .filter(|(_, ty, _)| *ty == instance_type.name)
        .map(|(_, _, r)| r)
        .collect();
    if items.is_empty() {
        return true;
    }
    let mut capacities: Vec<ResourceVector> = inventory
        .iter()
        .filter(|n| n.state != NodeState::Terminating && n.instance_type == instance_type.name)
        .map(|n| n.capacity)
        .collect();
    let headroom = fleet_limit.map_or(0, |l| (l as usize).saturating_sub(capacities.len()));
    capacities.extend(std::iter::repeat_n(instance_type.capacity, headroom));
    pack_into_bins(&items, &capacities).is_none()
}

impl Scheduler {
    pub fn new(
        config: SchedulerConfig,
        catalog: InstanceCatalog,
        rendezvous: Arc<RendezvousServer>,
        rendezvous_endpoint: impl Into<String>,
        events: Arc<EventLog>,
    ) -> Self {
        assert!(
            config.schedule_interval_ticks >= 1,
            "schedule interval must be positive"
        );
        Self {
            config,
            catalog,
            jobs: BTreeMap::new(),
            queue: VecDeque::new(),
            next_id: 1,
            closed: false,
            rendezvous,
            rendezvous_endpoint: rendezvous_endpoint.into(),
            events,
            cleanups: BTreeMap::new(),
            fleet_limit: None,
        }
    }

    /// Nodes per instance type the autoscaler may grow to; `None` for a
    /// fixed fleet. Backfill only uses types the head could not fill even
    /// at this size.
    pub fn set_fleet_limit(&mut self, limit: Option<u32>) {
        self.fleet_limit = limit;
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn catalog(&self) -> &InstanceCatalog {
        &self.catalog
    }

    pub fn events(&self) -> &Arc<EventLog> {
        &self.events
    }

    pub fn rendezvous(&self) -> &Arc<RendezvousServer> {
        &self.rendezvous
    }

    pub fn jobs(&self) -> &BTreeMap<JobId, JobRecord> {
        &self.jobs
    }

    pub fn job(&self, id: JobId) -> Option<&JobRecord> {
        self.jobs.get(&id)
    }

    pub fn queue(&self) -> &VecDeque<JobId> {
        &self.queue
    }

    pub fn queue_position(&self, id: JobId) -> Option<usize> {
        self.queue.iter().position(|&j| j == id)
    }

    pub fn pending_cleanups(&self) -> &BTreeMap<JobId, CleanupRetry> {
        &self.cleanups
    }

    /// Stops accepting submissions.
    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Appends a validated spec to the queue.
    pub fn enqueue(&mut self, spec: JobSpec, principal: Option<String>, now: Tick) -> Result<JobId, SchedulerError> {
        if self.closed {
            return Err(SchedulerError::QueueClosed);
        }
        let id = JobId(self.next_id);
        self.next_id += 1;
        let mut record = JobRecord::new(id, spec, now);
        record.principal = principal;
        self.events.push(|seq| EventRecord::Transition {
            seq,
            tick: now,
            job_id: id,
            task_name: None,
            old_state: None,
            new_state: JobState::Queued.to_string(),
            reason: "submitted".into(),
        });
        self.jobs.insert(id, record);
        self.queue.push_back(id);
        Ok(id)
    }

    /// Specs of jobs waiting in the queue, in order.
    pub fn queued_specs(&self) -> impl Iterator<Item = &JobSpec> + '_ {
        self.queue.iter().filter_map(|id| self.jobs.get(id)).map(|j| &j.spec)
    }

    /// `(instance_type, resources)` of every task waiting to be relaunched.
    pub fn relaunch_demand(&self) -> Vec<(String, ResourceVector)> {
        self.jobs
            .values()
            .filter(|j| !j.state.is_terminal())
            .flat_map(|j| task_demands(j, |t| t.awaiting_relaunch()))
            .map(|(_, ty, r)| (ty, r))
            .collect()
    }

    pub fn due(&self, now: Tick) -> bool {
        now % self.config.schedule_interval_ticks == 0
    }

    /// Computes placements against a snapshot. Relaunches come first, then
    /// the queue in FIFO order. Without backfill the pass stops at the first
    /// job that does not fit; with backfill a later job may go ahead only on
    /// instance types the blocked head does not use, or could not use even
    /// if every Ready node of that type were empty.
    pub fn schedule_pass(&self, inventory: &[Node]) -> Vec<Placement> {
        let mut slots: Vec<Slot> = inventory
            .iter()
            .filter(|n| n.state == NodeState::Ready)
            .map(|n| Slot {
                node: n.node_id.clone(),
                instance_type: n.instance_type.clone(),
                free: n.allocatable,
            })
            .collect();
        let mut out = Vec::new();

        for job in self.jobs.values().filter(|j| !j.state.is_terminal()) {
            let mut bindings = BTreeMap::new();
            for demand in task_demands(job, |t| t.awaiting_relaunch()) {
                if let Some(b) = gang_fit(std::slice::from_ref(&demand), &mut slots) {
                    bindings.extend(b);
                }
            }
            if !bindings.is_empty() {
                out.push(Placement {
                    job_id: job.id,
                    bindings,
                    relaunch: true,
                });
            }
        }

        let mut blocked_head: Option<&JobRecord> = None;
        for id in &self.queue {
            let Some(job) = self.jobs.get(id) else { continue };
            let demands = task_demands(job, |_| true);
            if let Some(head) = blocked_head {
                let safe = demands.iter().all(|(_, ty, _)| {
                    let ty = self.catalog.get(ty).expect("validated spec");
                    infeasible_on_type(head, ty, inventory, self.fleet_limit)
                });
                if !safe {
                    continue;
                }
            }
            match gang_fit(&demands, &mut slots) {
                Some(bindings) => out.push(Placement {
                    job_id: job.id,
                    bindings,
                    relaunch: false,
                }),
                None => {
                    if !self.config.backfill_enabled {
                        break;
                    }
                    blocked_head.get_or_insert(job);
                }
            }
        }
        out
    }

    fn ticket(&self, job: &JobRecord, task: &str) -> Option<RendezvousTicket> {
        let t = job.task(task)?;
        let group = job.spec.group(&t.group)?;
        if group.harness != Harness::Mpi {
            return None;
        }
        Some(RendezvousTicket {
            endpoint: self.rendezvous_endpoint.clone(),
            generation: self.rendezvous.generation(job.id)?,
            rank: self.rendezvous.rank_of(job.id, task)?,
        })
    }

    fn init_request(&self, job: &JobRecord, task: &str, node: &NodeId) -> InitRequest {
        let t = job.task(task).expect("task belongs to job");
        let group = job.spec.group(&t.group).expect("task group exists");
        InitRequest {
            job_id: job.id,
            task_name: task.to_string(),
            node_id: node.clone(),
            resources: group.resources_per_replica,
            code_ref: job.spec.code_ref.clone(),
            dataset: job.spec.dataset_uri.clone().map(MountRef::dataset),
            workspace: job.spec.workspace_uri.clone().map(MountRef::workspace),
            rendezvous: self.ticket(job, task),
        }
    }

    fn still_fits(&self, placement: &Placement, inventory: &[Node]) -> bool {
        let Some(job) = self.jobs.get(&placement.job_id) else {
            return false;
        };
        let state_ok = if placement.relaunch {
            !job.state.is_terminal()
                && placement
                    .bindings
                    .keys()
                    .all(|t| job.task(t).is_some_and(|t| t.awaiting_relaunch()))
        } else {
            job.state == JobState::Queued && placement.bindings.len() == job.tasks.len()
        };
        if !state_ok {
            return false;
        }
        let mut need: BTreeMap<&NodeId, ResourceVector> = BTreeMap::new();
        for (task, node) in &placement.bindings {
            let Some(group) = job.task(task).and_then(|t| job.spec.group(&t.group)) else {
                return false;
            };
            let entry = need.entry(node).or_default();
            match entry.checked_add(&group.resources_per_replica) {
                Ok(sum) => *entry = sum,
                Err(_) => return false,
            }
        }
        need.into_iter().all(|(node, sum)| {
            inventory
                .iter()
                .find(|n| &n.node_id == node)
                .is_some_and(|n| n.state == NodeState::Ready && sum.fits(&n.allocatable))
        })
    }

    /// Binds a placement atomically. Any launch rejection undoes every
    /// binding of the placement and a gang goes back to the queue.
    pub fn bind<B: Backend + ?Sized>(&mut self, placement: &Placement, backend: &mut B) -> Result<(), SchedulerError> {
        let now = backend.now();
        let id = placement.job_id;
        if !self.still_fits(placement, &backend.inventory()) {
            return Err(SchedulerError::StaleInventory(id));
        }
        let gang = !placement.relaunch;
        let events = self.events.clone();
        if gang {
            let job = self.jobs.get_mut(&id).expect("validated");
            job_event(&events, job, JobEvent::BeginScheduling, now, "gang placement found");
            if job.spec.uses_mpi() {
                self.rendezvous.open(id, job.spec.mpi_task_names());
            }
        }
        // Bind in task order.
        let order: Vec<(String, NodeId)> = self.jobs[&id]
            .tasks
            .iter()
            .filter_map(|t| {
                placement
                    .bindings
                    .get(&t.task_name)
                    .map(|n| (t.task_name.clone(), n.clone()))
            })
            .collect();
        let mut launched: Vec<String> = Vec::new();
        for (task, node) in &order {
            let request = self.init_request(&self.jobs[&id], task, node);
            match backend.launch_init(request) {
                Ok(()) => {
                    let job = self.jobs.get_mut(&id).expect("validated");
                    task_event(
                        &events,
                        job,
                        task,
                        TaskEvent::Bind(node.clone()),
                        now,
                        format!("bound to {node}"),
                    );
                    launched.push(task.clone());
                }
                Err(e) => {
                    let reason = format!("launch of {task} rejected: {e}");
                    self.roll_back(id, &launched, gang, &reason, backend);
                    return Err(SchedulerError::BindRejected { job: id, reason });
                }
            }
        }
        if gang {
            let job = self.jobs.get_mut(&id).expect("validated");
            job_event(&events, job, JobEvent::ResourcesBound, now, "all tasks bound");
            self.queue.retain(|&j| j != id);
        }
        Ok(())
    }

    fn roll_back<B: Backend + ?Sized>(
        &mut self,
        id: JobId,
        launched: &[String],
        gang: bool,
        reason: &str,
        backend: &mut B,
    ) {
        let now = backend.now();
        let events = self.events.clone();
        let job = self.jobs.get_mut(&id).expect("validated");
        for task in launched {
            let _ = backend.kill(id, task);
            task_event(&events, job, task, TaskEvent::Unbind, now, "bind rolled back");
        }
        if gang {
            if let Err(e) = backend.delete_all(id) {
                tracing::warn!("{id}: delete after rollback failed: {e}");
            }
            self.rendezvous.remove(id);
            job_event(&events, job, JobEvent::BindRolledBack, now, reason);
        }
    }

    /// Runs one pass and binds what it found. Returns the placements bound.
    /// Once a gang bind fails, later gangs wait for the next pass so they
    /// cannot overtake it.
    pub fn run_pass<B: Backend + ?Sized>(&mut self, backend: &mut B) -> Vec<Placement> {
        let mut bound = Vec::new();
        let mut gang_failed = false;
        for p in self.schedule_pass(&backend.inventory()) {
            if gang_failed && !p.relaunch {
                continue;
            }
            match self.bind(&p, backend) {
                Ok(()) => bound.push(p),
                Err(e) => {
                    tracing::debug!("{e}");
                    gang_failed |= !p.relaunch;
                }
            }
        }
        bound
    }

    pub fn handle_event<B: Backend + ?Sized>(&mut self, event: &BackendEvent, backend: &mut B) {
        match &event.kind {
            BackendEventKind::InitCompleted { job, task, report } => {
                let Some(rec) = self.jobs.get(job) else { return };
                if rec.task(task).map(|t| t.state) != Some(TaskState::Initializing) {
                    return;
                }
                if report.passed() {
                    let t = rec.task(task).expect("checked");
                    let group = rec.spec.group(&t.group).expect("task group exists");
                    let launch = TaskLaunch {
                        job_id: *job,
                        task_name: task.clone(),
                        node_id: t.node_id.clone().expect("bound task has a node"),
                        image: group.image.clone(),
                        command: group.command.clone(),
                        harness: group.harness,
                        dataset: rec.spec.dataset_uri.clone().map(MountRef::dataset),
                        workspace: rec.spec.workspace_uri.clone().map(MountRef::workspace),
                        rendezvous: self.ticket(rec, task),
                    };
                    if let Err(e) = backend.launch_task(launch) {
                        let _ = backend.kill(*job, task);
                        self.task_failed(
                            *job,
                            task,
                            TaskEvent::InitFailed,
                            format!("launch failed: {e}"),
                            backend,
                        );
                    }
                } else {
                    let why = report
                        .failure
                        .as_ref()
                        .map_or_else(|| "preflight failed".to_string(), |f| format!("preflight failed: {f}"));
                    let _ = backend.kill(*job, task);
                    self.task_failed(*job, task, TaskEvent::InitFailed, why, backend);
                }
            }
            BackendEventKind::TaskStarted { job, task } => {
                let now = backend.now();
                let events = self.events.clone();
                let Some(rec) = self.jobs.get_mut(job) else { return };
                if rec.task(task).map(|t| t.state) != Some(TaskState::Initializing) {
                    return;
                }
                task_event(&events, rec, task, TaskEvent::Start, now, "container started");
                Self::refresh_running(&events, rec, now);
            }
            BackendEventKind::TaskExited { job, task, code } => {
                let _ = self.on_task_exit(*job, task, *code, backend);
            }
            BackendEventKind::NodeReady { .. }
            | BackendEventKind::NodeLost { .. }
            | BackendEventKind::DeleteConfirmed { .. } => {}
        }
    }

    fn refresh_running(events: &EventLog, job: &mut JobRecord, now: Tick) {
        let all_up = job
            .tasks
            .iter()
            .all(|t| matches!(t.state, TaskState::Running | TaskState::Succeeded));
        if job.state == JobState::Initializing && all_up {
            job_event(events, job, JobEvent::AllTasksRunning, now, "all tasks running");
        }
    }

    /// Applies a task exit. Exits of tasks that are no longer live are
    /// ignored.
    pub fn on_task_exit<B: Backend + ?Sized>(
        &mut self,
        job: JobId,
        task: &str,
        code: i32,
        backend: &mut B,
    ) -> Result<(), SchedulerError> {
        let unknown = || SchedulerError::UnknownTask {
            job,
            task: task.to_string(),
        };
        let rec = self.jobs.get(&job).ok_or_else(unknown)?;
        let state = rec.task(task).ok_or_else(unknown)?.state;
        if !matches!(state, TaskState::Initializing | TaskState::Running) {
            return Ok(());
        }
        if code != 0 {
            self.task_failed(
                job,
                task,
                TaskEvent::Exit(code),
                format!("exited with code {code}"),
                backend,
            );
            return Ok(());
        }
        let now = backend.now();
        let events = self.events.clone();
        let rec = self.jobs.get_mut(&job).expect("checked");
        task_event(&events, rec, task, TaskEvent::Exit(0), now, "exited with code 0");
        rec.apply(JobEvent::TaskExit, now).expect("live job");
        if self.rendezvous.rank_of(job, task) == Some(0) {
            self.rendezvous.graceful_stop(job);
        }
        if rec.all_tasks_in(TaskState::Succeeded) {
            job_event(&events, rec, JobEvent::AllTasksSucceeded, now, "all tasks succeeded");
            self.cleanup(job, backend);
        } else {
            Self::refresh_running(&events, rec, now);
        }
        Ok(())
    }

    /// Marks a task failed and applies the job's failure policy.
    fn task_failed<B: Backend + ?Sized>(
        &mut self,
        job: JobId,
        task: &str,
        event: TaskEvent,
        reason: String,
        backend: &mut B,
    ) {
        let now = backend.now();
        let events = self.events.clone();
        let rec = self.jobs.get_mut(&job).expect("known job");
        task_event(&events, rec, task, event, now, reason.clone());
        if rec.state == JobState::Initializing || rec.state == JobState::Running {
            rec.apply(JobEvent::TaskExit, now).expect("live job");
        }
        let t = rec.task(task).expect("known task");
        let budget_left =
            rec.spec.failure_policy == FailurePolicy::RelaunchFailed && t.relaunch_count < rec.spec.max_relaunches;
        // A rank that already exited 0 will not register again, so without a
        // stop in force a new generation could never pass its barrier.
        let in_rendezvous = self.rendezvous.rank_of(job, task).is_some();
        let barrier_lost = in_rendezvous
            && !self.rendezvous.stop_requested(job)
            && rec
                .tasks
                .iter()
                .any(|o| o.state == TaskState::Succeeded && self.rendezvous.rank_of(job, &o.task_name).is_some());
        if budget_left && !barrier_lost {
            let n = t.relaunch_count + 1;
            let max = rec.spec.max_relaunches;
            task_event(
                &events,
                rec,
                task,
                TaskEvent::Relaunch,
                now,
                format!("relaunch {n} of {max}"),
            );
            if in_rendezvous {
                self.rendezvous.relaunch(job);
            }
            return;
        }
        let live: Vec<String> = rec
            .tasks
            .iter()
            .filter(|t| {
                matches!(
                    t.state,
                    TaskState::Pending | TaskState::Initializing | TaskState::Running
                )
            })
            .map(|t| t.task_name.clone())
            .collect();
        for other in &live {
            let _ = backend.kill(job, other);
            task_event(
                &events,
                rec,
                other,
                TaskEvent::Kill,
                now,
                format!("terminated after {task} failed"),
            );
        }
        let why = match rec.spec.failure_policy {
            FailurePolicy::TerminateAll => format!("{task} failed: {reason}"),
            FailurePolicy::RelaunchFailed if budget_left => {
                format!("{task} failed and its rendezvous cannot re-form: {reason}")
            }
            FailurePolicy::RelaunchFailed => format!("{task} failed with no relaunches left: {reason}"),
        };
        job_event(&events, rec, JobEvent::FailurePolicyExhausted, now, why);
        self.cleanup(job, backend);
    }

    pub fn cancel<B: Backend + ?Sized>(&mut self, job: JobId, backend: &mut B) -> Result<(), SchedulerError> {
        let now = backend.now();
        let events = self.events.clone();
        let rec = self.jobs.get_mut(&job).ok_or(SchedulerError::JobNotFound(job))?;
        if rec.state.is_terminal() {
            return Err(SchedulerError::AlreadyTerminal(job));
        }
        self.rendezvous.graceful_stop(job);
        let live: Vec<String> = rec
            .tasks
            .iter()
            .filter(|t| !t.state.is_terminal())
            .map(|t| t.task_name.clone())
            .collect();
        for task in &live {
            let _ = backend.kill(job, task);
            task_event(&events, rec, task, TaskEvent::Kill, now, "job canceled");
        }
        // Failed tasks waiting for a relaunch budget check are already
        // terminal; nothing else is live.
        job_event(&events, rec, JobEvent::CancelRequested, now, "cancel requested");
        self.queue.retain(|&j| j != job);
        self.cleanup(job, backend);
        Ok(())
    }

    /// Deletes every backend object of a terminal job and audits that none
    /// remain. Failures are retried with exponential backoff.
    pub fn cleanup<B: Backend + ?Sized>(&mut self, job: JobId, backend: &mut B) {
        let now = backend.now();
        self.rendezvous.remove(job);
        let attempt = self.cleanups.get(&job).map_or(0, |c| c.attempts) + 1;
        let (removed, failure) = match backend.delete_all(job) {
            Ok(removed) => {
                let residual = backend.object_count(job);
                let failure = (residual > 0).then(|| format!("CleanupIncomplete: {residual} object(s) remain"));
                (removed, failure)
            }
            Err(e) => (0, Some(format!("CleanupIncomplete: {e}"))),
        };
        let residual = backend.object_count(job);
        self.events.push(|seq| EventRecord::Cleanup {
            seq,
            tick: now,
            job_id: job,
            attempt,
            removed,
            residual,
            complete: failure.is_none(),
        });
        match failure {
            None => {
                self.cleanups.remove(&job);
            }
            Some(message) => {
                let backoff = 1u64
                    .checked_shl(attempt - 1)
                    .unwrap_or(u64::MAX)
                    .min(MAX_CLEANUP_BACKOFF);
                self.cleanups.insert(
                    job,
                    CleanupRetry {
                        attempts: attempt,
                        next_at: now + backoff,
                    },
                );
                self.events.push(|seq| EventRecord::Alert {
                    seq,
                    tick: now,
                    job_id: Some(job),
                    alert: "CleanupIncomplete".into(),
                    message: format!("{message}; retry {attempt} in {backoff} tick(s)"),
                });
            }
        }
    }

    /// Re-runs cleanups whose backoff has elapsed.
    pub fn retry_cleanups<B: Backend + ?Sized>(&mut self, backend: &mut B) {
        let now = backend.now();
        let due: Vec<JobId> = self
            .cleanups
            .iter()
            .filter(|(_, c)| c.next_at <= now)
            .map(|(&j, _)| j)
            .collect();
        for job in due {
            self.cleanup(job, backend);
        }
    }
}
