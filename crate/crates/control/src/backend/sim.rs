//! Deterministic tick-based cluster simulator.
//!
//! Everything that happens later is an entry in an agenda keyed by
//! `(tick, insertion order)`; `advance` pops entries in that order. Task
//! containers run scripted durations and exit codes. MPI tasks emulate the
//! in-task harness against the shared [`RendezvousServer`]: they register,
//! poll once per tick, and non-zero ranks exit 0 one tick after they see a
//! stop request.
//!
//! A finished or killed task keeps its pod object until `delete_all`, as a
//! completed container would, so statelessness is observable.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use acm_core::{CodeDigest, InstanceType, JobId, NodeId, ResourceVector, Tick};
use acm_storage::{CodeStore, LogStore, MountRef};
use thiserror::Error;

use super::{
    Backend, BackendError, BackendEvent, BackendEventKind, InitRequest, InstanceProvider, Inventory, Node, NodeState,
    ProviderError, TaskLaunch, NODE_LOST_EXIT_CODE,
};
use crate::harness::{run_init, InitEnvironment, InitPlan, RendezvousError, RendezvousServer, Reply};

/// Exit code of an MPI task whose harness hit an unrecoverable rendezvous
/// error.
pub const HARNESS_ERROR_EXIT_CODE: i32 = 70;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimConfig {
    /// Ticks from `launch_init` to the init report. At least 1.
    pub init_ticks: Tick,
    /// Work duration for tasks without a script. At least 1.
    pub default_duration: Tick,
    /// Maximum live nodes per instance type.
    pub quotas: BTreeMap<String, u32>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            init_ticks: 1,
            default_duration: 10,
            quotas: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskScript {
    /// Ticks from container start (or barrier release for MPI rank 0) to
    /// exit.
    pub duration: Tick,
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    NodeLost {
        node: NodeId,
        at: Tick,
    },
    TaskCrash {
        job: JobId,
        task: String,
        at: Tick,
        code: i32,
    },
    /// The next `count` `delete_all` calls for `job` fail.
    DeleteRefusal {
        job: JobId,
        count: u32,
    },
    /// Delays the node's readiness by `extra_ticks`.
    BootStall {
        node: NodeId,
        extra_ticks: Tick,
    },
    /// The next `count` `launch_init` calls for the task are rejected.
    LaunchReject {
        job: JobId,
        task: String,
        count: u32,
    },
    /// The rendezvous endpoint is unreachable on ticks `[from, until)`.
    RendezvousDown {
        from: Tick,
        until: Tick,
    },
    /// Code fetched for `job` arrives corrupted.
    CodeTamper {
        job: JobId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FaultError {
    #[error("fault tick {at} is not after the current tick {now}")]
    PastTick { at: Tick, now: Tick },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Init,
    AwaitLaunch,
    Launched,
    Plain,
    Registering { generation: u64 },
    Working { generation: u64 },
    Serving { generation: u64 },
    Stopping,
    Exited,
}

#[derive(Debug, Clone)]
struct Pod {
    node: NodeId,
    live: bool,
    incarnation: u64,
    /// Bumped whenever a scheduled exit must be invalidated.
    epoch: u64,
    phase: Phase,
    started: bool,
    plan: InitPlan,
    launch: Option<TaskLaunch>,
}

type TaskKey = (JobId, String);

#[derive(Debug, Clone)]
enum Action {
    NodeReady(NodeId),
    RemoveNode(NodeId),
    NodeLost(NodeId),
    TaskCrash {
        key: TaskKey,
        code: i32,
    },
    InitDone {
        key: TaskKey,
        incarnation: u64,
    },
    ContainerStart {
        key: TaskKey,
        incarnation: u64,
    },
    HarnessPoll {
        key: TaskKey,
        incarnation: u64,
    },
    Exit {
        key: TaskKey,
        incarnation: u64,
        epoch: u64,
        code: Option<i32>,
    },
}

pub const SIM_RENDEZVOUS_ENDPOINT: &str = "sim://rendezvous";

pub struct SimBackend {
    config: SimConfig,
    now: Tick,
    agenda: BTreeMap<(Tick, u64), Action>,
    agenda_seq: u64,
    event_seq: u64,
    events: Vec<BackendEvent>,
    inventory: Inventory,
    node_counter: u64,
    incarnations: u64,
    pods: BTreeMap<TaskKey, Pod>,
    names: BTreeMap<TaskKey, String>,
    job_scripts: BTreeMap<JobId, TaskScript>,
    task_scripts: BTreeMap<TaskKey, TaskScript>,
    delete_refusals: BTreeMap<JobId, u32>,
    launch_rejects: BTreeMap<TaskKey, u32>,
    boot_stalls: BTreeMap<NodeId, Tick>,
    rendezvous_down: Vec<(Tick, Tick)>,
    tampered: BTreeSet<JobId>,
    rendezvous: Option<Arc<RendezvousServer>>,
    code: Option<Arc<CodeStore>>,
    logs: Option<Arc<LogStore>>,
}

impl SimBackend {
    pub fn new(config: SimConfig) -> Self {
        assert!(config.init_ticks >= 1, "init_ticks must be at least 1");
        assert!(config.default_duration >= 1, "default_duration must be at least 1");
        Self {
            config,
            now: 0,
            agenda: BTreeMap::new(),
            agenda_seq: 0,
            event_seq: 0,
            events: Vec::new(),
            inventory: Inventory::default(),
            node_counter: 0,
            incarnations: 0,
            pods: BTreeMap::new(),
            names: BTreeMap::new(),
            job_scripts: BTreeMap::new(),
            task_scripts: BTreeMap::new(),
            delete_refusals: BTreeMap::new(),
            launch_rejects: BTreeMap::new(),
            boot_stalls: BTreeMap::new(),
            rendezvous_down: Vec::new(),
            tampered: BTreeSet::new(),
            rendezvous: None,
            code: None,
            logs: None,
        }
    }

    pub fn with_rendezvous(mut self, server: Arc<RendezvousServer>) -> Self {
        self.rendezvous = Some(server);
        self
    }

    pub fn with_code_store(mut self, store: Arc<CodeStore>) -> Self {
        self.code = Some(store);
        self
    }

    /// Writes one line per task start and exit to the task's log stream.
    pub fn with_logs(mut self, logs: Arc<LogStore>) -> Self {
        self.logs = Some(logs);
        self
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Script for every task of `job` without a task-level script.
    pub fn script_job(&mut self, job: JobId, script: TaskScript) {
        self.job_scripts.insert(job, script);
    }

    pub fn script_task(&mut self, job: JobId, task: &str, script: TaskScript) {
        self.task_scripts.insert((job, task.to_string()), script);
    }

    fn script(&self, key: &TaskKey) -> TaskScript {
        self.task_scripts
            .get(key)
            .or_else(|| self.job_scripts.get(&key.0))
            .copied()
            .unwrap_or(TaskScript {
                duration: self.config.default_duration,
                exit_code: 0,
            })
    }

    /// Adds a node that is Ready immediately.
    pub fn add_ready_node(&mut self, instance_type: &InstanceType) -> NodeId {
        let id = self.next_node_id(&instance_type.name);
        self.inventory.add_node(
            id.clone(),
            &instance_type.name,
            instance_type.capacity,
            NodeState::Ready,
            self.now,
        );
        id
    }

    fn next_node_id(&mut self, instance_type: &str) -> NodeId {
        self.node_counter += 1;
        NodeId::new(format!("{instance_type}-{}", self.node_counter))
    }

    pub fn inject(&mut self, fault: Fault) -> Result<(), FaultError> {
        let now = self.now;
        let check = |at: Tick| {
            if at > now {
                Ok(())
            } else {
                Err(FaultError::PastTick { at, now })
            }
        };
        match fault {
            Fault::NodeLost { node, at } => {
                check(at)?;
                self.schedule(at, Action::NodeLost(node));
            }
            Fault::TaskCrash { job, task, at, code } => {
                check(at)?;
                self.schedule(at, Action::TaskCrash { key: (job, task), code });
            }
            Fault::DeleteRefusal { job, count } => *self.delete_refusals.entry(job).or_default() += count,
            Fault::BootStall { node, extra_ticks } => *self.boot_stalls.entry(node).or_default() += extra_ticks,
            Fault::LaunchReject { job, task, count } => *self.launch_rejects.entry((job, task)).or_default() += count,
            Fault::RendezvousDown { from, until } => {
                check(from)?;
                self.rendezvous_down.push((from, until));
            }
            Fault::CodeTamper { job } => {
                self.tampered.insert(job);
            }
        }
        Ok(())
    }

    /// Resources currently reserved for a task.
    pub fn reservation(&self, job: JobId, task: &str) -> Option<(NodeId, ResourceVector)> {
        self.inventory.reservation(job, task).cloned()
    }

    /// Whether the task's container reached its user command.
    pub fn task_started(&self, job: JobId, task: &str) -> bool {
        self.pods.get(&(job, task.to_string())).is_some_and(|p| p.started)
    }

    fn schedule(&mut self, at: Tick, action: Action) {
        self.agenda.insert((at, self.agenda_seq), action);
        self.agenda_seq += 1;
    }

    fn emit(&mut self, kind: BackendEventKind) {
        if let Some(logs) = &self.logs {
            match &kind {
                BackendEventKind::TaskStarted { job, task } => {
                    logs.append(*job, task, format!("[tick {}] started\n", self.now).as_bytes())
                }
                BackendEventKind::TaskExited { job, task, code } => logs.append(
                    *job,
                    task,
                    format!("[tick {}] exited with code {code}\n", self.now).as_bytes(),
                ),
                _ => {}
            }
        }
        self.events.push(BackendEvent {
            tick: self.now,
            seq: self.event_seq,
            kind,
        });
        self.event_seq += 1;
    }

    fn live_pod(&self, key: &TaskKey, incarnation: u64) -> bool {
        self.pods
            .get(key)
            .is_some_and(|p| p.live && p.incarnation == incarnation)
    }

    fn address(key: &TaskKey, node: &NodeId) -> String {
        format!("sim://{}/{}", node, key.1)
    }

    fn rendezvous_up(&self) -> bool {
        !self
            .rendezvous_down
            .iter()
            .any(|&(from, until)| (from..until).contains(&self.now))
    }

    /// Stops a live pod: frees its reservation and name. No event.
    fn stop_pod(&mut self, key: &TaskKey) -> bool {
        let Some(pod) = self.pods.get_mut(key) else {
            return false;
        };
        if !pod.live {
            return false;
        }
        pod.live = false;
        pod.phase = Phase::Exited;
        pod.epoch += 1;
        self.names.remove(key);
        self.inventory.release(key.0, &key.1, self.now);
        true
    }

    fn exit_pod(&mut self, key: &TaskKey, code: i32) {
        if self.stop_pod(key) {
            self.emit(BackendEventKind::TaskExited {
                job: key.0,
                task: key.1.clone(),
                code,
            });
        }
    }

    fn run(&mut self, action: Action) {
        match action {
            Action::NodeReady(node) => {
                if let Some(extra) = self.boot_stalls.remove(&node).filter(|&e| e > 0) {
                    self.schedule(self.now + extra, Action::NodeReady(node));
                } else if self.inventory.mark_ready(&node, self.now) {
                    self.emit(BackendEventKind::NodeReady { node });
                }
            }
            Action::RemoveNode(node) => {
                self.inventory.remove_node(&node);
            }
            Action::NodeLost(node) => {
                if self.inventory.node(&node).is_none() {
                    return;
                }
                for key in self.inventory.tasks_on(&node) {
                    self.exit_pod(&key, NODE_LOST_EXIT_CODE);
                }
                self.inventory.remove_node(&node);
                self.boot_stalls.remove(&node);
                self.emit(BackendEventKind::NodeLost { node });
            }
            Action::TaskCrash { key, code } => {
                if self.pods.get(&key).is_some_and(|p| p.live) {
                    self.exit_pod(&key, code);
                }
            }
            Action::InitDone { key, incarnation } => {
                if !self.live_pod(&key, incarnation) {
                    return;
                }
                self.finish_init(key);
            }
            Action::ContainerStart { key, incarnation } => {
                if !self.live_pod(&key, incarnation) {
                    return;
                }
                self.start_container(key);
            }
            Action::HarnessPoll { key, incarnation } => {
                if !self.live_pod(&key, incarnation) {
                    return;
                }
                self.harness_step(key);
            }
            Action::Exit {
                key,
                incarnation,
                epoch,
                code,
            } => {
                let current = self
                    .pods
                    .get(&key)
                    .is_some_and(|p| p.live && p.incarnation == incarnation && p.epoch == epoch);
                if current {
                    let code = code.unwrap_or_else(|| self.script(&key).exit_code);
                    self.exit_pod(&key, code);
                }
            }
        }
    }

    fn finish_init(&mut self, key: TaskKey) {
        let plan = self.pods[&key].plan.clone();
        let mut env = SimInitEnv {
            code: self.code.as_deref(),
            tampered: self.tampered.contains(&key.0),
            rendezvous_up: self.rendezvous_up(),
        };
        let mut report = run_init(&plan, &mut env);
        report.duration_ticks = self.config.init_ticks;
        if report.passed() {
            self.pods.get_mut(&key).expect("live pod").phase = Phase::AwaitLaunch;
        } else {
            self.stop_pod(&key);
        }
        self.emit(BackendEventKind::InitCompleted {
            job: key.0,
            task: key.1,
            report,
        });
    }

    fn start_container(&mut self, key: TaskKey) {
        let pod = self.pods.get_mut(&key).expect("live pod");
        let launch = pod.launch.clone().expect("launched pod");
        self.names.insert(key.clone(), Self::address(&key, &pod.node));
        match launch.rendezvous {
            Some(ticket) => {
                pod.phase = Phase::Registering {
                    generation: ticket.generation,
                };
                self.harness_step(key);
            }
            None => {
                pod.phase = Phase::Plain;
                pod.started = true;
                let (incarnation, epoch) = (pod.incarnation, pod.epoch);
                self.emit(BackendEventKind::TaskStarted {
                    job: key.0,
                    task: key.1.clone(),
                });
                let at = self.now + self.script(&key).duration;
                self.schedule(
                    at,
                    Action::Exit {
                        key,
                        incarnation,
                        epoch,
                        code: None,
                    },
                );
            }
        }
    }

    /// One step of the emulated in-task harness.
    fn harness_step(&mut self, key: TaskKey) {
        let pod = &self.pods[&key];
        let (incarnation, phase) = (pod.incarnation, pod.phase);
        let Some(server) = self.rendezvous.clone() else {
            self.exit_pod(&key, HARNESS_ERROR_EXIT_CODE);
            return;
        };
        let (job, task) = (key.0, key.1.as_str());
        let result = match phase {
            Phase::Registering { generation } => {
                let addr = self.names.get(&key).cloned().unwrap_or_default();
                server.register(job, task, &addr, generation)
            }
            Phase::Working { generation } | Phase::Serving { generation } => server.poll(job, task, generation),
            _ => return,
        };
        let next_poll = Action::HarnessPoll {
            key: key.clone(),
            incarnation,
        };
        match result {
            Ok(Reply::Wait { .. }) => self.schedule(self.now + 1, next_poll),
            Ok(Reply::Proceed(p)) => {
                let first_start = !self.pods[&key].started;
                if first_start {
                    self.emit(BackendEventKind::TaskStarted {
                        job,
                        task: key.1.clone(),
                    });
                }
                let duration = self.script(&key).duration;
                let pod = self.pods.get_mut(&key).expect("live pod");
                pod.started = true;
                if let Phase::Registering { generation } = phase {
                    if p.rank == 0 {
                        pod.phase = Phase::Working { generation };
                        pod.epoch += 1;
                        let epoch = pod.epoch;
                        self.schedule(
                            self.now + duration,
                            Action::Exit {
                                key: key.clone(),
                                incarnation,
                                epoch,
                                code: None,
                            },
                        );
                    } else {
                        pod.phase = Phase::Serving { generation };
                    }
                }
                self.schedule(self.now + 1, next_poll);
            }
            Ok(Reply::Stop) => {
                if let Phase::Registering { generation }
                | Phase::Working { generation }
                | Phase::Serving { generation } = phase
                {
                    let _ = server.stop_ack(job, task, generation);
                }
                let pod = self.pods.get_mut(&key).expect("live pod");
                pod.phase = Phase::Stopping;
                pod.epoch += 1;
                let epoch = pod.epoch;
                self.schedule(
                    self.now + 1,
                    Action::Exit {
                        key,
                        incarnation,
                        epoch,
                        code: Some(0),
                    },
                );
            }
            Err(RendezvousError::StaleGeneration { current, .. }) => {
                let pod = self.pods.get_mut(&key).expect("live pod");
                pod.phase = Phase::Registering { generation: current };
                pod.epoch += 1;
                self.schedule(self.now + 1, next_poll);
            }
            Err(_) => self.exit_pod(&key, HARNESS_ERROR_EXIT_CODE),
        }
    }
}

struct SimInitEnv<'a> {
    code: Option<&'a CodeStore>,
    tampered: bool,
    rendezvous_up: bool,
}

impl InitEnvironment for SimInitEnv<'_> {
    fn fetch_code(&mut self, digest: &CodeDigest) -> Result<Vec<u8>, String> {
        let store = self.code.ok_or("no code store configured")?;
        let mut bytes = store.get_code(digest).map_err(|e| e.to_string())?;
        if self.tampered {
            if let Some(b) = bytes.last_mut() {
                *b ^= 0xff;
            }
        }
        Ok(bytes)
    }

    fn install_code(&mut self, _archive: &[u8]) -> Result<(), String> {
        Ok(())
    }

    fn check_mount(&mut self, _mount: &MountRef) -> Result<(), String> {
        Ok(())
    }

    fn probe_rendezvous(&mut self, _endpoint: &str) -> Result<(), String> {
        if self.rendezvous_up {
            Ok(())
        } else {
            Err("connection refused".into())
        }
    }

    fn check_devices(&mut self, _gpus: u32) -> Result<(), String> {
        Ok(())
    }
}

impl InstanceProvider for SimBackend {
    fn launch_instance(&mut self, instance_type: &InstanceType) -> Result<NodeId, ProviderError> {
        if let Some(&quota) = self.config.quotas.get(&instance_type.name) {
            if self.inventory.live_count(&instance_type.name) >= quota as usize {
                return Err(ProviderError::QuotaExceeded(instance_type.name.clone()));
            }
        }
        let id = self.next_node_id(&instance_type.name);
        self.inventory.add_node(
            id.clone(),
            &instance_type.name,
            instance_type.capacity,
            NodeState::Booting,
            self.now,
        );
        self.schedule(self.now + instance_type.boot_delay_ticks, Action::NodeReady(id.clone()));
        Ok(id)
    }

    fn terminate_instance(&mut self, node: &NodeId) -> Result<(), ProviderError> {
        self.inventory.mark_terminating(node)?;
        self.boot_stalls.remove(node);
        self.schedule(self.now + 1, Action::RemoveNode(node.clone()));
        Ok(())
    }
}

impl Backend for SimBackend {
    fn now(&self) -> Tick {
        self.now
    }

    fn advance(&mut self, ticks: Tick) {
        for _ in 0..ticks {
            self.now += 1;
            // Drain both entries due before now (zero-delay boots scheduled
            // between ticks) and entries for now.
            while let Some(entry) = self.agenda.first_entry() {
                if entry.key().0 > self.now {
                    break;
                }
                let action = entry.remove();
                self.run(action);
            }
        }
    }

    fn launch_init(&mut self, request: InitRequest) -> Result<(), BackendError> {
        let key = (request.job_id, request.task_name.clone());
        if let Some(n) = self.launch_rejects.get_mut(&key).filter(|n| **n > 0) {
            *n -= 1;
            return Err(BackendError::LaunchRejected {
                job: key.0,
                task: key.1,
                reason: "injected rejection".into(),
            });
        }
        if self.pods.get(&key).is_some_and(|p| p.live) {
            return Err(BackendError::AlreadyLaunched {
                job: key.0,
                task: key.1,
            });
        }
        self.inventory
            .reserve(key.0, &key.1, &request.node_id, request.resources)?;
        self.incarnations += 1;
        let incarnation = self.incarnations;
        let plan = InitPlan {
            code_ref: request.code_ref,
            workspace: request.workspace,
            dataset: request.dataset,
            rendezvous_endpoint: request.rendezvous.map(|r| r.endpoint),
            gpus: request.resources.gpus(),
        };
        self.pods.insert(
            key.clone(),
            Pod {
                node: request.node_id,
                live: true,
                incarnation,
                epoch: 0,
                phase: Phase::Init,
                started: false,
                plan,
                launch: None,
            },
        );
        self.schedule(self.now + self.config.init_ticks, Action::InitDone { key, incarnation });
        Ok(())
    }

    fn launch_task(&mut self, launch: TaskLaunch) -> Result<(), BackendError> {
        let key = (launch.job_id, launch.task_name.clone());
        let unknown = || BackendError::UnknownTask {
            job: launch.job_id,
            task: launch.task_name.clone(),
        };
        let pod = self.pods.get_mut(&key).filter(|p| p.live).ok_or_else(unknown)?;
        if pod.phase != Phase::AwaitLaunch {
            return Err(BackendError::AlreadyLaunched {
                job: key.0,
                task: key.1,
            });
        }
        if pod.node != launch.node_id {
            return Err(BackendError::LaunchRejected {
                job: key.0,
                task: key.1,
                reason: format!("task is bound to {}, not {}", pod.node, launch.node_id),
            });
        }
        pod.phase = Phase::Launched;
        pod.launch = Some(launch);
        let incarnation = pod.incarnation;
        self.schedule(self.now + 1, Action::ContainerStart { key, incarnation });
        Ok(())
    }

    fn kill(&mut self, job: JobId, task: &str) -> Result<(), BackendError> {
        self.stop_pod(&(job, task.to_string()));
        Ok(())
    }

    fn delete_all(&mut self, job: JobId) -> Result<usize, BackendError> {
        if let Some(n) = self.delete_refusals.get_mut(&job).filter(|n| **n > 0) {
            *n -= 1;
            return Err(BackendError::DeleteRefused {
                job,
                reason: "injected refusal".into(),
            });
        }
        let names: Vec<TaskKey> = self
            .names
            .range((job, String::new())..)
            .take_while(|(k, _)| k.0 == job)
            .map(|(k, _)| k.clone())
            .collect();
        let mut removed = 0;
        for key in names {
            self.names.remove(&key);
            removed += 1;
        }
        let keys: Vec<TaskKey> = self
            .pods
            .range((job, String::new())..)
            .take_while(|(k, _)| k.0 == job)
            .map(|(k, _)| k.clone())
            .collect();
        for key in keys {
            self.stop_pod(&key);
            self.pods.remove(&key);
            removed += 1;
        }
        if removed > 0 {
            self.emit(BackendEventKind::DeleteConfirmed { job });
        }
        Ok(removed)
    }

    fn inventory(&self) -> Vec<Node> {
        self.inventory.nodes()
    }

    fn resolve(&self, job: JobId, task: &str) -> Result<String, BackendError> {
        self.names
            .get(&(job, task.to_string()))
            .cloned()
            .ok_or_else(|| BackendError::UnknownTask {
                job,
                task: task.to_string(),
            })
    }

    fn object_count(&self, job: JobId) -> usize {
        let pods = self
            .pods
            .range((job, String::new())..)
            .take_while(|(k, _)| k.0 == job)
            .count();
        let names = self
            .names
            .range((job, String::new())..)
            .take_while(|(k, _)| k.0 == job)
            .count();
        pods + names
    }

    fn drain_events(&mut self) -> Vec<BackendEvent> {
        std::mem::take(&mut self.events)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::RendezvousTicket;
    use acm_core::Harness;

    const GIB: u64 = 1 << 30;

    fn gpu_type(boot: Tick) -> InstanceType {
        InstanceType::new("gpu", ResourceVector::cores(64, 8, 256 * GIB), boot)
    }

    fn init_req(job: u64, task: &str, node: &NodeId) -> InitRequest {
        InitRequest {
            job_id: JobId(job),
            task_name: task.into(),
            node_id: node.clone(),
            resources: ResourceVector::cores(8, 1, GIB),
            code_ref: None,
            dataset: None,
            workspace: None,
            rendezvous: None,
        }
    }

    fn task_launch(job: u64, task: &str, node: &NodeId, ticket: Option<RendezvousTicket>) -> TaskLaunch {
        TaskLaunch {
            job_id: JobId(job),
            task_name: task.into(),
            node_id: node.clone(),
            image: "img".into(),
            command: vec![],
            harness: if ticket.is_some() { Harness::Mpi } else { Harness::Plain },
            dataset: None,
            workspace: None,
            rendezvous: ticket,
        }
    }

    /// Runs init then launch for a plain task.
    fn start_plain(sim: &mut SimBackend, job: u64, task: &str, node: &NodeId) {
        sim.launch_init(init_req(job, task, node)).unwrap();
        sim.advance(1);
        sim.launch_task(task_launch(job, task, node, None)).unwrap();
        sim.advance(1);
    }

    #[test]
    fn boot_delay_and_stall() {
        let mut sim = SimBackend::new(SimConfig::default());
        let n = sim.launch_instance(&gpu_type(3)).unwrap();
        sim.advance(2);
        assert!(sim.drain_events().is_empty());
        sim.advance(1);
        let ev = sim.drain_events();
        assert_eq!(ev.len(), 1);
        assert_eq!((ev[0].tick, &ev[0].kind), (3, &BackendEventKind::NodeReady { node: n }));

        let mut sim = SimBackend::new(SimConfig::default());
        let n = sim.launch_instance(&gpu_type(3)).unwrap();
        sim.inject(Fault::BootStall {
            node: n.clone(),
            extra_ticks: 2,
        })
        .unwrap();
        sim.advance(10);
        let ev = sim.drain_events();
        assert_eq!(ev[0].tick, 5);
    }

    #[test]
    fn plain_task_runs_its_script() {
        let mut sim = SimBackend::new(SimConfig::default());
        let n = sim.add_ready_node(&gpu_type(0));
        sim.script_task(
            JobId(1),
            "worker-0",
            TaskScript {
                duration: 4,
                exit_code: 3,
            },
        );
        start_plain(&mut sim, 1, "worker-0", &n);
        assert_eq!(
            sim.resolve(JobId(1), "worker-0").unwrap(),
            format!("sim://{n}/worker-0")
        );
        // Stable until exit.
        assert_eq!(
            sim.resolve(JobId(1), "worker-0").unwrap(),
            sim.resolve(JobId(1), "worker-0").unwrap()
        );
        sim.advance(4);
        let ev = sim.drain_events();
        let last = ev.last().unwrap();
        assert_eq!(last.tick, 6);
        assert_eq!(
            last.kind,
            BackendEventKind::TaskExited {
                job: JobId(1),
                task: "worker-0".into(),
                code: 3
            }
        );
        assert!(sim.resolve(JobId(1), "worker-0").is_err());
        assert_eq!(sim.inventory()[0].allocatable, sim.inventory()[0].capacity);
        assert_eq!(sim.object_count(JobId(1)), 1);
    }

    #[test]
    fn resolve_before_launch_is_unknown() {
        let sim = SimBackend::new(SimConfig::default());
        assert!(matches!(
            sim.resolve(JobId(1), "worker-0"),
            Err(BackendError::UnknownTask { .. })
        ));
    }

    #[test]
    fn node_lost_exits_tasks_before_the_node_event() {
        let mut sim = SimBackend::new(SimConfig {
            default_duration: 100,
            ..Default::default()
        });
        let n = sim.add_ready_node(&gpu_type(0));
        start_plain(&mut sim, 1, "worker-0", &n);
        start_plain(&mut sim, 1, "worker-1", &n);
        sim.drain_events();
        sim.inject(Fault::NodeLost {
            node: n.clone(),
            at: 10,
        })
        .unwrap();
        sim.advance(10);
        let ev = sim.drain_events();
        assert_eq!(ev.len(), 3);
        assert!(ev.iter().all(|e| e.tick == 10));
        assert!(matches!(ev[0].kind, BackendEventKind::TaskExited { code, .. } if code != 0));
        assert!(matches!(ev[1].kind, BackendEventKind::TaskExited { code, .. } if code != 0));
        assert_eq!(ev[2].kind, BackendEventKind::NodeLost { node: n });
        assert!(sim.inventory().is_empty());
    }

    #[test]
    fn task_crash_and_past_tick() {
        let mut sim = SimBackend::new(SimConfig {
            default_duration: 100,
            ..Default::default()
        });
        let n = sim.add_ready_node(&gpu_type(0));
        start_plain(&mut sim, 1, "w-0", &n);
        sim.inject(Fault::TaskCrash {
            job: JobId(1),
            task: "w-0".into(),
            at: 5,
            code: 1,
        })
        .unwrap();
        sim.advance(3);
        let ev = sim.drain_events();
        let last = ev.last().unwrap();
        assert_eq!(
            (last.tick, &last.kind),
            (
                5,
                &BackendEventKind::TaskExited {
                    job: JobId(1),
                    task: "w-0".into(),
                    code: 1
                }
            )
        );
        assert_eq!(
            sim.inject(Fault::NodeLost { node: n, at: 5 }),
            Err(FaultError::PastTick { at: 5, now: 5 })
        );
    }

    #[test]
    fn delete_all_is_idempotent_and_honours_refusals() {
        let mut sim = SimBackend::new(SimConfig::default());
        let n = sim.add_ready_node(&gpu_type(0));
        start_plain(&mut sim, 1, "w-0", &n);
        sim.inject(Fault::DeleteRefusal {
            job: JobId(1),
            count: 1,
        })
        .unwrap();
        assert!(matches!(
            sim.delete_all(JobId(1)),
            Err(BackendError::DeleteRefused { .. })
        ));
        assert_eq!(sim.delete_all(JobId(1)), Ok(2));
        assert_eq!(sim.object_count(JobId(1)), 0);
        assert_eq!(sim.delete_all(JobId(1)), Ok(0));
        assert_eq!(sim.inventory()[0].allocatable, sim.inventory()[0].capacity);
    }

    #[test]
    fn quota_limits_launches() {
        let mut sim = SimBackend::new(SimConfig {
            quotas: BTreeMap::from([("gpu".to_string(), 1)]),
            ..Default::default()
        });
        sim.launch_instance(&gpu_type(2)).unwrap();
        assert_eq!(
            sim.launch_instance(&gpu_type(2)),
            Err(ProviderError::QuotaExceeded("gpu".into()))
        );
    }

    #[test]
    fn terminating_a_busy_node_is_refused() {
        let mut sim = SimBackend::new(SimConfig::default());
        let n = sim.add_ready_node(&gpu_type(0));
        sim.launch_init(init_req(1, "w-0", &n)).unwrap();
        assert_eq!(sim.terminate_instance(&n), Err(ProviderError::NodeBusy(n.clone())));
        sim.kill(JobId(1), "w-0").unwrap();
        sim.terminate_instance(&n).unwrap();
        assert_eq!(sim.inventory()[0].state, NodeState::Terminating);
        sim.advance(1);
        assert!(sim.inventory().is_empty());
    }

    #[test]
    fn mpi_ranks_rendezvous_and_stop() {
        let server = Arc::new(RendezvousServer::new(1));
        let mut sim = SimBackend::new(SimConfig::default()).with_rendezvous(server.clone());
        sim.script_job(
            JobId(1),
            TaskScript {
                duration: 5,
                exit_code: 0,
            },
        );
        let n = sim.add_ready_node(&gpu_type(0));
        let tasks = ["worker-0", "worker-1", "worker-2"];
        server.open(JobId(1), tasks.iter().map(|t| t.to_string()));
        for t in tasks {
            sim.launch_init(init_req(1, t, &n)).unwrap();
        }
        sim.advance(1);
        for (rank, t) in tasks.iter().enumerate() {
            let ticket = RendezvousTicket {
                endpoint: SIM_RENDEZVOUS_ENDPOINT.into(),
                generation: 0,
                rank: rank as u32,
            };
            sim.launch_task(task_launch(1, t, &n, Some(ticket))).unwrap();
        }
        // Containers start and register at tick 2; the first two see the
        // barrier open on their tick-3 poll.
        sim.advance(2);
        let started = sim
            .drain_events()
            .into_iter()
            .filter(|e| matches!(e.kind, BackendEventKind::TaskStarted { .. }))
            .count();
        assert_eq!(started, 3);
        sim.advance(5);
        let ev = sim.drain_events();
        assert!(
            matches!(&ev[..], [BackendEvent { kind: BackendEventKind::TaskExited { task, code: 0, .. }, .. }] if task == "worker-0")
        );
        server.graceful_stop(JobId(1));
        sim.advance(2);
        let exits: Vec<_> = sim
            .drain_events()
            .into_iter()
            .filter_map(|e| match e.kind {
                BackendEventKind::TaskExited { task, code, .. } => Some((task, code)),
                _ => None,
            })
            .collect();
        assert_eq!(exits, [("worker-1".to_string(), 0), ("worker-2".to_string(), 0)]);
        assert_eq!(server.stop_acks(JobId(1)), ["worker-1", "worker-2"]);
    }

    #[test]
    fn rendezvous_outage_fails_preflight() {
        let server = Arc::new(RendezvousServer::new(1));
        let mut sim = SimBackend::new(SimConfig::default()).with_rendezvous(server);
        let n = sim.add_ready_node(&gpu_type(0));
        sim.inject(Fault::RendezvousDown { from: 1, until: 3 }).unwrap();
        let mut req = init_req(1, "worker-0", &n);
        req.rendezvous = Some(RendezvousTicket {
            endpoint: SIM_RENDEZVOUS_ENDPOINT.into(),
            generation: 0,
            rank: 0,
        });
        sim.launch_init(req).unwrap();
        sim.advance(1);
        let ev = sim.drain_events();
        let BackendEventKind::InitCompleted { report, .. } = &ev[0].kind else {
            panic!()
        };
        assert!(!report.passed());
        assert!(report
            .failure
            .as_ref()
            .unwrap()
            .to_string()
            .contains(SIM_RENDEZVOUS_ENDPOINT));
        assert_eq!(sim.inventory()[0].allocatable, sim.inventory()[0].capacity);
    }

    #[test]
    fn same_script_same_events() {
        fn run() -> Vec<BackendEvent> {
            let mut sim = SimBackend::new(SimConfig::default());
            let n = sim.add_ready_node(&gpu_type(0));
            let m = sim.launch_instance(&gpu_type(2)).unwrap();
            start_plain(&mut sim, 1, "a-0", &n);
            start_plain(&mut sim, 2, "b-0", &n);
            sim.inject(Fault::NodeLost { node: m, at: 9 }).unwrap();
            sim.advance(20);
            sim.drain_events()
        }
        let a = serde_json::to_string(&run()).unwrap();
        let b = serde_json::to_string(&run()).unwrap();
        assert_eq!(a, b);
    }
}
