//! Runs scenarios on the simulated backend and checks the cluster invariants
//! after every tick.

use std::collections::BTreeMap;
use std::sync::Arc;

use acm_core::packing::count_bins;
use acm_core::{
    FailurePolicy, Harness, JobId, JobRecord, JobSpec, JobState, NodeId, ResourceVector, TaskGroupSpec, TaskRole, Tick,
};
use acm_storage::archive::archive_files;
use acm_storage::CodeStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autoscaler::AutoscalerConfig;
use crate::backend::sim::{Fault, SimBackend, SimConfig, TaskScript, SIM_RENDEZVOUS_ENDPOINT};
use crate::backend::{Backend, BackendEvent, NodeState};
use crate::events::{EventLog, EventRecord};
use crate::harness::RendezvousServer;
use crate::plane::{ControlPlane, PlaneConfig};
use crate::scenario::{FleetType, Scenario, ScenarioFault, ScenarioJob, ScenarioTask};
use crate::scheduler::SchedulerConfig;

/// Ticks allowed for cleanup after the scenario's own run ends.
const DRAIN_TICKS: Tick = 300;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub tick: Tick,
    pub invariant: &'static str,
    pub detail: String,
}

pub struct Outcome {
    pub scenario: Scenario,
    /// Whether every job finished on its own within `max_ticks`.
    pub completed: bool,
    pub ticks: Tick,
    pub job_ids: BTreeMap<String, JobId>,
    pub jobs: BTreeMap<JobId, JobRecord>,
    pub events: Vec<EventRecord>,
    pub backend_events: Vec<BackendEvent>,
    pub violations: Vec<Violation>,
}

impl Outcome {
    pub fn job(&self, name: &str) -> &JobRecord {
        &self.jobs[&self.job_ids[name]]
    }

    pub fn events_jsonl(&self) -> String {
        self.events
            .iter()
            .map(|r| serde_json::to_string(r).expect("event records serialize") + "\n")
            .collect()
    }

    pub fn backend_jsonl(&self) -> String {
        self.backend_events
            .iter()
            .map(|r| serde_json::to_string(r).expect("backend events serialize") + "\n")
            .collect()
    }

    /// Transition records of one job, as `(task, old, new)`.
    pub fn transitions(&self, name: &str) -> Vec<(Option<String>, Option<String>, String)> {
        let id = self.job_ids[name];
        self.events
            .iter()
            .filter_map(|r| match r {
                EventRecord::Transition {
                    job_id,
                    task_name,
                    old_state,
                    new_state,
                    ..
                } if *job_id == id => Some((task_name.clone(), old_state.clone(), new_state.clone())),
                _ => None,
            })
            .collect()
    }

    /// Jobs that started before an earlier-submitted job.
    pub fn fifo_violations(&self) -> Vec<String> {
        let started: Vec<(JobId, Tick)> = self.jobs.values().filter_map(|j| Some((j.id, j.started_at?))).collect();
        started
            .windows(2)
            .filter(|w| w[1].1 < w[0].1)
            .map(|w| format!("{} started at {} before {} at {}", w[1].0, w[1].1, w[0].0, w[0].1))
            .collect()
    }
}

pub struct Simulation {
    scenario: Scenario,
    plane: ControlPlane<SimBackend>,
    rendezvous: Arc<RendezvousServer>,
    job_ids: BTreeMap<String, JobId>,
    /// `(at, index into scenario.jobs)` in submission order.
    schedule: Vec<(Tick, usize)>,
    next_submission: usize,
    specs: BTreeMap<usize, JobSpec>,
    backend_events: Vec<BackendEvent>,
    violations: Vec<Violation>,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Self {
        let rendezvous = Arc::new(RendezvousServer::new(scenario.seed));
        let code = Arc::new(CodeStore::in_memory(1 << 20));
        let config = SimConfig {
            init_ticks: scenario.init_ticks,
            default_duration: scenario.default_duration,
            quotas: scenario
                .fleet
                .iter()
                .filter_map(|f| Some((f.instance_type.name.clone(), f.quota?)))
                .collect(),
        };
        let mut sim = SimBackend::new(config)
            .with_rendezvous(rendezvous.clone())
            .with_code_store(code.clone());
        let catalog = scenario.catalog();
        for (ty, count) in &scenario.nodes {
            let t = catalog.get(ty).expect("validated at parse");
            for _ in 0..*count {
                sim.add_ready_node(t);
            }
        }

        let mut schedule: Vec<(Tick, usize)> = scenario.jobs.iter().enumerate().map(|(i, j)| (j.at, i)).collect();
        schedule.sort();
        let mut job_ids = BTreeMap::new();
        let mut specs = BTreeMap::new();
        for (n, &(_, i)) in schedule.iter().enumerate() {
            let job = &scenario.jobs[i];
            let id = JobId(n as u64 + 1);
            job_ids.insert(job.name.clone(), id);
            let mut spec = job.spec.clone();
            if job.upload_code {
                let body = format!("print('{}')\n", job.name);
                let archive = archive_files([("train.py", body.as_bytes())]).expect("in-memory archive");
                spec.code_ref = Some(code.put_code(&archive).expect("small archive").digest);
            }
            specs.insert(i, spec);
            script(&mut sim, &scenario, job, id);
        }
        for fault in &scenario.faults {
            let f = to_fault(fault, &job_ids);
            sim.inject(f).expect("scenario faults are in the future");
        }

        let plane_config = PlaneConfig {
            scheduler: scenario.scheduler,
            autoscaler: scenario.autoscaler,
        };
        let plane = ControlPlane::new(
            sim,
            catalog,
            plane_config,
            rendezvous.clone(),
            SIM_RENDEZVOUS_ENDPOINT,
            Arc::new(EventLog::new()),
        )
        .expect("validated at parse")
        .with_code_store(code);
        Self {
            scenario,
            plane,
            rendezvous,
            job_ids,
            schedule,
            next_submission: 0,
            specs,
            backend_events: Vec::new(),
            violations: Vec::new(),
        }
    }

    pub fn plane(&self) -> &ControlPlane<SimBackend> {
        &self.plane
    }

    pub fn job_id(&self, name: &str) -> JobId {
        self.job_ids[name]
    }

    fn submit_due(&mut self) {
        let now = self.plane.now();
        while let Some(&(at, i)) = self.schedule.get(self.next_submission) {
            if at > now {
                break;
            }
            let spec = self.specs[&i].clone();
            let id = self.plane.submit(spec, None).expect("scenario jobs are valid");
            debug_assert_eq!(id, self.job_ids[&self.scenario.jobs[i].name]);
            self.next_submission += 1;
        }
    }

    fn finished(&self) -> bool {
        self.next_submission == self.schedule.len()
            && self.plane.all_terminal()
            && self.plane.scheduler().pending_cleanups().is_empty()
    }

    /// Submits due jobs and advances one tick, checking invariants.
    pub fn step(&mut self) {
        self.submit_due();
        let events = self.plane.step();
        self.backend_events.extend(events);
        let now = self.plane.now();
        let found = check_tick(&self.plane, now);
        self.violations.extend(found);
    }

    /// Runs to completion or `max_ticks`, then cancels whatever is left and
    /// lets cleanup finish.
    pub fn run(mut self) -> Outcome {
        while !self.finished() && self.plane.now() < self.scenario.max_ticks {
            self.step();
        }
        let completed = self.finished();
        if !completed {
            self.plane.close();
            let live: Vec<JobId> = self
                .plane
                .scheduler()
                .jobs()
                .values()
                .filter(|j| !j.state.is_terminal())
                .map(|j| j.id)
                .collect();
            for id in live {
                self.plane.cancel(id).expect("live job");
            }
            self.next_submission = self.schedule.len();
            let mut budget = DRAIN_TICKS;
            while !self.finished() && budget > 0 {
                self.step();
                budget -= 1;
            }
        }
        let now = self.plane.now();
        let final_check = check_final(&self.plane, &self.rendezvous, now);
        self.violations.extend(final_check);
        Outcome {
            completed,
            ticks: now,
            job_ids: self.job_ids,
            jobs: self.plane.scheduler().jobs().clone(),
            events: self.plane.events().records(),
            backend_events: self.backend_events,
            violations: self.violations,
            scenario: self.scenario,
        }
    }
}

pub fn run_scenario(scenario: Scenario) -> Outcome {
    Simulation::new(scenario).run()
}

fn script(sim: &mut SimBackend, scenario: &Scenario, job: &ScenarioJob, id: JobId) {
    let base = TaskScript {
        duration: job.duration.unwrap_or(scenario.default_duration),
        exit_code: job.exit_code.unwrap_or(0),
    };
    if job.duration.is_some() || job.exit_code.is_some() {
        sim.script_job(id, base);
    }
    for t in &job.tasks {
        sim.script_task(
            id,
            &t.name,
            TaskScript {
                duration: t.duration.unwrap_or(base.duration),
                exit_code: t.exit_code.unwrap_or(base.exit_code),
            },
        );
    }
}

fn to_fault(f: &ScenarioFault, ids: &BTreeMap<String, JobId>) -> Fault {
    match f.clone() {
        ScenarioFault::NodeLost { node, at } => Fault::NodeLost {
            node: NodeId::new(node),
            at,
        },
        ScenarioFault::TaskCrash { job, task, at, code } => Fault::TaskCrash {
            job: ids[&job],
            task,
            at,
            code,
        },
        ScenarioFault::DeleteRefusal { job, count } => Fault::DeleteRefusal { job: ids[&job], count },
        ScenarioFault::BootStall { node, extra_ticks } => Fault::BootStall {
            node: NodeId::new(node),
            extra_ticks,
        },
        ScenarioFault::LaunchReject { job, task, count } => Fault::LaunchReject {
            job: ids[&job],
            task,
            count,
        },
        ScenarioFault::RendezvousDown { from, until } => Fault::RendezvousDown { from, until },
        ScenarioFault::CodeTamper { job } => Fault::CodeTamper { job: ids[&job] },
    }
}

/// Invariants that must hold between any two ticks.
pub fn check_tick(plane: &ControlPlane<SimBackend>, now: Tick) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut v = |invariant: &'static str, detail: String| {
        out.push(Violation {
            tick: now,
            invariant,
            detail,
        })
    };
    let sim = plane.backend();
    let sched = plane.scheduler();
    let inventory = sim.inventory();

    // Resources bound per node according to the job records alone.
    let mut bound: BTreeMap<&NodeId, ResourceVector> = BTreeMap::new();
    for job in sched.jobs().values() {
        let holding: Vec<_> = job.tasks.iter().filter(|t| t.state.is_bound()).collect();
        let is_holding = !holding.is_empty();
        if let Err(e) = job.check_consistency() {
            v("state_consistency", e);
        }
        if is_holding && matches!(job.state, JobState::Queued | JobState::Scheduling) {
            v(
                "gang_atomicity",
                format!("{} is {} with bound tasks", job.id, job.state),
            );
        }
        if is_holding && job.state.is_terminal() {
            v(
                "gang_atomicity",
                format!("{} is {} with bound tasks", job.id, job.state),
            );
        }
        if is_holding {
            if let Some(t) = job.tasks.iter().find(|t| t.is_unplaced()) {
                v(
                    "gang_atomicity",
                    format!("{} holds resources while {} is unbound", job.id, t.task_name),
                );
            }
        }
        for t in &job.tasks {
            let reservation = sim.reservation(job.id, &t.task_name);
            let Some(group) = job.spec.group(&t.group) else {
                continue;
            };
            if t.state.is_bound() {
                let Some(node) = t.node_id.as_ref() else { continue };
                match &reservation {
                    Some((n, r)) if n == node && *r == group.resources_per_replica => {}
                    other => v(
                        "binding_agreement",
                        format!("{}/{} bound to {node} but backend holds {other:?}", job.id, t.task_name),
                    ),
                }
                let e = bound.entry(node).or_default();
                *e = e.checked_add(&group.resources_per_replica).unwrap_or(*e);
            } else if let Some(r) = reservation {
                v(
                    "binding_agreement",
                    format!("{}/{} is {} but backend holds {r:?}", job.id, t.task_name, t.state),
                );
            }
        }
        if job.state.is_terminal() && !sched.pending_cleanups().contains_key(&job.id) {
            let residual = sim.object_count(job.id);
            if residual > 0 {
                v(
                    "statelessness",
                    format!("{} is {} with {residual} objects left", job.id, job.state),
                );
            }
        }
    }

    for node in &inventory {
        let used = bound.remove(&node.node_id).unwrap_or_default();
        if !used.fits(&node.capacity) {
            v(
                "no_oversubscription",
                format!("{} has {used} bound over {}", node.node_id, node.capacity),
            );
        }
        match used.checked_add(&node.allocatable) {
            Ok(sum) if sum == node.capacity => {}
            _ => v(
                "conservation",
                format!(
                    "{}: bound {used} + allocatable {} != capacity {}",
                    node.node_id, node.allocatable, node.capacity
                ),
            ),
        }
        if node.state == NodeState::Terminating && !node.running_tasks.is_empty() {
            v("autoscaler_safety", format!("{} terminating with tasks", node.node_id));
        }
        let idle_ok = node.idle_since.is_some() == (node.running_tasks.is_empty() && node.state == NodeState::Ready);
        if !idle_ok {
            v(
                "node_idleness",
                format!("{} idle_since {:?} inconsistent", node.node_id, node.idle_since),
            );
        }
    }
    for (node, used) in bound {
        v("binding_agreement", format!("{used} bound to missing node {node}"));
    }

    // Terminations decided this tick must name idle nodes.
    let live: BTreeMap<&NodeId, &crate::backend::Node> = inventory.iter().map(|n| (&n.node_id, n)).collect();
    for rec in plane.events().records().iter().rev().take_while(|r| r.tick() == now) {
        if let EventRecord::Scaling { terminations, .. } = rec {
            for id in terminations {
                if let Some(n) = live.get(id) {
                    if !n.running_tasks.is_empty() || n.state != NodeState::Terminating {
                        v(
                            "autoscaler_safety",
                            format!("terminated {id} is {:?} with tasks", n.state),
                        );
                    }
                }
            }
        }
    }
    out
}

/// Checks after every job is terminal: nothing left anywhere.
pub fn check_final(plane: &ControlPlane<SimBackend>, rendezvous: &RendezvousServer, now: Tick) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut v = |invariant: &'static str, detail: String| {
        out.push(Violation {
            tick: now,
            invariant,
            detail,
        })
    };
    let sim = plane.backend();
    for job in plane.scheduler().jobs().values() {
        if !job.state.is_terminal() {
            v("termination", format!("{} still {}", job.id, job.state));
        }
        let residual = sim.object_count(job.id);
        if residual > 0 {
            v("statelessness", format!("{} left {residual} objects", job.id));
        }
    }
    for node in sim.inventory() {
        if node.allocatable != node.capacity {
            v(
                "statelessness",
                format!("{} free {} of {}", node.node_id, node.allocatable, node.capacity),
            );
        }
    }
    if rendezvous.job_count() > 0 {
        v(
            "statelessness",
            format!("{} rendezvous entries left", rendezvous.job_count()),
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomOptions {
    pub faults: bool,
    /// `None` picks at random.
    pub backfill: Option<bool>,
}

impl Default for RandomOptions {
    fn default() -> Self {
        Self {
            faults: true,
            backfill: None,
        }
    }
}

const GIB: u64 = 1 << 30;

/// A random but reproducible scenario: fleet, job mix and faults all drawn
/// from `seed`.
pub fn random_scenario(seed: u64, opts: RandomOptions) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sc = Scenario {
        seed,
        init_ticks: rng.random_range(1..=2),
        default_duration: 10,
        max_ticks: 400,
        scheduler: SchedulerConfig {
            backfill_enabled: opts.backfill.unwrap_or_else(|| rng.random_bool(0.5)),
            schedule_interval_ticks: rng.random_range(1..=2),
        },
        ..Scenario::default()
    };

    let type_count = rng.random_range(1..=3);
    for i in 0..type_count {
        let gpus = [0, 1, 2, 4, 8][rng.random_range(0..5)];
        let cpus = [4, 8, 16, 32, 64][rng.random_range(0..5)];
        let mem = [16, 64, 256][rng.random_range(0..3)];
        sc.fleet.push(FleetType {
            instance_type: acm_core::InstanceType::new(
                format!("t{i}"),
                ResourceVector::cores(cpus, gpus, mem * GIB),
                rng.random_range(0..=4),
            ),
            quota: None,
        });
        let n = rng.random_range(0..=3);
        if n > 0 {
            sc.nodes.push((format!("t{i}"), n));
        }
    }

    let job_count = rng.random_range(1..=6);
    let mut max_need = 1;
    for j in 0..job_count {
        let mut groups = Vec::new();
        for g in 0..rng.random_range(1..=2) {
            let ft = &sc.fleet[rng.random_range(0..sc.fleet.len())].instance_type;
            let cap = ft.capacity;
            let res = ResourceVector::new(
                rng.random_range(1..=cap.cpu_millis() / 1000) * 1000 / rng.random_range(1..=2),
                rng.random_range(0..=cap.gpus()),
                rng.random_range(1..=cap.memory_bytes() / GIB) * GIB,
            );
            groups.push(TaskGroupSpec {
                name: format!("g{g}"),
                replicas: rng.random_range(1..=4),
                image: String::new(),
                instance_type: ft.name.clone(),
                resources_per_replica: res,
                command: Vec::new(),
                harness: if rng.random_bool(0.3) {
                    Harness::Mpi
                } else {
                    Harness::Plain
                },
                role: TaskRole::Worker,
            });
        }
        for g in &groups {
            let cap = sc
                .fleet
                .iter()
                .find(|f| f.instance_type.name == g.instance_type)
                .unwrap()
                .instance_type
                .capacity;
            let items = vec![g.resources_per_replica; g.replicas as usize];
            max_need = max_need.max(count_bins(&items, cap).unwrap_or(1) * 2);
        }
        let relaunch = rng.random_bool(0.5);
        let spec = JobSpec {
            name: format!("job{j}"),
            dataset_uri: None,
            workspace_uri: None,
            code_ref: None,
            task_groups: groups,
            failure_policy: if relaunch {
                FailurePolicy::RelaunchFailed
            } else {
                FailurePolicy::TerminateAll
            },
            max_relaunches: if relaunch { rng.random_range(0..=2) } else { 0 },
        };
        let task_names: Vec<String> = spec.tasks().map(|(_, n)| n).collect();
        let mut tasks = Vec::new();
        for name in &task_names {
            if rng.random_bool(0.2) {
                tasks.push(ScenarioTask {
                    name: name.clone(),
                    duration: Some(rng.random_range(1..=40)),
                    exit_code: rng.random_bool(0.3).then(|| rng.random_range(1..=3)),
                });
            }
        }
        sc.jobs.push(ScenarioJob {
            name: format!("job{j}"),
            at: rng.random_range(0..=20),
            spec,
            duration: Some(rng.random_range(1..=30)),
            exit_code: rng.random_bool(0.1).then_some(1),
            upload_code: rng.random_bool(0.8),
            tasks,
        });
    }
    sc.autoscaler = Some(AutoscalerConfig {
        idle_timeout_ticks: rng.random_range(3..=20),
        max_nodes_per_type: max_need.max(4),
        scan_interval_ticks: rng.random_range(1..=5),
    });

    if opts.faults {
        let initial: Vec<String> = {
            let mut names = Vec::new();
            let mut counter = 0;
            for (ty, n) in &sc.nodes {
                for _ in 0..*n {
                    counter += 1;
                    names.push(format!("{ty}-{counter}"));
                }
            }
            names
        };
        for _ in 0..rng.random_range(0..=4) {
            let job = &sc.jobs[rng.random_range(0..sc.jobs.len())];
            let tasks: Vec<String> = job.spec.tasks().map(|(_, n)| n).collect();
            let task = tasks[rng.random_range(0..tasks.len())].clone();
            let fault = match rng.random_range(0..7) {
                0 if !initial.is_empty() => ScenarioFault::NodeLost {
                    node: initial[rng.random_range(0..initial.len())].clone(),
                    at: rng.random_range(1..=60),
                },
                1 => ScenarioFault::TaskCrash {
                    job: job.name.clone(),
                    task,
                    at: rng.random_range(1..=60),
                    code: rng.random_range(1..=200),
                },
                2 => ScenarioFault::DeleteRefusal {
                    job: job.name.clone(),
                    count: rng.random_range(1..=3),
                },
                3 => {
                    let ty = &sc.fleet[rng.random_range(0..sc.fleet.len())].instance_type.name;
                    ScenarioFault::BootStall {
                        node: format!("{ty}-{}", initial.len() + rng.random_range(1..=4)),
                        extra_ticks: rng.random_range(1..=5),
                    }
                }
                4 => ScenarioFault::LaunchReject {
                    job: job.name.clone(),
                    task,
                    count: rng.random_range(1..=2),
                },
                5 => {
                    let from = rng.random_range(1..=30);
                    ScenarioFault::RendezvousDown {
                        from,
                        until: from + rng.random_range(0..=5),
                    }
                }
                _ => ScenarioFault::CodeTamper { job: job.name.clone() },
            };
            sc.faults.push(fault);
        }
    }
    sc
}
