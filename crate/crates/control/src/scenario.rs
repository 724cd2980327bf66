//! Simulator scenario files.
//!
//! One directive per line; `#` starts a comment. Indented `group` and `task`
//! lines belong to the `job` above them.
//!
//! ```text
//! seed 7
//! init_ticks 1
//! default_duration 10
//! max_ticks 500
//! scheduler backfill=off interval=1
//! autoscaler idle_timeout=10 max_nodes=8 scan_interval=2
//! instance_type gpu8 cpu=64 gpu=8 memory=512Gi boot_delay=3 quota=4
//! nodes gpu8 count=2
//! job train at=0 policy=relaunch_failed relaunches=2 duration=20 exit=0 workspace=ws://train
//!   group worker replicas=3 type=gpu8 cpu=8 gpu=1 memory=32Gi harness=mpi role=worker
//!   task worker-1 duration=5 exit=3
//! fault task_crash job=train task=worker-0 at=12 code=137
//! fault node_lost node=gpu8-1 at=30
//! fault delete_refusal job=train count=1
//! fault boot_stall node=gpu8-3 extra=2
//! fault launch_reject job=train task=worker-2 count=1
//! fault rendezvous_down from=4 until=6
//! fault code_tamper job=train
//! ```
//!
//! Jobs are submitted in order of `at`, ties in file order; job ids follow
//! that order. Nodes are named `<type>-<n>` in creation order, initial nodes
//! first. `code=off` on a job skips the code upload.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use acm_core::resources::{format_bytes, parse_bytes, parse_cpu};
use acm_core::{
    validate_job_spec, FailurePolicy, Harness, InstanceCatalog, InstanceType, JobSpec, ResourceVector, TaskGroupSpec,
    TaskRole, Tick,
};
use thiserror::Error;

use crate::autoscaler::AutoscalerConfig;
use crate::scheduler::SchedulerConfig;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FleetType {
    pub instance_type: InstanceType,
    pub quota: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioTask {
    pub name: String,
    pub duration: Option<Tick>,
    pub exit_code: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioJob {
    pub name: String,
    pub at: Tick,
    pub spec: JobSpec,
    pub duration: Option<Tick>,
    pub exit_code: Option<i32>,
    pub upload_code: bool,
    pub tasks: Vec<ScenarioTask>,
}

/// A fault with jobs referenced by scenario name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScenarioFault {
    NodeLost {
        node: String,
        at: Tick,
    },
    TaskCrash {
        job: String,
        task: String,
        at: Tick,
        code: i32,
    },
    DeleteRefusal {
        job: String,
        count: u32,
    },
    BootStall {
        node: String,
        extra_ticks: Tick,
    },
    LaunchReject {
        job: String,
        task: String,
        count: u32,
    },
    RendezvousDown {
        from: Tick,
        until: Tick,
    },
    CodeTamper {
        job: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub seed: u64,
    pub init_ticks: Tick,
    pub default_duration: Tick,
    pub max_ticks: Tick,
    pub scheduler: SchedulerConfig,
    pub autoscaler: Option<AutoscalerConfig>,
    pub fleet: Vec<FleetType>,
    pub nodes: Vec<(String, u32)>,
    pub jobs: Vec<ScenarioJob>,
    pub faults: Vec<ScenarioFault>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 0,
            init_ticks: 1,
            default_duration: 10,
            max_ticks: 1000,
            scheduler: SchedulerConfig::default(),
            autoscaler: None,
            fleet: Vec::new(),
            nodes: Vec::new(),
            jobs: Vec::new(),
            faults: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn catalog(&self) -> InstanceCatalog {
        InstanceCatalog::new(self.fleet.iter().map(|f| f.instance_type.clone())).expect("validated at parse")
    }

    /// Jobs in submission order.
    pub fn submission_order(&self) -> Vec<&ScenarioJob> {
        let mut jobs: Vec<&ScenarioJob> = self.jobs.iter().collect();
        jobs.sort_by_key(|j| j.at);
        jobs
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut sc = Scenario::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| ScenarioError { line, message };
            let content = raw.split('#').next().unwrap_or("");
            if content.trim().is_empty() {
                continue;
            }
            let indented = content.starts_with(' ') || content.starts_with('\t');
            let mut words = content.split_whitespace();
            let directive = words.next().expect("non-empty line");
            let rest: Vec<&str> = words.collect();
            let mut args = Args::new(&rest).map_err(err)?;
            match (indented, directive) {
                (false, "seed") => sc.seed = args.single().map_err(err)?,
                (false, "init_ticks") => sc.init_ticks = args.single().map_err(err)?,
                (false, "default_duration") => sc.default_duration = args.single().map_err(err)?,
                (false, "max_ticks") => sc.max_ticks = args.single().map_err(err)?,
                (false, "scheduler") => {
                    sc.scheduler = SchedulerConfig {
                        backfill_enabled: args.switch("backfill", false).map_err(err)?,
                        schedule_interval_ticks: args.num("interval", Some(1)).map_err(err)?,
                    };
                    if sc.scheduler.schedule_interval_ticks == 0 {
                        return Err(err("interval must be positive".into()));
                    }
                }
                (false, "autoscaler") => {
                    let d = AutoscalerConfig::default();
                    let c = AutoscalerConfig {
                        idle_timeout_ticks: args.num("idle_timeout", Some(d.idle_timeout_ticks)).map_err(err)?,
                        max_nodes_per_type: args.num("max_nodes", Some(d.max_nodes_per_type)).map_err(err)?,
                        scan_interval_ticks: args.num("scan_interval", Some(d.scan_interval_ticks)).map_err(err)?,
                    };
                    c.validate().map_err(|e| err(e.to_string()))?;
                    sc.autoscaler = Some(c);
                }
                (false, "instance_type") => {
                    let name = args.positional().map_err(err)?;
                    let capacity = args.resources().map_err(err)?;
                    let boot = args.num("boot_delay", Some(0)).map_err(err)?;
                    let quota = args.opt_num("quota").map_err(err)?;
                    sc.fleet.push(FleetType {
                        instance_type: InstanceType::new(name, capacity, boot),
                        quota,
                    });
                    InstanceCatalog::new(sc.fleet.iter().map(|f| f.instance_type.clone()))
                        .map_err(|e| err(e.to_string()))?;
                }
                (false, "nodes") => {
                    let ty = args.positional().map_err(err)?;
                    if !sc.fleet.iter().any(|f| f.instance_type.name == ty) {
                        return Err(err(format!("unknown instance type {ty}")));
                    }
                    sc.nodes.push((ty, args.num("count", None).map_err(err)?));
                }
                (false, "job") => {
                    let name = args.positional().map_err(err)?;
                    if sc.jobs.iter().any(|j| j.name == name) {
                        return Err(err(format!("duplicate job {name}")));
                    }
                    let policy = match args.text("policy").as_deref() {
                        None | Some("terminate_all") => FailurePolicy::TerminateAll,
                        Some("relaunch_failed") => FailurePolicy::RelaunchFailed,
                        Some(other) => return Err(err(format!("unknown policy {other}"))),
                    };
                    sc.jobs.push(ScenarioJob {
                        at: args.num("at", Some(0)).map_err(err)?,
                        duration: args.opt_num("duration").map_err(err)?,
                        exit_code: args.opt_num("exit").map_err(err)?,
                        upload_code: args.switch("code", true).map_err(err)?,
                        spec: JobSpec {
                            name: name.clone(),
                            dataset_uri: args.text("dataset"),
                            workspace_uri: args.text("workspace"),
                            code_ref: None,
                            task_groups: Vec::new(),
                            failure_policy: policy,
                            max_relaunches: args.num("relaunches", Some(0)).map_err(err)?,
                        },
                        name,
                        tasks: Vec::new(),
                    });
                }
                (true, "group") => {
                    let job = sc.jobs.last_mut().ok_or_else(|| err("group outside a job".into()))?;
                    let name = args.positional().map_err(err)?;
                    let harness = match args.text("harness").as_deref() {
                        None | Some("plain") => Harness::Plain,
                        Some("mpi") => Harness::Mpi,
                        Some(other) => return Err(err(format!("unknown harness {other}"))),
                    };
                    let role = match args.text("role").as_deref() {
                        None | Some("worker") => TaskRole::Worker,
                        Some("parameter_server") => TaskRole::ParameterServer,
                        Some("evaluator") => TaskRole::Evaluator,
                        Some(other) => return Err(err(format!("unknown role {other}"))),
                    };
                    job.spec.task_groups.push(TaskGroupSpec {
                        name,
                        replicas: args.num("replicas", Some(1)).map_err(err)?,
                        image: args.text("image").unwrap_or_default(),
                        instance_type: args.text("type").ok_or_else(|| err("group needs type=".into()))?,
                        resources_per_replica: args.resources().map_err(err)?,
                        command: Vec::new(),
                        harness,
                        role,
                    });
                }
                (true, "task") => {
                    let job = sc.jobs.last_mut().ok_or_else(|| err("task outside a job".into()))?;
                    job.tasks.push(ScenarioTask {
                        name: args.positional().map_err(err)?,
                        duration: args.opt_num("duration").map_err(err)?,
                        exit_code: args.opt_num("exit").map_err(err)?,
                    });
                }
                (false, "fault") => {
                    let kind = args.positional().map_err(err)?;
                    let fault = match kind.as_str() {
                        "node_lost" => ScenarioFault::NodeLost {
                            node: args.req("node").map_err(err)?,
                            at: args.num("at", None).map_err(err)?,
                        },
                        "task_crash" => ScenarioFault::TaskCrash {
                            job: args.req("job").map_err(err)?,
                            task: args.req("task").map_err(err)?,
                            at: args.num("at", None).map_err(err)?,
                            code: args.num("code", Some(1)).map_err(err)?,
                        },
                        "delete_refusal" => ScenarioFault::DeleteRefusal {
                            job: args.req("job").map_err(err)?,
                            count: args.num("count", Some(1)).map_err(err)?,
                        },
                        "boot_stall" => ScenarioFault::BootStall {
                            node: args.req("node").map_err(err)?,
                            extra_ticks: args.num("extra", None).map_err(err)?,
                        },
                        "launch_reject" => ScenarioFault::LaunchReject {
                            job: args.req("job").map_err(err)?,
                            task: args.req("task").map_err(err)?,
                            count: args.num("count", Some(1)).map_err(err)?,
                        },
                        "rendezvous_down" => ScenarioFault::RendezvousDown {
                            from: args.num("from", None).map_err(err)?,
                            until: args.num("until", None).map_err(err)?,
                        },
                        "code_tamper" => ScenarioFault::CodeTamper {
                            job: args.req("job").map_err(err)?,
                        },
                        other => return Err(err(format!("unknown fault {other}"))),
                    };
                    sc.faults.push(fault);
                }
                (_, other) => return Err(err(format!("unexpected directive {other:?}"))),
            }
            args.finish().map_err(err)?;
        }
        sc.check().map_err(|message| ScenarioError { line: 0, message })?;
        Ok(sc)
    }

    fn check(&self) -> Result<(), String> {
        let catalog = self.catalog();
        for job in &self.jobs {
            let spec = validate_job_spec(job.spec.clone(), &catalog).map_err(|v| {
                let list: Vec<String> = v.iter().map(ToString::to_string).collect();
                format!("job {}: {}", job.name, list.join("; "))
            })?;
            for t in &job.tasks {
                if !spec.tasks().any(|(_, n)| n == t.name) {
                    return Err(format!("job {} has no task {}", job.name, t.name));
                }
            }
        }
        let job_known = |name: &str| self.jobs.iter().any(|j| j.name == name);
        for f in &self.faults {
            let job = match f {
                ScenarioFault::TaskCrash { job, at, .. } if *at == 0 => {
                    return Err(format!("fault on {job} at tick 0"))
                }
                ScenarioFault::NodeLost { at: 0, node } => return Err(format!("fault on {node} at tick 0")),
                ScenarioFault::RendezvousDown { from, until } if from == &0 || until < from => {
                    return Err(format!("bad rendezvous outage {from}..{until}"))
                }
                ScenarioFault::TaskCrash { job, .. }
                | ScenarioFault::DeleteRefusal { job, .. }
                | ScenarioFault::LaunchReject { job, .. }
                | ScenarioFault::CodeTamper { job } => Some(job),
                _ => None,
            };
            if let Some(job) = job.filter(|j| !job_known(j)) {
                return Err(format!("fault names unknown job {job}"));
            }
        }
        Ok(())
    }

    /// Renders the scenario in the format [`Scenario::parse`] reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let onoff = |b: bool| if b { "on" } else { "off" };
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "init_ticks {}", self.init_ticks);
        let _ = writeln!(out, "default_duration {}", self.default_duration);
        let _ = writeln!(out, "max_ticks {}", self.max_ticks);
        let _ = writeln!(
            out,
            "scheduler backfill={} interval={}",
            onoff(self.scheduler.backfill_enabled),
            self.scheduler.schedule_interval_ticks
        );
        if let Some(a) = &self.autoscaler {
            let _ = writeln!(
                out,
                "autoscaler idle_timeout={} max_nodes={} scan_interval={}",
                a.idle_timeout_ticks, a.max_nodes_per_type, a.scan_interval_ticks
            );
        }
        for f in &self.fleet {
            let t = &f.instance_type;
            let _ = write!(
                out,
                "instance_type {} {} boot_delay={}",
                t.name,
                Res(t.capacity),
                t.boot_delay_ticks
            );
            if let Some(q) = f.quota {
                let _ = write!(out, " quota={q}");
            }
            out.push('\n');
        }
        for (ty, n) in &self.nodes {
            let _ = writeln!(out, "nodes {ty} count={n}");
        }
        for j in &self.jobs {
            let policy = match j.spec.failure_policy {
                FailurePolicy::TerminateAll => "terminate_all",
                FailurePolicy::RelaunchFailed => "relaunch_failed",
            };
            let _ = write!(
                out,
                "job {} at={} policy={} relaunches={}",
                j.name, j.at, policy, j.spec.max_relaunches
            );
            if let Some(d) = j.duration {
                let _ = write!(out, " duration={d}");
            }
            if let Some(e) = j.exit_code {
                let _ = write!(out, " exit={e}");
            }
            if let Some(d) = &j.spec.dataset_uri {
                let _ = write!(out, " dataset={d}");
            }
            if let Some(w) = &j.spec.workspace_uri {
                let _ = write!(out, " workspace={w}");
            }
            if !j.upload_code {
                out.push_str(" code=off");
            }
            out.push('\n');
            for g in &j.spec.task_groups {
                let harness = match g.harness {
                    Harness::Plain => "plain",
                    Harness::Mpi => "mpi",
                };
                let role = match g.role {
                    TaskRole::Worker => "worker",
                    TaskRole::ParameterServer => "parameter_server",
                    TaskRole::Evaluator => "evaluator",
                };
                let _ = write!(
                    out,
                    "  group {} replicas={} type={} {} harness={harness} role={role}",
                    g.name,
                    g.replicas,
                    g.instance_type,
                    Res(g.resources_per_replica)
                );
                if !g.image.is_empty() {
                    let _ = write!(out, " image={}", g.image);
                }
                out.push('\n');
            }
            for t in &j.tasks {
                let _ = write!(out, "  task {}", t.name);
                if let Some(d) = t.duration {
                    let _ = write!(out, " duration={d}");
                }
                if let Some(e) = t.exit_code {
                    let _ = write!(out, " exit={e}");
                }
                out.push('\n');
            }
        }
        for f in &self.faults {
            let line = match f {
                ScenarioFault::NodeLost { node, at } => format!("node_lost node={node} at={at}"),
                ScenarioFault::TaskCrash { job, task, at, code } => {
                    format!("task_crash job={job} task={task} at={at} code={code}")
                }
                ScenarioFault::DeleteRefusal { job, count } => format!("delete_refusal job={job} count={count}"),
                ScenarioFault::BootStall { node, extra_ticks } => format!("boot_stall node={node} extra={extra_ticks}"),
                ScenarioFault::LaunchReject { job, task, count } => {
                    format!("launch_reject job={job} task={task} count={count}")
                }
                ScenarioFault::RendezvousDown { from, until } => format!("rendezvous_down from={from} until={until}"),
                ScenarioFault::CodeTamper { job } => format!("code_tamper job={job}"),
            };
            let _ = writeln!(out, "fault {line}");
        }
        out
    }
}

/// `cpu=.. gpu=.. memory=..` in scenario syntax.
struct Res(ResourceVector);

impl fmt::Display for Res {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = self.0;
        let millis = r.cpu_millis();
        if millis % 1000 == 0 {
            write!(f, "cpu={}", millis / 1000)?;
        } else {
            write!(f, "cpu={millis}m")?;
        }
        let mem = format_bytes(r.memory_bytes());
        write!(f, " gpu={} memory={mem}", r.gpus())
    }
}

/// `key=value` arguments of one line, with at most one leading positional.
struct Args<'a> {
    positional: Option<&'a str>,
    pairs: BTreeMap<&'a str, &'a str>,
}

impl<'a> Args<'a> {
    fn new(words: &[&'a str]) -> Result<Self, String> {
        let mut positional = None;
        let mut pairs = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            match w.split_once('=') {
                Some((k, v)) => {
                    if pairs.insert(k, v).is_some() {
                        return Err(format!("{k} given twice"));
                    }
                }
                None if i == 0 => positional = Some(*w),
                None => return Err(format!("expected key=value, got {w:?}")),
            }
        }
        Ok(Self { positional, pairs })
    }

    fn positional(&mut self) -> Result<String, String> {
        self.positional
            .take()
            .map(str::to_string)
            .ok_or_else(|| "missing name".to_string())
    }

    fn single<T: std::str::FromStr>(&mut self) -> Result<T, String> {
        let v = self.positional()?;
        v.parse().map_err(|_| format!("invalid number {v:?}"))
    }

    fn text(&mut self, key: &str) -> Option<String> {
        self.pairs.remove(key).map(str::to_string)
    }

    fn req(&mut self, key: &str) -> Result<String, String> {
        self.text(key).ok_or_else(|| format!("missing {key}="))
    }

    fn opt_num<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, String> {
        self.pairs
            .remove(key)
            .map(|v| v.parse().map_err(|_| format!("invalid {key}={v}")))
            .transpose()
    }

    fn num<T: std::str::FromStr>(&mut self, key: &str, default: Option<T>) -> Result<T, String> {
        match self.opt_num(key)? {
            Some(v) => Ok(v),
            None => default.ok_or_else(|| format!("missing {key}=")),
        }
    }

    fn switch(&mut self, key: &str, default: bool) -> Result<bool, String> {
        match self.pairs.remove(key) {
            None => Ok(default),
            Some("on" | "true" | "yes") => Ok(true),
            Some("off" | "false" | "no") => Ok(false),
            Some(v) => Err(format!("invalid {key}={v}")),
        }
    }

    fn resources(&mut self) -> Result<ResourceVector, String> {
        let cpu = match self.pairs.remove("cpu") {
            Some(v) => parse_cpu(v).map_err(|e| e.to_string())?,
            None => 0,
        };
        let gpu = self.opt_num("gpu")?.unwrap_or(0);
        let memory = match self.pairs.remove("memory") {
            Some(v) => parse_bytes(v).map_err(|e| e.to_string())?,
            None => 0,
        };
        Ok(ResourceVector::new(cpu, gpu, memory))
    }

    fn finish(self) -> Result<(), String> {
        if let Some(p) = self.positional {
            return Err(format!("unexpected {p:?}"));
        }
        match self.pairs.keys().next() {
            Some(k) => Err(format!("unknown key {k}")),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = "\
seed 7
scheduler backfill=on interval=2
autoscaler idle_timeout=10 max_nodes=8 scan_interval=2
instance_type gpu8 cpu=64 gpu=8 memory=512Gi boot_delay=3 quota=4
nodes gpu8 count=2
job train at=0 policy=relaunch_failed relaunches=2 duration=20 workspace=ws://train
  group worker replicas=3 type=gpu8 cpu=8 gpu=1 memory=32Gi harness=mpi # comment
  task worker-1 duration=5 exit=3
fault task_crash job=train task=worker-0 at=12 code=137
fault rendezvous_down from=4 until=6
";

    #[test]
    fn parses_the_documented_example() {
        let sc = Scenario::parse(EXAMPLE).unwrap();
        assert_eq!(sc.seed, 7);
        assert!(sc.scheduler.backfill_enabled);
        assert_eq!(sc.fleet[0].quota, Some(4));
        assert_eq!(
            sc.fleet[0].instance_type.capacity,
            ResourceVector::cores(64, 8, 512 << 30)
        );
        let job = &sc.jobs[0];
        assert_eq!(job.spec.failure_policy, FailurePolicy::RelaunchFailed);
        assert_eq!(job.spec.task_groups[0].harness, Harness::Mpi);
        assert_eq!(job.tasks[0].exit_code, Some(3));
        assert_eq!(sc.faults.len(), 2);
    }

    #[test]
    fn round_trips_through_text() {
        let sc = Scenario::parse(EXAMPLE).unwrap();
        assert_eq!(Scenario::parse(&sc.to_text()).unwrap(), sc);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = Scenario::parse("seed 1\nnodes gpu8 count=1\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = Scenario::parse("seed 1\nbogus 3\n").unwrap_err();
        assert!(e.message.contains("bogus"));
        let e = Scenario::parse("instance_type t cpu=1\njob a\n  group w type=t cpu=2\n").unwrap_err();
        assert!(e.message.contains("exceeds"), "{e}");
        let e = Scenario::parse("instance_type t cpu=1 color=red\n").unwrap_err();
        assert!(e.message.contains("color"));
    }
}
