//! Acceptance suite. Each criterion prints one PASS or FAIL line; the
//! process exits nonzero if any criterion fails.

#[path = "../common/mod.rs"]
mod common;
#[path = "../../../train/tests/oracle/mod.rs"]
mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use acm_control::backend::{Backend, NodeState};
use acm_control::events::EventRecord;
use acm_control::harness::{Credentials, Proceed, RendezvousError, RendezvousServer, Reply};
use acm_control::scenario::Scenario;
use acm_control::simulation::{random_scenario, run_scenario, Outcome, RandomOptions, Simulation};
use acm_core::{JobId, JobState, ResourceVector};
use acm_storage::{digest_of, CodeStore, LogCursor, LogStore, MountRef, MountTable, StorageError};
use acm_train::{normalized_steps, BatchTopology, LrSchedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {{
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        let failed = !$cond;
        if failed {
            return Err(format!($($msg)+));
        }
    }};
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gang-atomicity", gang_atomicity),
        ("failure-policy", failure_policy),
        ("statelessness", statelessness),
        ("autoscaler-convergence", autoscaler_convergence),
        ("rendezvous-barrier", rendezvous_barrier),
        ("local-end-to-end", local_end_to_end),
        ("train-utils-oracle", train_utils_oracle),
        ("storage", storage),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({detail}; {secs:.1}s)"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

const SCENARIOS: u64 = 1000;

fn gang_atomicity() -> Check {
    let started = Instant::now();
    let mut ticks = 0;
    for seed in 0..SCENARIOS {
        let out = run_scenario(random_scenario(seed, RandomOptions::default()));
        ticks += out.ticks;
        let bad: Vec<_> = out
            .violations
            .iter()
            .filter(|v| {
                matches!(
                    v.invariant,
                    "gang_atomicity" | "no_oversubscription" | "conservation" | "binding_agreement"
                )
            })
            .collect();
        ensure!(bad.is_empty(), "seed {seed}: {bad:?}");
        ensure!(out.violations.is_empty(), "seed {seed}: {:?}", out.violations);
    }
    let elapsed = started.elapsed();
    ensure!(elapsed.as_secs() < 60, "{SCENARIOS} scenarios took {elapsed:?}");
    Ok(format!("{SCENARIOS} scenarios, {ticks} ticks checked"))
}

/// `tick task old->new reason` per transition of job `train`.
fn trace(out: &Outcome) -> Vec<String> {
    let id = out.job_ids["train"];
    out.events
        .iter()
        .filter_map(|r| match r {
            EventRecord::Transition {
                tick,
                job_id,
                task_name,
                old_state,
                new_state,
                reason,
                ..
            } if *job_id == id => Some(format!(
                "{tick} {} {}->{new_state} {reason}",
                task_name.as_deref().unwrap_or("job"),
                old_state.as_deref().unwrap_or("-"),
            )),
            _ => None,
        })
        .collect()
}

fn plain_job(policy: &str) -> String {
    format!(
        "seed 11
instance_type gpu8 cpu=64 gpu=8 memory=512Gi boot_delay=3
nodes gpu8 count=2
job train at=0 {policy} duration=20
  group worker replicas=3 type=gpu8 cpu=8 gpu=4 memory=64Gi harness=plain role=worker
fault task_crash job=train task=worker-1 at=8 code=137
"
    )
}

const START: [&str; 10] = [
    "0 job -->Queued submitted",
    "1 job Queued->Scheduling gang placement found",
    "1 worker-0 Pending->Initializing bound to gpu8-1",
    "1 worker-1 Pending->Initializing bound to gpu8-1",
    "1 worker-2 Pending->Initializing bound to gpu8-2",
    "1 job Scheduling->Initializing all tasks bound",
    "3 worker-0 Initializing->Running container started",
    "3 worker-1 Initializing->Running container started",
    "3 worker-2 Initializing->Running container started",
    "3 job Initializing->Running all tasks running",
];

fn failure_policy() -> Check {
    let cases: [(&str, &[&str]); 2] = [
        (
            "policy=terminate_all",
            &[
                "8 worker-1 Running->Failed exited with code 137",
                "8 worker-0 Running->Terminated terminated after worker-1 failed",
                "8 worker-2 Running->Terminated terminated after worker-1 failed",
                "8 job Running->Failed worker-1 failed: exited with code 137",
            ],
        ),
        (
            "policy=relaunch_failed relaunches=1",
            &[
                "8 worker-1 Running->Failed exited with code 137",
                "8 worker-1 Failed->Pending relaunch 1 of 1",
                "8 worker-1 Pending->Initializing bound to gpu8-1",
                "10 worker-1 Initializing->Running container started",
                "23 worker-0 Running->Succeeded exited with code 0",
                "23 worker-2 Running->Succeeded exited with code 0",
                "30 worker-1 Running->Succeeded exited with code 0",
                "30 job Running->Succeeded all tasks succeeded",
            ],
        ),
    ];
    for (policy, tail) in cases {
        let text = plain_job(policy);
        let want: Vec<String> = START.iter().chain(tail).map(|s| s.to_string()).collect();
        let a = run_scenario(Scenario::parse(&text).map_err(|e| e.to_string())?);
        let b = run_scenario(Scenario::parse(&text).map_err(|e| e.to_string())?);
        ensure!(trace(&a) == want, "{policy}: got {:#?}", trace(&a));
        ensure!(a.violations.is_empty(), "{policy}: {:?}", a.violations);
        ensure!(
            a.events_jsonl() == b.events_jsonl(),
            "{policy}: event logs differ between runs"
        );
        ensure!(
            a.backend_jsonl() == b.backend_jsonl(),
            "{policy}: backend logs differ between runs"
        );
    }
    for seed in 0..50 {
        let a = run_scenario(random_scenario(seed, RandomOptions::default()));
        let b = run_scenario(random_scenario(seed, RandomOptions::default()));
        ensure!(a.events_jsonl() == b.events_jsonl(), "seed {seed}: event logs differ");
        ensure!(
            a.backend_jsonl() == b.backend_jsonl(),
            "seed {seed}: backend logs differ"
        );
    }
    Ok("2 scripted sequences exact, 52 traces byte-identical on rerun".into())
}

fn free_capacity(sim: &Simulation) -> BTreeMap<String, ResourceVector> {
    sim.plane()
        .backend()
        .inventory()
        .iter()
        .map(|n| (n.node_id.to_string(), n.allocatable))
        .collect()
}

fn statelessness() -> Check {
    // Every trace: no job left objects once terminal and cleaned up.
    let mut terminal = 0;
    for seed in 0..SCENARIOS {
        let out = run_scenario(random_scenario(seed, RandomOptions::default()));
        let stale: Vec<_> = out
            .violations
            .iter()
            .filter(|v| v.invariant == "statelessness")
            .collect();
        ensure!(stale.is_empty(), "seed {seed}: {stale:?}");
        terminal += out.jobs.values().filter(|j| j.state.is_terminal()).count();
    }

    // Jobs run one after another on a fixed fleet, with failures, relaunches
    // and refused deletes: free capacity after each equals what it was before.
    let text = "
seed 5
instance_type gpu8 cpu=64 gpu=8 memory=512Gi boot_delay=3
instance_type cpu16 cpu=16 gpu=0 memory=64Gi boot_delay=1
nodes gpu8 count=2
nodes cpu16 count=1
job ok at=0 policy=terminate_all duration=5
  group worker replicas=3 type=gpu8 cpu=8 gpu=4 memory=64Gi harness=plain role=worker
  group ps replicas=1 type=cpu16 cpu=4 gpu=0 memory=8Gi harness=plain role=parameter_server
job crash at=20 policy=terminate_all duration=10
  group worker replicas=2 type=gpu8 cpu=8 gpu=8 memory=64Gi harness=mpi role=worker
job relaunch at=40 policy=relaunch_failed relaunches=2 duration=10
  group worker replicas=3 type=gpu8 cpu=8 gpu=2 memory=64Gi harness=mpi role=worker
job refused at=70 policy=terminate_all duration=3
  group worker replicas=2 type=cpu16 cpu=4 gpu=0 memory=8Gi harness=plain role=worker
fault task_crash job=crash task=worker-1 at=25 code=9
fault task_crash job=relaunch task=worker-0 at=45 code=3
fault delete_refusal job=refused count=2
max_ticks 200
";
    let scenario = Scenario::parse(text).map_err(|e| e.to_string())?;
    let arrivals: BTreeMap<u64, String> = scenario.jobs.iter().map(|j| (j.at, j.name.clone())).collect();
    let mut sim = Simulation::new(scenario);
    let mut before: BTreeMap<String, BTreeMap<String, ResourceVector>> = BTreeMap::new();
    let mut checked = BTreeSet::new();
    while sim.plane().now() < 200 && checked.len() < arrivals.len() {
        if let Some(name) = arrivals.get(&sim.plane().now()) {
            before.insert(name.clone(), free_capacity(&sim));
        }
        sim.step();
        for name in before.keys() {
            if checked.contains(name) {
                continue;
            }
            let id = sim.job_id(name);
            let job = sim.plane().scheduler().job(id).unwrap();
            if job.state.is_terminal() && !sim.plane().scheduler().pending_cleanups().contains_key(&id) {
                ensure!(sim.plane().backend().object_count(id) == 0, "{name}: objects left");
                ensure!(
                    free_capacity(&sim) == before[name],
                    "{name}: free capacity not restored"
                );
                checked.insert(name.clone());
            }
        }
    }
    ensure!(checked.len() == arrivals.len(), "only {checked:?} finished");
    let out = sim.run();
    ensure!(out.violations.is_empty(), "{:?}", out.violations);
    let states: Vec<JobState> = ["ok", "crash", "relaunch", "refused"]
        .iter()
        .map(|n| out.job(n).state)
        .collect();
    ensure!(
        states
            == [
                JobState::Succeeded,
                JobState::Failed,
                JobState::Succeeded,
                JobState::Succeeded
            ],
        "{states:?}"
    );
    Ok(format!(
        "{terminal} terminal jobs clean, 4 sequential jobs restore capacity"
    ))
}

fn ready(sim: &Simulation) -> usize {
    sim.plane()
        .backend()
        .inventory()
        .iter()
        .filter(|n| n.state == NodeState::Ready)
        .count()
}

fn autoscaler_convergence() -> Check {
    let (boot, scan, idle, demand) = (3, 2, 10, 3);
    let text = format!(
        "
instance_type gpu8 cpu=64 gpu=8 memory=512Gi boot_delay={boot} quota=4
autoscaler idle_timeout={idle} max_nodes=8 scan_interval={scan}
max_ticks 400
job train at=0 policy=terminate_all duration=150
  group worker replicas={demand} type=gpu8 cpu=8 gpu=8 memory=64Gi harness=plain role=worker
"
    );
    let mut sim = Simulation::new(Scenario::parse(&text).map_err(|e| e.to_string())?);
    let mut reached = None;
    while sim.plane().now() < 100 {
        sim.step();
        if reached.is_none() && ready(&sim) == demand {
            reached = Some(sim.plane().now());
        }
    }
    let reached = reached.ok_or("planned level never reached")?;
    ensure!(
        reached <= boot + 2 * scan,
        "ready at {reached}, bound {}",
        boot + 2 * scan
    );

    let plans = sim.plane().autoscaler().unwrap().history().len();
    let job = sim.job_id("train");
    while sim.plane().now() < reached + 100 {
        sim.step();
        ensure!(ready(&sim) == demand, "ready count moved at {}", sim.plane().now());
    }
    let churn = sim.plane().autoscaler().unwrap().history().len() - plans;
    ensure!(churn == 0, "{churn} plans during steady demand");

    while sim.plane().scheduler().job(job).unwrap().state != JobState::Succeeded {
        sim.step();
    }
    let idle_from = sim.plane().now();
    while sim
        .plane()
        .backend()
        .inventory()
        .iter()
        .any(|n| n.state != NodeState::Terminating)
    {
        sim.step();
        ensure!(
            sim.plane().now() <= idle_from + idle + scan,
            "nodes still up at {}",
            sim.plane().now()
        );
    }
    let zero_at = sim.plane().now() - idle_from;
    let out = sim.run();
    ensure!(out.violations.is_empty(), "{:?}", out.violations);

    for seed in 0..SCENARIOS {
        let out = run_scenario(random_scenario(seed, RandomOptions::default()));
        let unsafe_: Vec<_> = out
            .violations
            .iter()
            .filter(|v| v.invariant == "autoscaler_safety")
            .collect();
        ensure!(unsafe_.is_empty(), "seed {seed}: {unsafe_:?}");
    }
    Ok(format!(
        "ready at tick {reached}, 0 plans over 100 ticks, zero nodes {zero_at} ticks after idle, no busy node terminated"
    ))
}

const JOB: JobId = JobId(7);

#[derive(Clone, Copy, Debug)]
enum Op {
    Register(usize),
    Poll(usize),
}

fn interleavings(n: usize) -> Vec<Vec<Op>> {
    fn go(next: &mut Vec<usize>, n: usize, prefix: &mut Vec<Op>, out: &mut Vec<Vec<Op>>) {
        if prefix.len() == 2 * n {
            out.push(prefix.clone());
            return;
        }
        for t in 0..n {
            if next[t] == 2 {
                continue;
            }
            prefix.push(if next[t] == 0 { Op::Register(t) } else { Op::Poll(t) });
            next[t] += 1;
            go(next, n, prefix, out);
            next[t] -= 1;
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    go(&mut vec![0; n], n, &mut Vec::new(), &mut out);
    out
}

fn run_schedule(
    server: &RendezvousServer,
    tasks: &[String],
    ops: &[Op],
    generation: u64,
) -> Result<Vec<Proceed>, String> {
    let mut registered = BTreeSet::new();
    let mut released: Vec<Option<Proceed>> = vec![None; tasks.len()];
    for op in ops {
        let (t, reply) = match *op {
            Op::Register(t) => {
                registered.insert(t);
                (t, server.register(JOB, &tasks[t], "10.0.0.1", generation))
            }
            Op::Poll(t) => (t, server.poll(JOB, &tasks[t], generation)),
        };
        match reply.map_err(|e| format!("{ops:?}: {e}"))? {
            Reply::Wait { .. } => ensure!(registered.len() < tasks.len(), "{ops:?}: wait after full registration"),
            Reply::Proceed(p) => {
                ensure!(
                    registered.len() == tasks.len(),
                    "{ops:?}: proceed before full registration"
                );
                released[t] = Some(p);
            }
            Reply::Stop => return Err(format!("{ops:?}: unexpected stop")),
        }
    }
    for (t, name) in tasks.iter().enumerate() {
        match server.poll(JOB, name, generation) {
            Ok(Reply::Proceed(p)) => released[t] = Some(p),
            other => return Err(format!("{ops:?}: {name} got {other:?} after full registration")),
        }
    }
    Ok(released.into_iter().map(Option::unwrap).collect())
}

fn check_release(tasks: &[String], released: &[Proceed], generation: u64) -> Result<(), String> {
    let mut sorted = tasks.to_vec();
    sorted.sort();
    let ranks: BTreeSet<u32> = released.iter().map(|p| p.rank).collect();
    ensure!(ranks == (0..tasks.len() as u32).collect(), "ranks {ranks:?}");
    for (t, p) in released.iter().enumerate() {
        ensure!(
            p.generation == generation && p.size == tasks.len() as u32,
            "bad release {p:?}"
        );
        ensure!(
            p.credentials == released[0].credentials,
            "credentials differ within a generation"
        );
        ensure!(
            sorted[p.rank as usize] == tasks[t],
            "rank {} given to {}",
            p.rank,
            tasks[t]
        );
    }
    Ok(())
}

fn rendezvous_barrier() -> Check {
    let names = |n: usize| -> Vec<String> {
        ["w-c", "w-a", "w-d", "w-b"][..n]
            .iter()
            .map(|s| s.to_string())
            .collect()
    };
    let mut schedules = 0;
    for n in 1..=4 {
        let tasks = names(n);
        for ops in interleavings(n) {
            let server = RendezvousServer::new(1);
            server.open(JOB, tasks.clone());
            check_release(&tasks, &run_schedule(&server, &tasks, &ops, 0)?, 0)?;
            schedules += 1;
        }
    }
    ensure!(schedules == 1 + 6 + 90 + 2520, "{schedules} schedules");

    let tasks = names(3);
    for ops in interleavings(3) {
        let server = RendezvousServer::new(1);
        server.open(JOB, tasks.clone());
        let gen0 = run_schedule(&server, &tasks, &ops, 0)?;
        ensure!(server.relaunch(JOB) == Some(1), "relaunch did not open generation 1");
        for name in &tasks {
            let stale = server.poll(JOB, name, 0);
            ensure!(
                stale == Err(RendezvousError::StaleGeneration { current: 1, given: 0 }),
                "stale poll answered {stale:?}"
            );
        }
        ensure!(
            !server.verify_credentials(JOB, &gen0[0].credentials),
            "old credentials still valid"
        );
        let gen1 = run_schedule(&server, &tasks, &ops, 1)?;
        check_release(&tasks, &gen1, 1)?;
        ensure!(
            gen1[0].credentials != gen0[0].credentials,
            "credentials reused across generations"
        );
    }

    // A simulated MPI job with one relaunch; a twin server seeded the same
    // way reproduces the credentials it handed out.
    let text = "
seed 99
instance_type gpu8 cpu=64 gpu=8 memory=512Gi boot_delay=3
nodes gpu8 count=2
job train at=0 policy=relaunch_failed relaunches=1 duration=10
  group worker replicas=3 type=gpu8 cpu=8 gpu=4 memory=64Gi harness=mpi role=worker
fault task_crash job=train task=worker-1 at=6 code=1
";
    let out = run_scenario(Scenario::parse(text).map_err(|e| e.to_string())?);
    let job = out.job_ids["train"];
    let twin = RendezvousServer::new(99);
    let workers: Vec<String> = (0..3).map(|i| format!("worker-{i}")).collect();
    twin.open(job, workers.clone());
    let mut secrets: Vec<Credentials> = Vec::new();
    for generation in 0..2 {
        if generation > 0 {
            twin.relaunch(job);
        }
        let mut last = None;
        for t in &workers {
            last = Some(twin.register(job, t, "x", generation).map_err(|e| e.to_string())?);
        }
        let Some(Reply::Proceed(p)) = last else {
            return Err("twin barrier did not open".into());
        };
        secrets.push(p.credentials);
    }
    let haystacks = [out.events_jsonl(), out.backend_jsonl(), format!("{:?}", out.jobs)];
    for secret in &secrets {
        let hex = secret.to_hex();
        for hay in &haystacks {
            ensure!(
                !hay.contains(&hex) && !hay.contains(&hex.to_uppercase()),
                "credentials found in a trace"
            );
        }
    }
    Ok(format!(
        "{schedules} schedules, 90 relaunch schedules, credentials absent from traces"
    ))
}

const RANK_SCRIPT: &str = "printf %s \"$MPI_RANK\" > \"$WORKSPACE_DIR/rank-$MPI_RANK\"
if [ \"$MPI_RANK\" = 2 ] && [ -f fail ]; then exit 5; fi
";

fn local_end_to_end() -> Check {
    let started = Instant::now();
    let cluster = common::Cluster::local();
    let mut details = Vec::new();
    for failing in [false, true] {
        let name = if failing { "ranks-fail" } else { "ranks" };
        let code_dir = cluster.path(&format!("{name}-code"));
        std::fs::create_dir_all(&code_dir).map_err(|e| e.to_string())?;
        std::fs::write(code_dir.join("run.sh"), RANK_SCRIPT).map_err(|e| e.to_string())?;
        if failing {
            std::fs::write(code_dir.join("fail"), "").map_err(|e| e.to_string())?;
        }
        let yaml = common::job_yaml(name, 3, "mpi", "sh run.sh", Some(&format!("local://ws/{name}")));
        let config = cluster.write(&format!("{name}.yaml"), &yaml);
        let out = cluster.acmctl(&[
            "submit",
            "--config",
            config.to_str().unwrap(),
            "--tar",
            code_dir.to_str().unwrap(),
            "--follow",
        ]);
        let text = common::stdout(&out);
        let code = common::code(&out);
        let job = text.lines().next().unwrap_or_default().to_string();
        if failing {
            ensure!(
                code == 1,
                "failing variant exited {code}: {text}{}",
                common::stderr(&out)
            );
            ensure!(
                text.trim_end().ends_with(&format!("{job} Failed")),
                "failing variant: {text}"
            );
            ensure!(
                text.contains("exited with code 5"),
                "rank 2 failure not reported: {text}"
            );
        } else {
            ensure!(code == 0, "exited {code}: {text}{}", common::stderr(&out));
            ensure!(text.trim_end().ends_with(&format!("{job} Succeeded")), "{text}");
            let ws = cluster.path(&format!("mounts/ws/{name}"));
            let ranks: BTreeSet<String> = common::read_dir_sorted(&ws).into_iter().map(|(_, body)| body).collect();
            let want: BTreeSet<String> = ["0", "1", "2"].map(String::from).into();
            ensure!(ranks == want, "workspace holds {ranks:?}");
        }
        details.push(format!("{name}: exit {code}"));
    }
    let elapsed = started.elapsed();
    ensure!(elapsed.as_secs() < 30, "took {elapsed:?}");
    Ok(details.join(", "))
}

fn train_utils_oracle() -> Check {
    let fig = LrSchedule::new(0.1, 32, 0, 100).map_err(|e| e.to_string())?;
    let big = BatchTopology::new(8, 8, 1, 16).map_err(|e| e.to_string())?;
    ensure!(big.global_batch() == 1024, "global batch {}", big.global_batch());
    ensure!(fig.scaled_lr(1024) == 3.2, "scaled lr {}", fig.scaled_lr(1024));

    let mut rng = ChaCha8Rng::seed_from_u64(20_000);
    let draws = 10_000;
    for i in 0..draws {
        let d = oracle::draw(&mut rng);
        let topo = BatchTopology::new(d.machines, d.processes, d.gpus_per_process, d.per_gpu_batch)
            .map_err(|e| format!("{d:?}: {e}"))?;
        let global = topo.global_batch();
        ensure!(
            oracle::global_batch(d.machines, d.processes, d.gpus_per_process, d.per_gpu_batch) == global.into(),
            "draw {i} {d:?}: global batch {global}"
        );
        let s = LrSchedule::new(d.base_lr, d.base_batch, d.warmup, d.total_steps).map_err(|e| e.to_string())?;
        let base = u64::from(d.base_batch);
        let (got, want) = (s.scaled_lr(global), oracle::scaled_lr(d.base_lr, base, global));
        ensure!(got == want, "draw {i} {d:?}: scaled lr {got} vs {want}");
        let (got, want) = (
            normalized_steps(d.base_steps, base, global),
            oracle::normalized_steps(d.base_steps, base, global),
        );
        ensure!(got == want, "draw {i} {d:?}: normalized steps {got} vs {want}");
        let step = rng.random_range(0..d.total_steps);
        let got = s.lr_at_step(global, step).map_err(|e| e.to_string())?;
        let want = oracle::lr_at_step(d.base_lr, base, global, d.warmup, step, false);
        ensure!(
            (got - want).abs() <= 1e-12 * want.abs().max(1.0),
            "draw {i} {d:?} step {step}: {got} vs {want}"
        );
    }
    Ok(format!("{draws} draws agree; 32 -> 1024 scales 0.1 to 3.2"))
}

fn storage() -> Check {
    let store = CodeStore::in_memory(1 << 20);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let strings = 1000;
    for i in 0..strings {
        let len = rng.random_range(1..4096);
        let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let r = store.put_code(&bytes).map_err(|e| e.to_string())?;
        ensure!(r.digest == digest_of(&bytes), "string {i}: digest mismatch");
        ensure!(
            store.put_code(&bytes).map_err(|e| e.to_string())?.digest == r.digest,
            "string {i}: unstable digest"
        );
        let back = store.get_code(&r.digest).map_err(|e| e.to_string())?;
        ensure!(back == bytes, "string {i}: bytes differ on read");
    }

    let logs = LogStore::new();
    let job = JobId(3);
    let mut all = Vec::new();
    for _ in 0..50 {
        let chunk: Vec<u8> = (0..rng.random_range(0..64)).map(|_| rng.random()).collect();
        logs.append(job, "worker-0", &chunk);
        all.extend_from_slice(&chunk);
    }
    for _ in 0..200 {
        let cursor = LogCursor {
            job_id: job,
            task_name: "worker-0".into(),
            byte_offset: rng.random_range(0..=all.len() as u64),
        };
        let max = rng.random_range(1..256);
        let a = logs.read(&cursor, max).map_err(|e| e.to_string())?;
        let b = logs.read(&cursor, max).map_err(|e| e.to_string())?;
        ensure!(a == b, "reads at {} differ", cursor.byte_offset);
        let start = cursor.byte_offset as usize;
        ensure!(
            a.0 == all[start..(start + max).min(all.len())],
            "read at {start} returned wrong bytes"
        );
    }

    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    std::fs::create_dir_all(root.path().join("data/set")).map_err(|e| e.to_string())?;
    std::fs::write(root.path().join("data/set/a.txt"), "x").map_err(|e| e.to_string())?;
    let table = MountTable::new(root.path());
    let dataset = table
        .open(&MountRef::dataset("local://data/set"))
        .map_err(|e| e.to_string())?;
    let write = dataset.write_file("b.txt", b"y");
    ensure!(
        matches!(write, Err(StorageError::ReadOnlyMount(_))),
        "dataset write answered {write:?}"
    );
    ensure!(
        matches!(dataset.check_writable(), Err(StorageError::ReadOnlyMount(_))),
        "dataset probe accepted a write"
    );
    ensure!(!root.path().join("data/set/b.txt").exists(), "dataset was modified");
    let copy = root.path().join("copy");
    dataset.materialize_read_only(&copy).map_err(|e| e.to_string())?;
    let perms = std::fs::metadata(copy.join("a.txt"))
        .map_err(|e| e.to_string())?
        .permissions();
    ensure!(perms.readonly(), "materialized dataset file is writable");
    Ok(format!(
        "{strings} strings addressed by content, 200 cursor rereads, dataset writes rejected"
    ))
}
