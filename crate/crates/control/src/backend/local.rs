//! Local-process backend: a "container" is a process group with its own
//! environment and working directory under a sandbox root.
//!
//! Nodes are virtual; they only bound what may be reserved. Each launched
//! task gets a harness thread that runs the init checks, then the user
//! command (for MPI tasks, after the rendezvous barrier over TCP). Threads
//! report through one channel that [`Backend::advance`] drains, so events
//! are emitted by a single owner in arrival order. One tick is `tick` of
//! wall time; `advance` blocks for it.
//!
//! Task environment: `TASK_NAME`, `JOB_ID`, `RENDEZVOUS_ADDR`,
//! `WORKSPACE_DIR`, `DATASET_DIR`, `CODE_DIR`, and for MPI tasks
//! `MPI_RANK`, `MPI_SIZE`, `MPI_HOSTS` (rank 0 also gets `MPI_HOSTFILE`).
//! The image field is ignored.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use acm_core::{CodeDigest, InstanceType, JobId, NodeId, Tick};
use acm_storage::{extract_archive, CodeStore, LogStore, Mount, MountMode, MountRef, MountTable};
use parking_lot::Mutex;

use super::{
    Backend, BackendError, BackendEvent, BackendEventKind, InitRequest, InstanceProvider, Inventory, Node, NodeState,
    ProviderError, RendezvousTicket, TaskLaunch,
};
use crate::harness::wire::ClientError;
use crate::harness::{run_init, InitEnvironment, InitPlan, PreflightReport, RendezvousClient, Reply};

/// Exit code of a task whose harness hit an unrecoverable rendezvous error.
pub const HARNESS_ERROR_EXIT_CODE: i32 = 70;
/// Exit code reported for a process killed by a signal.
pub const SIGNALED_EXIT_CODE: i32 = 137;

#[derive(Debug, Clone)]
pub struct LocalConfig {
    /// Per-task directories live under `<sandbox>/<job>/<task>`.
    pub sandbox: PathBuf,
    /// Root for `local://` mount URIs.
    pub mount_root: PathBuf,
    pub tick: Duration,
    /// Time between SIGTERM and SIGKILL.
    pub kill_grace: Duration,
    pub poll_interval: Duration,
    pub quotas: BTreeMap<String, u32>,
}

impl LocalConfig {
    pub fn new(sandbox: impl Into<PathBuf>, mount_root: impl Into<PathBuf>) -> Self {
        Self {
            sandbox: sandbox.into(),
            mount_root: mount_root.into(),
            tick: Duration::from_millis(20),
            kill_grace: Duration::from_secs(2),
            poll_interval: Duration::from_millis(20),
            quotas: BTreeMap::new(),
        }
    }
}

type TaskKey = (JobId, String);

enum Report {
    InitDone(PreflightReport),
    Started,
    Exited(i32),
}

struct Message {
    key: TaskKey,
    incarnation: u64,
    report: Report,
}

/// Shared between the backend and a task's harness thread.
#[derive(Default)]
struct Control {
    killed: AtomicBool,
    /// Process group of the running user command.
    pgid: Mutex<Option<i32>>,
}

impl Control {
    fn kill(&self) {
        self.killed.store(true, Ordering::SeqCst);
        if let Some(pgid) = *self.pgid.lock() {
            signal_group(pgid, libc::SIGTERM);
        }
    }

    fn is_killed(&self) -> bool {
        self.killed.load(Ordering::SeqCst)
    }
}

fn signal_group(pgid: i32, signal: i32) {
    // SAFETY: kill(2) with a negative pid signals a process group; no memory
    // is shared with the callee.
    unsafe {
        libc::kill(-pgid, signal);
    }
}

struct Pod {
    node: NodeId,
    live: bool,
    incarnation: u64,
    dir: PathBuf,
    init_started: Tick,
    init_passed: bool,
    launched: bool,
    control: Arc<Control>,
    threads: Vec<JoinHandle<()>>,
    /// Holds the task's port for as long as its name is registered.
    listener: Option<TcpListener>,
}

pub struct LocalBackend {
    config: LocalConfig,
    mounts: MountTable,
    code: Option<Arc<CodeStore>>,
    logs: Arc<LogStore>,
    now: Tick,
    event_seq: u64,
    events: Vec<BackendEvent>,
    inventory: Inventory,
    node_counter: u64,
    incarnations: u64,
    booting: BTreeMap<NodeId, Tick>,
    removing: Vec<NodeId>,
    pods: BTreeMap<TaskKey, Pod>,
    names: BTreeMap<TaskKey, String>,
    tx: Sender<Message>,
    rx: Receiver<Message>,
}

impl LocalBackend {
    pub fn new(config: LocalConfig, logs: Arc<LogStore>) -> io::Result<Self> {
        fs::create_dir_all(&config.sandbox)?;
        fs::create_dir_all(&config.mount_root)?;
        let (tx, rx) = mpsc::channel();
        Ok(Self {
            mounts: MountTable::new(config.mount_root.clone()),
            config,
            code: None,
            logs,
            now: 0,
            event_seq: 0,
            events: Vec::new(),
            inventory: Inventory::default(),
            node_counter: 0,
            incarnations: 0,
            booting: BTreeMap::new(),
            removing: Vec::new(),
            pods: BTreeMap::new(),
            names: BTreeMap::new(),
            tx,
            rx,
        })
    }

    pub fn with_code_store(mut self, store: Arc<CodeStore>) -> Self {
        self.code = Some(store);
        self
    }

    pub fn config(&self) -> &LocalConfig {
        &self.config
    }

    pub fn logs(&self) -> &Arc<LogStore> {
        &self.logs
    }

    pub fn mounts(&self) -> &MountTable {
        &self.mounts
    }

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

    fn task_dir(&self, key: &TaskKey) -> PathBuf {
        self.config.sandbox.join(key.0.to_string()).join(&key.1)
    }

    fn emit(&mut self, kind: BackendEventKind) {
        self.events.push(BackendEvent {
            tick: self.now,
            seq: self.event_seq,
            kind,
        });
        self.event_seq += 1;
    }

    /// Marks a pod dead, signals it and frees its reservation and name.
    fn stop_pod(&mut self, key: &TaskKey) -> bool {
        let Some(pod) = self.pods.get_mut(key) else {
            return false;
        };
        if !pod.live {
            return false;
        }
        pod.live = false;
        pod.listener = None;
        pod.control.kill();
        self.names.remove(key);
        self.inventory.release(key.0, &key.1, self.now);
        true
    }

    fn receive(&mut self, msg: Message) {
        let current = self
            .pods
            .get(&msg.key)
            .is_some_and(|p| p.live && p.incarnation == msg.incarnation);
        if !current {
            return;
        }
        let (job, task) = (msg.key.0, msg.key.1.clone());
        match msg.report {
            Report::InitDone(report) => {
                let mut report = report;
                let pod = self.pods.get_mut(&msg.key).expect("live pod");
                report.duration_ticks = self.now - pod.init_started;
                if report.passed() {
                    pod.init_passed = true;
                } else {
                    self.stop_pod(&msg.key);
                }
                self.emit(BackendEventKind::InitCompleted { job, task, report });
            }
            Report::Started => self.emit(BackendEventKind::TaskStarted { job, task }),
            Report::Exited(code) => {
                if self.stop_pod(&msg.key) {
                    self.emit(BackendEventKind::TaskExited { job, task, code });
                }
            }
        }
    }

    fn realize_boots(&mut self) {
        let due: Vec<NodeId> = self
            .booting
            .iter()
            .filter(|(_, &at)| at <= self.now)
            .map(|(n, _)| n.clone())
            .collect();
        for node in due {
            self.booting.remove(&node);
            if self.inventory.mark_ready(&node, self.now) {
                self.emit(BackendEventKind::NodeReady { node });
            }
        }
    }
}

impl Drop for LocalBackend {
    fn drop(&mut self) {
        for pod in self.pods.values() {
            pod.control.kill();
        }
        for pod in self.pods.values_mut() {
            for t in pod.threads.drain(..) {
                let _ = t.join();
            }
        }
    }
}

struct LocalInitEnv<'a> {
    code: Option<&'a CodeStore>,
    mounts: &'a MountTable,
    code_dir: PathBuf,
}

impl InitEnvironment for LocalInitEnv<'_> {
    fn fetch_code(&mut self, digest: &CodeDigest) -> Result<Vec<u8>, String> {
        let store = self.code.ok_or("no code store configured")?;
        store.get_code(digest).map_err(|e| e.to_string())
    }

    fn install_code(&mut self, archive: &[u8]) -> Result<(), String> {
        fs::create_dir_all(&self.code_dir).map_err(|e| e.to_string())?;
        extract_archive(archive, &self.code_dir).map_err(|e| e.to_string())
    }

    fn check_mount(&mut self, mount: &MountRef) -> Result<(), String> {
        let m = self.mounts.open(mount).map_err(|e| e.to_string())?;
        match mount.mode {
            MountMode::ReadWrite => m.check_writable(),
            MountMode::ReadOnly => m.check_readable(),
        }
        .map_err(|e| e.to_string())
    }

    fn probe_rendezvous(&mut self, endpoint: &str) -> Result<(), String> {
        let addr: SocketAddr = endpoint
            .to_socket_addrs()
            .map_err(|e| e.to_string())?
            .next()
            .ok_or_else(|| format!("cannot resolve {endpoint}"))?;
        TcpStream::connect_timeout(&addr, Duration::from_secs(1))
            .map(drop)
            .map_err(|e| e.to_string())
    }

    fn check_devices(&mut self, _gpus: u32) -> Result<(), String> {
        Ok(())
    }
}

/// Everything a harness thread needs once the user container starts.
struct RunSpec {
    key: TaskKey,
    incarnation: u64,
    dir: PathBuf,
    command: Vec<String>,
    env: BTreeMap<String, String>,
    /// Copied read-only into `<dir>/dataset` before the command starts.
    dataset: Option<Mount>,
    rendezvous: Option<RendezvousTicket>,
    address: String,
    kill_grace: Duration,
    poll_interval: Duration,
}

struct Runner {
    spec: RunSpec,
    control: Arc<Control>,
    logs: Arc<LogStore>,
    tx: Sender<Message>,
}

enum Outcome {
    Exit(i32),
    Killed,
}

impl Runner {
    fn send(&self, report: Report) {
        let _ = self.tx.send(Message {
            key: self.spec.key.clone(),
            incarnation: self.spec.incarnation,
            report,
        });
    }

    fn log(&self, line: &str) {
        self.logs.append(self.spec.key.0, &self.spec.key.1, line.as_bytes());
    }

    fn run(self) {
        if let Some(dataset) = &self.spec.dataset {
            if let Err(e) = dataset.materialize_read_only(&self.spec.dir.join("dataset")) {
                self.log(&format!("[harness] dataset copy failed: {e}\n"));
                self.send(Report::Exited(HARNESS_ERROR_EXIT_CODE));
                return;
            }
        }
        let code = match self.spec.rendezvous.clone() {
            None => {
                self.send(Report::Started);
                match self.execute(&BTreeMap::new()) {
                    Ok(Outcome::Exit(c)) => c,
                    Ok(Outcome::Killed) => return,
                    Err(e) => {
                        self.log(&format!("[harness] spawn failed: {e}\n"));
                        HARNESS_ERROR_EXIT_CODE
                    }
                }
            }
            Some(ticket) => match self.run_mpi(&ticket) {
                Some(c) => c,
                None => return,
            },
        };
        self.send(Report::Exited(code));
    }

    /// Runs the user command to completion. `None` from the poll hook asks
    /// for the process to be stopped.
    fn execute(&self, extra_env: &BTreeMap<String, String>) -> io::Result<Outcome> {
        self.execute_with(extra_env, || false)
    }

    fn execute_with(
        &self,
        extra_env: &BTreeMap<String, String>,
        mut stop: impl FnMut() -> bool,
    ) -> io::Result<Outcome> {
        let (program, args) = self
            .spec
            .command
            .split_first()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty command"))?;
        let code_dir = self.spec.dir.join("code");
        let cwd = if code_dir.is_dir() {
            code_dir
        } else {
            self.spec.dir.clone()
        };
        let mut child = Command::new(program)
            .args(args)
            .current_dir(cwd)
            .env_clear()
            .env("PATH", std::env::var("PATH").unwrap_or_else(|_| "/usr/bin:/bin".into()))
            .envs(&self.spec.env)
            .envs(extra_env)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0)
            .spawn()?;
        let pgid = child.id() as i32;
        *self.control.pgid.lock() = Some(pgid);
        let readers = [
            child.stdout.take().map(|s| self.pump(s)),
            child.stderr.take().map(|s| self.pump(s)),
        ];
        if self.control.is_killed() {
            signal_group(pgid, libc::SIGTERM);
        }
        let outcome = self.wait(&mut child, pgid, &mut stop);
        *self.control.pgid.lock() = None;
        for r in readers.into_iter().flatten() {
            let _ = r.join();
        }
        outcome
    }

    fn wait(&self, child: &mut Child, pgid: i32, stop: &mut impl FnMut() -> bool) -> io::Result<Outcome> {
        let mut term_sent: Option<Instant> = None;
        loop {
            if let Some(status) = child.try_wait()? {
                // Reap anything left in the group.
                signal_group(pgid, libc::SIGKILL);
                if self.control.is_killed() {
                    return Ok(Outcome::Killed);
                }
                return Ok(Outcome::Exit(status.code().unwrap_or(SIGNALED_EXIT_CODE)));
            }
            match term_sent {
                None if self.control.is_killed() || stop() => {
                    signal_group(pgid, libc::SIGTERM);
                    term_sent = Some(Instant::now());
                }
                Some(at) if at.elapsed() >= self.spec.kill_grace => {
                    signal_group(pgid, libc::SIGKILL);
                }
                _ => {}
            }
            thread::sleep(self.spec.poll_interval.min(Duration::from_millis(10)));
        }
    }

    fn pump(&self, mut source: impl Read + Send + 'static) -> JoinHandle<()> {
        let logs = self.logs.clone();
        let (job, task) = self.spec.key.clone();
        thread::spawn(move || {
            let mut buf = [0u8; 8192];
            loop {
                match source.read(&mut buf) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => logs.append(job, &task, &buf[..n]),
                }
            }
        })
    }

    /// The in-task MPI harness. `None` when the task was killed.
    fn run_mpi(&self, ticket: &RendezvousTicket) -> Option<i32> {
        let (job, task) = (self.spec.key.0, self.spec.key.1.as_str());
        let mut client = match RendezvousClient::connect(&ticket.endpoint, Duration::from_secs(2)) {
            Ok(c) => c,
            Err(e) => {
                self.log(&format!("[harness] rendezvous {} unreachable: {e}\n", ticket.endpoint));
                return Some(HARNESS_ERROR_EXIT_CODE);
            }
        };
        let mut generation = ticket.generation;
        let mut started = false;
        'register: loop {
            let mut reply = client.register(job, task, &self.spec.address, generation);
            loop {
                if self.control.is_killed() {
                    return None;
                }
                match reply {
                    Ok(Reply::Wait { .. }) => {
                        thread::sleep(self.spec.poll_interval);
                        reply = client.poll(job, task, generation);
                    }
                    Ok(Reply::Stop) => {
                        let _ = client.stop_ack(job, task, generation);
                        return Some(0);
                    }
                    Err(ClientError::Server {
                        current_generation: Some(current),
                        ..
                    }) => {
                        generation = current;
                        continue 'register;
                    }
                    Err(e) => {
                        self.log(&format!("[harness] rendezvous error: {e}\n"));
                        return Some(HARNESS_ERROR_EXIT_CODE);
                    }
                    Ok(Reply::Proceed(p)) => {
                        if !started {
                            started = true;
                            self.send(Report::Started);
                        }
                        let descriptor = crate::harness::mpi_bootstrap(&p, &self.spec.command);
                        let mut env = descriptor.env.clone();
                        if let Some(hf) = &descriptor.hostfile {
                            let path = self.spec.dir.join("hostfile");
                            if fs::write(&path, hf).is_ok() {
                                env.insert("MPI_HOSTFILE".into(), path.display().to_string());
                            }
                        }
                        self.log(&format!("[harness] rank {} of {} released\n", p.rank, p.size));
                        let mut signal: Option<Result<Reply, ClientError>> = None;
                        let mut last_poll = Instant::now();
                        let outcome = self.execute_with(&env, || {
                            if signal.is_some() || last_poll.elapsed() < self.spec.poll_interval {
                                return signal.is_some();
                            }
                            last_poll = Instant::now();
                            match client.poll(job, task, generation) {
                                Ok(Reply::Proceed(_)) | Ok(Reply::Wait { .. }) => false,
                                other => {
                                    signal = Some(other);
                                    true
                                }
                            }
                        });
                        let code = match outcome {
                            Ok(Outcome::Killed) => return None,
                            Ok(Outcome::Exit(c)) => c,
                            Err(e) => {
                                self.log(&format!("[harness] spawn failed: {e}\n"));
                                return Some(HARNESS_ERROR_EXIT_CODE);
                            }
                        };
                        match signal {
                            // Stopped or superseded while the command ran.
                            Some(r) => {
                                reply = r;
                                continue;
                            }
                            None if p.rank == 0 || code != 0 => return Some(code),
                            // Serve and wait for the stop.
                            None => {
                                thread::sleep(self.spec.poll_interval);
                                reply = client.poll(job, task, generation);
                                while matches!(reply, Ok(Reply::Proceed(_))) {
                                    if self.control.is_killed() {
                                        return None;
                                    }
                                    thread::sleep(self.spec.poll_interval);
                                    reply = client.poll(job, task, generation);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl InstanceProvider for LocalBackend {
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
        self.booting
            .insert(id.clone(), self.now + instance_type.boot_delay_ticks);
        Ok(id)
    }

    fn terminate_instance(&mut self, node: &NodeId) -> Result<(), ProviderError> {
        self.inventory.mark_terminating(node)?;
        self.booting.remove(node);
        self.removing.push(node.clone());
        Ok(())
    }
}

impl Backend for LocalBackend {
    fn now(&self) -> Tick {
        self.now
    }

    fn advance(&mut self, ticks: Tick) {
        for _ in 0..ticks {
            let deadline = Instant::now() + self.config.tick;
            loop {
                let left = deadline.saturating_duration_since(Instant::now());
                match self.rx.recv_timeout(left) {
                    Ok(msg) => self.receive(msg),
                    Err(RecvTimeoutError::Timeout) => break,
                    Err(RecvTimeoutError::Disconnected) => unreachable!("the backend holds a sender"),
                }
            }
            self.now += 1;
            for node in std::mem::take(&mut self.removing) {
                self.inventory.remove_node(&node);
            }
            self.realize_boots();
        }
    }

    fn launch_init(&mut self, request: InitRequest) -> Result<(), BackendError> {
        let key = (request.job_id, request.task_name.clone());
        if self.pods.get(&key).is_some_and(|p| p.live) {
            return Err(BackendError::AlreadyLaunched {
                job: key.0,
                task: key.1,
            });
        }
        if let Some(mut old) = self.pods.remove(&key) {
            for t in old.threads.drain(..) {
                let _ = t.join();
            }
        }
        self.inventory
            .reserve(key.0, &key.1, &request.node_id, request.resources)?;
        let dir = self.task_dir(&key);
        // A relaunch starts from a clean task directory.
        let _ = fs::remove_dir_all(&dir);
        if let Err(e) = fs::create_dir_all(&dir) {
            self.inventory.release(key.0, &key.1, self.now);
            return Err(BackendError::SpawnFailed(format!(
                "task directory {}: {e}",
                dir.display()
            )));
        }
        self.incarnations += 1;
        let incarnation = self.incarnations;
        let plan = InitPlan {
            code_ref: request.code_ref,
            workspace: request.workspace,
            dataset: request.dataset,
            rendezvous_endpoint: request.rendezvous.map(|r| r.endpoint),
            gpus: request.resources.gpus(),
        };
        let control = Arc::new(Control::default());
        let code = self.code.clone();
        let mounts = self.mounts.clone();
        let code_dir = dir.join("code");
        let tx = self.tx.clone();
        let msg_key = key.clone();
        let init = thread::Builder::new()
            .name(format!("init-{}-{}", key.0, key.1))
            .spawn(move || {
                let mut env = LocalInitEnv {
                    code: code.as_deref(),
                    mounts: &mounts,
                    code_dir,
                };
                let report = run_init(&plan, &mut env);
                let _ = tx.send(Message {
                    key: msg_key,
                    incarnation,
                    report: Report::InitDone(report),
                });
            })
            .map_err(|e| {
                self.inventory.release(key.0, &key.1, self.now);
                BackendError::SpawnFailed(e.to_string())
            })?;
        self.pods.insert(
            key,
            Pod {
                node: request.node_id,
                live: true,
                incarnation,
                dir,
                init_started: self.now,
                init_passed: false,
                launched: false,
                control,
                threads: vec![init],
                listener: None,
            },
        );
        Ok(())
    }

    fn launch_task(&mut self, launch: TaskLaunch) -> Result<(), BackendError> {
        let key = (launch.job_id, launch.task_name.clone());
        let unknown = || BackendError::UnknownTask {
            job: launch.job_id,
            task: launch.task_name.clone(),
        };
        let pod = self.pods.get(&key).filter(|p| p.live).ok_or_else(unknown)?;
        if !pod.init_passed || pod.launched {
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
        let spawn_failed = |what: &str, e: &dyn std::fmt::Display| BackendError::SpawnFailed(format!("{what}: {e}"));
        let dir = pod.dir.clone();
        let workspace_dir = match &launch.workspace {
            Some(m) => self
                .mounts
                .open(m)
                .map_err(|e| spawn_failed("workspace", &e))?
                .path()
                .to_path_buf(),
            None => dir.join("workspace"),
        };
        fs::create_dir_all(&workspace_dir).map_err(|e| spawn_failed("workspace", &e))?;
        let dataset = match &launch.dataset {
            Some(m) => Some(self.mounts.open(m).map_err(|e| spawn_failed("dataset", &e))?),
            None => None,
        };
        let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| spawn_failed("address", &e))?;
        let address = listener
            .local_addr()
            .map_err(|e| spawn_failed("address", &e))?
            .to_string();

        let env = BTreeMap::from([
            ("TASK_NAME".to_string(), key.1.clone()),
            ("JOB_ID".to_string(), key.0.to_string()),
            (
                "RENDEZVOUS_ADDR".to_string(),
                launch
                    .rendezvous
                    .as_ref()
                    .map(|r| r.endpoint.clone())
                    .unwrap_or_default(),
            ),
            ("WORKSPACE_DIR".to_string(), workspace_dir.display().to_string()),
            ("DATASET_DIR".to_string(), dir.join("dataset").display().to_string()),
            ("CODE_DIR".to_string(), dir.join("code").display().to_string()),
        ]);
        let pod = self.pods.get_mut(&key).expect("checked above");
        let runner = Runner {
            spec: RunSpec {
                key: key.clone(),
                incarnation: pod.incarnation,
                dir,
                command: launch.command.clone(),
                env,
                dataset,
                rendezvous: launch.rendezvous.clone(),
                address: address.clone(),
                kill_grace: self.config.kill_grace,
                poll_interval: self.config.poll_interval,
            },
            control: pod.control.clone(),
            logs: self.logs.clone(),
            tx: self.tx.clone(),
        };
        let handle = thread::Builder::new()
            .name(format!("task-{}-{}", key.0, key.1))
            .spawn(move || runner.run())
            .map_err(|e| spawn_failed("harness thread", &e))?;
        pod.threads.push(handle);
        pod.launched = true;
        pod.listener = Some(listener);
        self.names.insert(key, address);
        Ok(())
    }

    fn kill(&mut self, job: JobId, task: &str) -> Result<(), BackendError> {
        self.stop_pod(&(job, task.to_string()));
        Ok(())
    }

    fn delete_all(&mut self, job: JobId) -> Result<usize, BackendError> {
        let keys: Vec<TaskKey> = self
            .pods
            .range((job, String::new())..)
            .take_while(|(k, _)| k.0 == job)
            .map(|(k, _)| k.clone())
            .collect();
        let mut removed = 0;
        for key in &keys {
            self.stop_pod(key);
        }
        for key in keys {
            let mut pod = self.pods.remove(&key).expect("collected above");
            // Bounded by the kill grace period.
            for t in pod.threads.drain(..) {
                let _ = t.join();
            }
            removed += 1;
        }
        let stale: Vec<TaskKey> = self
            .names
            .range((job, String::new())..)
            .take_while(|(k, _)| k.0 == job)
            .map(|(k, _)| k.clone())
            .collect();
        for key in stale {
            self.names.remove(&key);
            removed += 1;
        }
        let job_dir = self.config.sandbox.join(job.to_string());
        if job_dir.exists() {
            make_writable(&job_dir);
            fs::remove_dir_all(&job_dir).map_err(|e| BackendError::DeleteRefused {
                job,
                reason: format!("{}: {e}", job_dir.display()),
            })?;
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
        let dir = usize::from(self.config.sandbox.join(job.to_string()).exists());
        pods + names + dir
    }

    fn drain_events(&mut self) -> Vec<BackendEvent> {
        std::mem::take(&mut self.events)
    }
}

/// Read-only dataset copies must be writable again before removal.
fn make_writable(root: &std::path::Path) {
    for entry in walkdir::WalkDir::new(root).into_iter().flatten() {
        if entry.file_type().is_file() {
            if let Ok(meta) = entry.metadata() {
                let mut perms = meta.permissions();
                #[allow(clippy::permissions_set_readonly_false)]
                perms.set_readonly(false);
                let _ = fs::set_permissions(entry.path(), perms);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use acm_core::{Harness, ResourceVector};

    use super::*;

    struct Fixture {
        _dir: tempfile::TempDir,
        backend: LocalBackend,
        node: NodeId,
    }

    fn fixture() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let mut config = LocalConfig::new(dir.path().join("sandbox"), dir.path().join("mounts"));
        config.kill_grace = Duration::from_millis(200);
        let mut backend = LocalBackend::new(config, Arc::new(LogStore::new())).unwrap();
        let node = backend.add_ready_node(&InstanceType::new("local", ResourceVector::cores(8, 0, 1 << 30), 0));
        Fixture {
            _dir: dir,
            backend,
            node,
        }
    }

    fn init(f: &mut Fixture, task: &str) {
        f.backend
            .launch_init(InitRequest {
                job_id: JobId(1),
                task_name: task.into(),
                node_id: f.node.clone(),
                resources: ResourceVector::cores(1, 0, 0),
                code_ref: None,
                dataset: None,
                workspace: None,
                rendezvous: None,
            })
            .unwrap();
    }

    fn launch(f: &mut Fixture, task: &str, command: &[&str]) {
        f.backend
            .launch_task(TaskLaunch {
                job_id: JobId(1),
                task_name: task.into(),
                node_id: f.node.clone(),
                image: String::new(),
                command: command.iter().map(|s| s.to_string()).collect(),
                harness: Harness::Plain,
                dataset: None,
                workspace: None,
                rendezvous: None,
            })
            .unwrap();
    }

    /// Advances until `want` events matching `pick` arrived, at most 10 s.
    fn collect(f: &mut Fixture, want: usize, pick: impl Fn(&BackendEventKind) -> bool) -> Vec<BackendEventKind> {
        let deadline = Instant::now() + Duration::from_secs(10);
        let mut got = Vec::new();
        while got.len() < want && Instant::now() < deadline {
            f.backend.advance(1);
            got.extend(f.backend.drain_events().into_iter().map(|e| e.kind).filter(|k| pick(k)));
        }
        got
    }

    fn run_plain(f: &mut Fixture, task: &str, command: &[&str]) -> i32 {
        init(f, task);
        let inits = collect(f, 1, |k| matches!(k, BackendEventKind::InitCompleted { .. }));
        assert!(matches!(&inits[0], BackendEventKind::InitCompleted { report, .. } if report.passed()));
        launch(f, task, command);
        let exits = collect(f, 1, |k| matches!(k, BackendEventKind::TaskExited { .. }));
        match &exits[..] {
            [BackendEventKind::TaskExited { code, .. }] => *code,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exit_codes_are_reported() {
        let mut f = fixture();
        assert_eq!(run_plain(&mut f, "ok", &["sh", "-c", "exit 0"]), 0);
        assert_eq!(run_plain(&mut f, "bad", &["sh", "-c", "exit 3"]), 3);
        let node = &f.backend.inventory()[0];
        assert_eq!(node.allocatable, node.capacity);
    }

    #[test]
    fn task_output_lands_in_its_own_stream() {
        let mut f = fixture();
        for t in ["worker-0", "worker-1"] {
            init(&mut f, t);
        }
        collect(&mut f, 2, |k| matches!(k, BackendEventKind::InitCompleted { .. }));
        for t in ["worker-0", "worker-1"] {
            launch(&mut f, t, &["sh", "-c", "echo $TASK_NAME $JOB_ID"]);
        }
        collect(&mut f, 2, |k| matches!(k, BackendEventKind::TaskExited { .. }));
        let logs = f.backend.logs().clone();
        for t in ["worker-0", "worker-1"] {
            let (bytes, _) = logs.read(&acm_storage::LogCursor::start(JobId(1), t), 1 << 16).unwrap();
            assert_eq!(String::from_utf8(bytes).unwrap(), format!("{t} job-1\n"));
        }
    }

    #[test]
    fn resolve_is_stable_while_running_and_gone_after_exit() {
        let mut f = fixture();
        assert!(matches!(
            f.backend.resolve(JobId(1), "w"),
            Err(BackendError::UnknownTask { .. })
        ));
        init(&mut f, "w");
        collect(&mut f, 1, |k| matches!(k, BackendEventKind::InitCompleted { .. }));
        launch(&mut f, "w", &["sleep", "0.3"]);
        let a = f.backend.resolve(JobId(1), "w").unwrap();
        assert!(a.starts_with("127.0.0.1:"));
        assert_eq!(f.backend.resolve(JobId(1), "w").unwrap(), a);
        collect(&mut f, 1, |k| matches!(k, BackendEventKind::TaskExited { .. }));
        assert!(f.backend.resolve(JobId(1), "w").is_err());
    }

    #[test]
    fn kill_escalates_and_delete_all_is_idempotent() {
        let mut f = fixture();
        init(&mut f, "w");
        collect(&mut f, 1, |k| matches!(k, BackendEventKind::InitCompleted { .. }));
        // Ignores SIGTERM, so only the SIGKILL after the grace period stops it.
        launch(&mut f, "w", &["sh", "-c", "trap '' TERM; sleep 30"]);
        collect(&mut f, 1, |k| matches!(k, BackendEventKind::TaskStarted { .. }));
        let started = Instant::now();
        f.backend.kill(JobId(1), "w").unwrap();
        assert!(f.backend.object_count(JobId(1)) > 0);
        assert!(f.backend.delete_all(JobId(1)).unwrap() > 0);
        assert!(started.elapsed() < Duration::from_secs(5));
        assert_eq!(f.backend.object_count(JobId(1)), 0);
        assert_eq!(f.backend.delete_all(JobId(1)).unwrap(), 0);
        let node = &f.backend.inventory()[0];
        assert_eq!(node.allocatable, node.capacity);
    }

    #[test]
    fn missing_program_exits_with_harness_error() {
        let mut f = fixture();
        assert_eq!(
            run_plain(&mut f, "w", &["/nonexistent/program"]),
            HARNESS_ERROR_EXIT_CODE
        );
    }
}
