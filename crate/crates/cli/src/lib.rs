//! `acmctl`: command-line client for the acm control plane.
//!
//! The endpoint and token come from `--endpoint`/`--token` or the
//! `ACM_ENDPOINT`/`ACM_TOKEN` environment variables. `--output=machine`
//! prints one JSON record per line instead of tables. Exit codes are listed
//! in [`exit`].

pub mod client;
pub mod exit;
pub mod table;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use acm_api::types::*;
use acm_control::events::EventRecord;
use acm_core::{JobId, JobSpec, JobState, TaskRecord};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::client::Client;
use crate::exit::{CliError, Exit};
use crate::table::Table;

#[derive(Debug, Parser)]
#[command(name = "acmctl", version, about = "Submit and inspect distributed training jobs")]
pub struct Cli {
    #[arg(long, env = "ACM_ENDPOINT", default_value = "http://127.0.0.1:8080", global = true)]
    pub endpoint: String,
    #[arg(long, env = "ACM_TOKEN", global = true, hide_env_values = true)]
    pub token: Option<String>,
    #[arg(long, value_enum, default_value_t = Output::Human, global = true)]
    pub output: Output,
    /// Poll interval for --follow, in milliseconds.
    #[arg(long, env = "ACM_POLL_MS", default_value_t = 500, global = true, hide = true)]
    pub poll_ms: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Output {
    Human,
    Machine,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Upload code and submit a job.
    Submit {
        /// Job document (YAML or JSON).
        #[arg(long)]
        config: PathBuf,
        /// Code directory, or a tar/tar.gz archive, to upload.
        #[arg(long)]
        tar: Option<PathBuf>,
        /// Stream events and logs until the job ends; exit 0 only if it
        /// succeeded.
        #[arg(long)]
        follow: bool,
    },
    /// List jobs.
    List {
        #[arg(long)]
        state: Option<String>,
        #[arg(long)]
        principal: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
        /// Fetch every page.
        #[arg(long)]
        all: bool,
    },
    /// Show a job and its tasks.
    Status { job: String },
    /// Print task logs.
    Logs {
        job: String,
        /// Only this task's stream. Default: every task.
        #[arg(long)]
        task: Option<String>,
        /// Keep polling until the job ends; exit 0 only if it succeeded.
        #[arg(long)]
        follow: bool,
    },
    /// Cancel a job.
    Cancel { job: String },
    /// Show nodes and recent scaling decisions.
    Cluster,
}

struct Ctx<'a> {
    client: Client,
    output: Output,
    poll: Duration,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn machine(&self) -> bool {
        self.output == Output::Machine
    }

    fn record<T: Serialize>(&mut self, value: &T) -> Result<(), CliError> {
        let line = serde_json::to_string(value).map_err(|e| CliError::new(Exit::Server, e.to_string()))?;
        self.line(&line)
    }

    fn line(&mut self, text: &str) -> Result<(), CliError> {
        writeln!(self.out, "{text}").map_err(|e| CliError::new(Exit::Server, format!("write: {e}")))
    }

    fn raw(&mut self, text: &str) -> Result<(), CliError> {
        self.out
            .write_all(text.as_bytes())
            .and_then(|()| self.out.flush())
            .map_err(|e| CliError::new(Exit::Server, format!("write: {e}")))
    }
}

/// Runs one command, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<Exit, CliError> {
    let mut ctx = Ctx {
        client: Client::new(&cli.endpoint, cli.token)?,
        output: cli.output,
        poll: Duration::from_millis(cli.poll_ms.max(1)),
        out,
    };
    match cli.command {
        Command::Submit { config, tar, follow } => submit(&mut ctx, &config, tar.as_deref(), follow),
        Command::List {
            state,
            principal,
            limit,
            all,
        } => list(&mut ctx, state, principal, limit, all),
        Command::Status { job } => status(&mut ctx, &job),
        Command::Logs { job, task, follow } => logs(&mut ctx, &job, task, follow),
        Command::Cancel { job } => cancel(&mut ctx, &job),
        Command::Cluster => cluster(&mut ctx),
    }
}

fn job_id(text: &str) -> Result<JobId, CliError> {
    text.parse()
        .map_err(|_| CliError::invalid(format!("{text:?} is not a job id (expected job-<n>)")))
}

/// Reads a job document. YAML is a superset of JSON, so one parser covers
/// both.
pub fn load_spec(path: &std::path::Path) -> Result<JobSpec, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::invalid(format!("cannot read {}: {e}", path.display())))?;
    serde_yaml::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct Submitted {
    job_id: JobId,
    #[serde(skip_serializing_if = "Option::is_none")]
    code_digest: Option<acm_core::CodeDigest>,
}

fn submit(
    ctx: &mut Ctx,
    config: &std::path::Path,
    tar: Option<&std::path::Path>,
    follow: bool,
) -> Result<Exit, CliError> {
    let mut spec = load_spec(config)?;
    if let Some(path) = tar {
        if !path.exists() {
            return Err(CliError::invalid(format!("{} does not exist", path.display())));
        }
        let archive = acm_storage::archive_path(path)
            .map_err(|e| CliError::invalid(format!("cannot archive {}: {e}", path.display())))?;
        let uploaded: CodeUploaded = ctx.client.post_bytes("/v1/code", archive)?;
        spec.code_ref = Some(uploaded.digest);
    }
    let submitted: JobSubmitted = ctx.client.post_json("/v1/jobs", &spec)?;
    if ctx.machine() {
        ctx.record(&Submitted {
            job_id: submitted.job_id,
            code_digest: spec.code_ref.clone(),
        })?;
    } else {
        ctx.line(&submitted.job_id.to_string())?;
    }
    if follow {
        return follow_job(ctx, submitted.job_id, None, true);
    }
    Ok(Exit::Ok)
}

fn summarize_tasks(states: &BTreeMap<String, usize>) -> String {
    states
        .iter()
        .map(|(s, n)| format!("{n} {s}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn list(
    ctx: &mut Ctx,
    state: Option<String>,
    principal: Option<String>,
    limit: Option<usize>,
    all: bool,
) -> Result<Exit, CliError> {
    let mut query = Vec::new();
    if let Some(s) = state {
        query.push(format!("state={s}"));
    }
    if let Some(p) = principal {
        query.push(format!("principal={p}"));
    }
    if let Some(l) = limit {
        query.push(format!("limit={l}"));
    }
    let mut jobs = Vec::new();
    let mut cursor: Option<JobId> = None;
    let more = loop {
        let mut q = query.clone();
        if let Some(c) = cursor {
            q.push(format!("cursor={c}"));
        }
        let page: JobPage = ctx.client.get(&format!("/v1/jobs?{}", q.join("&")))?;
        jobs.extend(page.jobs);
        match page.next_cursor {
            Some(c) if all => cursor = Some(c),
            next => break next,
        }
    };
    if ctx.machine() {
        for j in &jobs {
            ctx.record(j)?;
        }
        return Ok(Exit::Ok);
    }
    let mut t = Table::new(["JOB", "NAME", "STATE", "QUEUE", "PRINCIPAL", "SUBMITTED", "TASKS"]);
    for j in &jobs {
        t.row([
            j.job_id.to_string(),
            j.name.clone(),
            j.state.to_string(),
            opt(j.queue_position),
            opt(j.principal.clone()),
            j.submitted_at.to_string(),
            summarize_tasks(&j.task_states),
        ]);
    }
    ctx.raw(&t.render())?;
    if let Some(c) = more {
        ctx.line(&format!("(more: --all, or the next page starts after {c})"))?;
    }
    Ok(Exit::Ok)
}

/// The job with every page of its tasks.
fn fetch_job(client: &Client, job: JobId) -> Result<JobDetail, CliError> {
    let mut detail: JobDetail = client.get(&format!("/v1/jobs/{job}"))?;
    while let Some(next) = detail.next_task_cursor {
        let page: JobDetail = client.get(&format!("/v1/jobs/{job}?cursor={next}"))?;
        detail.tasks.extend(page.tasks);
        detail.next_task_cursor = page.next_task_cursor;
    }
    Ok(detail)
}

fn status(ctx: &mut Ctx, job: &str) -> Result<Exit, CliError> {
    let detail = fetch_job(&ctx.client, job_id(job)?)?;
    if ctx.machine() {
        ctx.record(&detail)?;
        return Ok(Exit::Ok);
    }
    ctx.line(&format!("job:        {} ({})", detail.job_id, detail.spec.name))?;
    ctx.line(&format!("state:      {}", detail.state))?;
    if let Some(p) = detail.queue_position {
        ctx.line(&format!("queue:      position {p}"))?;
    }
    ctx.line(&format!("principal:  {}", opt(detail.principal.clone())))?;
    ctx.line(&format!(
        "ticks:      submitted {}, started {}, finished {}",
        detail.submitted_at,
        opt(detail.started_at),
        opt(detail.finished_at)
    ))?;
    ctx.line("")?;
    ctx.raw(&task_table(&detail.tasks).render())?;
    Ok(Exit::Ok)
}

fn task_table(tasks: &[TaskRecord]) -> Table {
    let mut t = Table::new(["TASK", "STATE", "NODE", "RELAUNCHES", "EXIT"]);
    for task in tasks {
        t.row([
            task.task_name.clone(),
            task.state.to_string(),
            opt(task.node_id.as_ref().map(|n| n.as_str().to_string())),
            task.relaunch_count.to_string(),
            opt(task.exit_code),
        ]);
    }
    t
}

fn logs(ctx: &mut Ctx, job: &str, task: Option<String>, follow: bool) -> Result<Exit, CliError> {
    let job = job_id(job)?;
    if follow {
        return follow_job(ctx, job, task, false);
    }
    let detail = fetch_job(&ctx.client, job)?;
    let tasks = match task {
        Some(t) => vec![t],
        None => detail.tasks.iter().map(|t| t.task_name.clone()).collect(),
    };
    let prefix = tasks.len() > 1;
    for t in &tasks {
        let mut cursor = 0;
        loop {
            let chunk = read_log(&ctx.client, job, t, cursor)?;
            if chunk.data.is_empty() {
                break;
            }
            cursor = chunk.next_cursor;
            emit_chunk(ctx, &chunk, prefix)?;
        }
    }
    Ok(Exit::Ok)
}

fn read_log(client: &Client, job: JobId, task: &str, cursor: u64) -> Result<LogChunk, CliError> {
    client.get(&format!("/v1/jobs/{job}/logs?task={task}&cursor={cursor}"))
}

fn emit_chunk(ctx: &mut Ctx, chunk: &LogChunk, prefix: bool) -> Result<(), CliError> {
    if ctx.machine() {
        return ctx.record(chunk);
    }
    if !prefix {
        return ctx.raw(&chunk.data);
    }
    let mut text = String::new();
    for line in chunk.data.split_inclusive('\n') {
        text.push_str(&format!("[{}] {line}", chunk.task));
    }
    if !text.ends_with('\n') {
        text.push('\n');
    }
    ctx.raw(&text)
}

fn describe(event: &EventRecord) -> Option<String> {
    match event {
        EventRecord::Transition {
            tick,
            job_id,
            task_name,
            old_state,
            new_state,
            reason,
            ..
        } => {
            let who = task_name.clone().unwrap_or_else(|| job_id.to_string());
            let from = old_state.as_deref().unwrap_or("submitted");
            let why = if reason.is_empty() {
                String::new()
            } else {
                format!(" ({reason})")
            };
            Some(format!("[tick {tick}] {who}: {from} -> {new_state}{why}"))
        }
        EventRecord::Alert {
            tick, alert, message, ..
        } => Some(format!("[tick {tick}] alert {alert}: {message}")),
        EventRecord::Cleanup { .. } | EventRecord::Scaling { .. } => None,
    }
}

/// Polls events and logs until the job is terminal and every followed log
/// stream is drained. With `show_events` transitions are printed too.
fn follow_job(ctx: &mut Ctx, job: JobId, only_task: Option<String>, show_events: bool) -> Result<Exit, CliError> {
    let mut after = 0u64;
    let mut cursors: BTreeMap<String, u64> = BTreeMap::new();
    let mut complete: BTreeMap<String, bool> = BTreeMap::new();
    loop {
        if show_events {
            let page: EventPage = ctx.client.get(&format!("/v1/jobs/{job}/events?after={after}"))?;
            for e in &page.events {
                if ctx.machine() {
                    ctx.record(e)?;
                } else if let Some(text) = describe(e) {
                    ctx.line(&text)?;
                }
            }
            after = page.events.last().map_or(after, EventRecord::seq);
        }
        let detail: JobDetail = ctx.client.get(&format!("/v1/jobs/{job}"))?;
        let tasks: Vec<String> = match &only_task {
            Some(t) => vec![t.clone()],
            None => detail.tasks.iter().map(|t| t.task_name.clone()).collect(),
        };
        let prefix = tasks.len() > 1;
        for t in &tasks {
            loop {
                let cursor = cursors.get(t).copied().unwrap_or(0);
                let chunk = read_log(&ctx.client, job, t, cursor)?;
                complete.insert(t.clone(), chunk.complete);
                if chunk.data.is_empty() {
                    break;
                }
                cursors.insert(t.clone(), chunk.next_cursor);
                emit_chunk(ctx, &chunk, prefix)?;
            }
        }
        // The log reads above saw this state or a later one, so a terminal
        // state here means the streams are final.
        if detail.state.is_terminal() && tasks.iter().all(|t| complete.get(t) == Some(&true)) {
            if show_events {
                // Catch the events that landed with the final transition.
                let page: EventPage = ctx.client.get(&format!("/v1/jobs/{job}/events?after={after}"))?;
                for e in &page.events {
                    if ctx.machine() {
                        ctx.record(e)?;
                    } else if let Some(text) = describe(e) {
                        ctx.line(&text)?;
                    }
                }
            }
            return finish(ctx, job, detail.state);
        }
        thread::sleep(ctx.poll);
    }
}

#[derive(Serialize)]
struct Finished {
    job_id: JobId,
    state: JobState,
}

fn finish(ctx: &mut Ctx, job: JobId, state: JobState) -> Result<Exit, CliError> {
    if ctx.machine() {
        ctx.record(&Finished { job_id: job, state })?;
    } else {
        ctx.line(&format!("{job} {state}"))?;
    }
    Ok(if state == JobState::Succeeded {
        Exit::Ok
    } else {
        Exit::JobFailed
    })
}

fn cancel(ctx: &mut Ctx, job: &str) -> Result<Exit, CliError> {
    let canceled: JobCanceled = ctx.client.delete(&format!("/v1/jobs/{}", job_id(job)?))?;
    if ctx.machine() {
        ctx.record(&canceled)?;
    } else {
        ctx.line(&format!("{} {}", canceled.job_id, canceled.state))?;
    }
    Ok(Exit::Ok)
}

fn gib(bytes: u64) -> String {
    format!("{:.1}Gi", bytes as f64 / f64::from(1u32 << 30))
}

fn cluster(ctx: &mut Ctx) -> Result<Exit, CliError> {
    let nodes: ClusterNodes = ctx.client.get("/v1/cluster/nodes")?;
    let scaling: ScalingHistory = ctx.client.get("/v1/cluster/scaling?limit=10")?;
    if ctx.machine() {
        for n in &nodes.nodes {
            let mut v = serde_json::to_value(n).map_err(|e| CliError::new(Exit::Server, e.to_string()))?;
            v["kind"] = "node".into();
            ctx.record(&v)?;
        }
        for p in &scaling.plans {
            ctx.record(p)?;
        }
        return Ok(Exit::Ok);
    }
    ctx.line(&format!(
        "tick {}, {} queued, {} pending cleanups",
        nodes.tick, nodes.queue_depth, nodes.pending_cleanups
    ))?;
    let mut t = Table::new(["NODE", "TYPE", "STATE", "CPU FREE", "GPU FREE", "MEM FREE", "TASKS"]);
    for n in &nodes.nodes {
        t.row([
            n.node_id.as_str().to_string(),
            n.instance_type.clone(),
            format!("{:?}", n.state),
            format!("{}/{}", n.allocatable.cpu_cores(), n.capacity.cpu_cores()),
            format!("{}/{}", n.allocatable.gpus(), n.capacity.gpus()),
            format!(
                "{}/{}",
                gib(n.allocatable.memory_bytes()),
                gib(n.capacity.memory_bytes())
            ),
            n.running_tasks.len().to_string(),
        ]);
    }
    ctx.raw(&t.render())?;
    if !scaling.plans.is_empty() {
        ctx.line("")?;
        ctx.line("recent scaling:")?;
        for p in &scaling.plans {
            if let EventRecord::Scaling {
                tick,
                launches,
                terminations,
                rationale,
                ..
            } = p
            {
                let launched: Vec<String> = launches.iter().map(|(ty, n)| format!("+{n} {ty}")).collect();
                let terminated: Vec<&str> = terminations.iter().map(|n| n.as_str()).collect();
                ctx.line(&format!(
                    "  [tick {tick}] launch [{}] terminate [{}] {}",
                    launched.join(", "),
                    terminated.join(", "),
                    rationale.join("; ")
                ))?;
            }
        }
    }
    Ok(Exit::Ok)
}
