//! The control loop thread. It alone owns the [`ControlPlane`]; handlers
//! send it commands and read the snapshot it publishes after every tick and
//! every mutation.

use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use acm_control::backend::Backend;
use acm_control::plane::{ControlPlane, Snapshot, SubmitError};
use acm_control::scheduler::SchedulerError;
use acm_core::{JobId, JobSpec};
use parking_lot::RwLock;
use tokio::sync::oneshot;

pub enum Command {
    Submit {
        spec: JobSpec,
        principal: String,
        reply: oneshot::Sender<Result<(JobId, Arc<Snapshot>), SubmitError>>,
    },
    Cancel {
        job: JobId,
        reply: oneshot::Sender<Result<Arc<Snapshot>, SchedulerError>>,
    },
    Shutdown,
}

/// Latest published state, shared with every reader.
#[derive(Clone, Default)]
pub struct Published(Arc<RwLock<Arc<Snapshot>>>);

impl Published {
    pub fn get(&self) -> Arc<Snapshot> {
        self.0.read().clone()
    }

    fn set(&self, snapshot: Snapshot) -> Arc<Snapshot> {
        let snapshot = Arc::new(snapshot);
        *self.0.write() = snapshot.clone();
        snapshot
    }
}

pub struct ControlLoop {
    commands: mpsc::Sender<Command>,
    published: Published,
    thread: Option<JoinHandle<()>>,
}

impl ControlLoop {
    /// Starts the loop. With `pace`, one tick runs per `pace` of wall time;
    /// without it the backend's own `advance` sets the rate.
    pub fn spawn<B: Backend + Send + 'static>(plane: ControlPlane<B>, pace: Option<Duration>) -> Self {
        let (tx, rx) = mpsc::channel();
        let published = Published::default();
        published.set(plane.snapshot());
        let out = published.clone();
        let thread = std::thread::Builder::new()
            .name("acm-control".into())
            .spawn(move || run(plane, rx, out, pace))
            .expect("spawn control loop");
        Self {
            commands: tx,
            published,
            thread: Some(thread),
        }
    }

    pub fn sender(&self) -> mpsc::Sender<Command> {
        self.commands.clone()
    }

    pub fn published(&self) -> Published {
        self.published.clone()
    }

    pub fn shutdown(&mut self) {
        let _ = self.commands.send(Command::Shutdown);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ControlLoop {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn run<B: Backend>(mut plane: ControlPlane<B>, rx: mpsc::Receiver<Command>, out: Published, pace: Option<Duration>) {
    let mut next_tick = Instant::now();
    loop {
        loop {
            let wait = match pace {
                Some(_) => next_tick.saturating_duration_since(Instant::now()),
                None => Duration::ZERO,
            };
            match rx.recv_timeout(wait) {
                Ok(Command::Shutdown) | Err(RecvTimeoutError::Disconnected) => return,
                Ok(cmd) => handle(&mut plane, cmd, &out),
                Err(RecvTimeoutError::Timeout) => break,
            }
        }
        plane.step();
        out.set(plane.snapshot());
        if let Some(p) = pace {
            next_tick = (next_tick + p).max(Instant::now());
        }
    }
}

fn handle<B: Backend>(plane: &mut ControlPlane<B>, cmd: Command, out: &Published) {
    match cmd {
        Command::Submit { spec, principal, reply } => {
            let result = plane.submit(spec, Some(principal));
            let snap = out.set(plane.snapshot());
            let _ = reply.send(result.map(|id| (id, snap)));
        }
        Command::Cancel { job, reply } => {
            let result = plane.cancel(job);
            let snap = out.set(plane.snapshot());
            let _ = reply.send(result.map(|()| snap));
        }
        Command::Shutdown => {}
    }
}
