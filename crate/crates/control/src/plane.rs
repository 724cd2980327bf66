//! The control loop: one owner for the scheduler, autoscaler and backend,
//! stepped one tick at a time.

use std::sync::Arc;

use acm_core::{validate_job_spec, CodeDigest, InstanceCatalog, JobId, JobRecord, JobSpec, SpecViolation, Tick};
use acm_storage::CodeStore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoscaler::{compute_demand, Autoscaler, AutoscalerConfig, ConfigError};
use crate::backend::{Backend, BackendEvent, Node};
use crate::events::{EventLog, EventRecord};
use crate::harness::RendezvousServer;
use crate::scheduler::{Scheduler, SchedulerConfig, SchedulerError};

#[derive(Debug, Error)]
pub enum SubmitError {
    #[error("invalid job spec: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<SpecViolation>),
    #[error("code {0} has not been uploaded")]
    UnknownCode(CodeDigest),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaneConfig {
    pub scheduler: SchedulerConfig,
    /// `None` keeps the fleet fixed.
    pub autoscaler: Option<AutoscalerConfig>,
}

/// A job record with its derived queue position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobView {
    #[serde(flatten)]
    pub record: JobRecord,
    pub queue_position: Option<usize>,
}

/// Immutable state published after each loop iteration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Snapshot {
    pub tick: Tick,
    /// Sequence number of the last event record covered by this snapshot.
    pub seq: u64,
    pub jobs: Vec<JobView>,
    pub nodes: Vec<Node>,
    pub queue_depth: usize,
    pub scaling: Vec<EventRecord>,
    pub pending_cleanups: usize,
    pub closed: bool,
}

impl Snapshot {
    pub fn job(&self, id: JobId) -> Option<&JobView> {
        self.jobs
            .binary_search_by_key(&id, |j| j.record.id)
            .ok()
            .map(|i| &self.jobs[i])
    }
}

pub struct ControlPlane<B> {
    backend: B,
    scheduler: Scheduler,
    autoscaler: Option<Autoscaler>,
    events: Arc<EventLog>,
    code: Option<Arc<CodeStore>>,
}

impl<B: Backend> ControlPlane<B> {
    pub fn new(
        backend: B,
        catalog: InstanceCatalog,
        config: PlaneConfig,
        rendezvous: Arc<RendezvousServer>,
        rendezvous_endpoint: impl Into<String>,
        events: Arc<EventLog>,
    ) -> Result<Self, ConfigError> {
        let autoscaler = config
            .autoscaler
            .map(|c| Autoscaler::new(c, catalog.clone()))
            .transpose()?;
        let mut scheduler = Scheduler::new(
            config.scheduler,
            catalog,
            rendezvous,
            rendezvous_endpoint,
            events.clone(),
        );
        scheduler.set_fleet_limit(config.autoscaler.map(|a| a.max_nodes_per_type));
        Ok(Self {
            backend,
            scheduler,
            autoscaler,
            events,
            code: None,
        })
    }

    /// Submissions naming a digest missing from `store` are refused.
    pub fn with_code_store(mut self, store: Arc<CodeStore>) -> Self {
        self.code = Some(store);
        self
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn backend_mut(&mut self) -> &mut B {
        &mut self.backend
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn autoscaler(&self) -> Option<&Autoscaler> {
        self.autoscaler.as_ref()
    }

    pub fn events(&self) -> &Arc<EventLog> {
        &self.events
    }

    pub fn now(&self) -> Tick {
        self.backend.now()
    }

    pub fn submit(&mut self, spec: JobSpec, principal: Option<String>) -> Result<JobId, SubmitError> {
        let spec = validate_job_spec(spec, self.scheduler.catalog()).map_err(SubmitError::Invalid)?;
        if let (Some(store), Some(digest)) = (&self.code, &spec.code_ref) {
            if !store.contains(digest) {
                return Err(SubmitError::UnknownCode(digest.clone()));
            }
        }
        let now = self.backend.now();
        Ok(self.scheduler.enqueue(spec, principal, now)?)
    }

    pub fn cancel(&mut self, job: JobId) -> Result<(), SchedulerError> {
        self.scheduler.cancel(job, &mut self.backend)
    }

    /// Stops accepting submissions; running work continues.
    pub fn close(&mut self) {
        self.scheduler.close();
    }

    /// Advances one tick: backend events, cleanup retries, then a schedule
    /// pass and an autoscaler scan when due. Returns the backend events
    /// handled.
    pub fn step(&mut self) -> Vec<BackendEvent> {
        self.backend.advance(1);
        let now = self.backend.now();
        let events = self.backend.drain_events();
        for ev in &events {
            self.scheduler.handle_event(ev, &mut self.backend);
        }
        self.scheduler.retry_cleanups(&mut self.backend);
        if self.scheduler.due(now) {
            self.scheduler.run_pass(&mut self.backend);
        }
        if let Some(autoscaler) = self.autoscaler.as_mut().filter(|a| a.due(now)) {
            let demand = compute_demand(
                self.scheduler.queued_specs(),
                &self.scheduler.relaunch_demand(),
                self.scheduler.catalog(),
            );
            let inventory = self.backend.inventory();
            autoscaler.scan(&demand, &inventory, &mut self.backend, &self.events, now);
        }
        events
    }

    /// Steps until `done` holds or `limit` ticks pass. Returns whether `done`
    /// held.
    pub fn run_until(&mut self, limit: Tick, mut done: impl FnMut(&Self) -> bool) -> bool {
        for _ in 0..limit {
            if done(self) {
                return true;
            }
            self.step();
        }
        done(self)
    }

    pub fn all_terminal(&self) -> bool {
        self.scheduler.jobs().values().all(|j| j.state.is_terminal())
    }

    pub fn snapshot(&self) -> Snapshot {
        let jobs = self
            .scheduler
            .jobs()
            .values()
            .map(|j| JobView {
                record: j.clone(),
                queue_position: self.scheduler.queue_position(j.id),
            })
            .collect();
        Snapshot {
            tick: self.backend.now(),
            seq: self.events.last_seq(),
            jobs,
            nodes: self.backend.inventory(),
            queue_depth: self.scheduler.queue().len(),
            scaling: self
                .autoscaler
                .as_ref()
                .map(|a| a.history().to_vec())
                .unwrap_or_default(),
            pending_cleanups: self.scheduler.pending_cleanups().len(),
            closed: self.scheduler.is_closed(),
        }
    }
}
