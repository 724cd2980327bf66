//! Per-job rendezvous: registration barrier, shared credentials, and the
//! graceful-stop flag. One server serves every job of a deployment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use acm_core::JobId;
use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shared secret for one generation of a job. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct Credentials([u8; 32]);

impl Credentials {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for Credentials {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Credentials(<redacted>)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Peer {
    pub task_name: String,
    pub address: String,
}

/// Released barrier: everything a task needs to join the MPI world.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proceed {
    pub generation: u64,
    pub credentials: Credentials,
    /// Ordered by rank.
    pub peers: Vec<Peer>,
    pub rank: u32,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Wait { generation: u64 },
    Proceed(Proceed),
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RendezvousError {
    #[error("no rendezvous for {0}")]
    UnknownJob(JobId),
    #[error("{task} is not an expected member of {job}")]
    UnknownTask { job: JobId, task: String },
    #[error("generation {given} is stale; current is {current}")]
    StaleGeneration { current: u64, given: u64 },
    #[error("{task} has not registered in generation {generation}")]
    NotRegistered { task: String, generation: u64 },
}

#[derive(Debug)]
struct JobRendezvous {
    /// Sorted; rank is the index.
    expected: Vec<String>,
    registered: BTreeMap<String, String>,
    credentials: Credentials,
    generation: u64,
    stop_requested: bool,
    stop_acks: BTreeSet<String>,
    /// Tasks that have seen this generation's Proceed.
    released: BTreeSet<String>,
}

impl JobRendezvous {
    fn is_open(&self) -> bool {
        self.registered.len() == self.expected.len()
    }

    fn proceed_for(&self, task: &str) -> Proceed {
        let rank = self
            .expected
            .binary_search_by(|t| t.as_str().cmp(task))
            .expect("registered tasks are expected");
        Proceed {
            generation: self.generation,
            credentials: self.credentials.clone(),
            peers: self
                .expected
                .iter()
                .map(|t| Peer {
                    task_name: t.clone(),
                    address: self.registered[t].clone(),
                })
                .collect(),
            rank: rank as u32,
            size: self.expected.len() as u32,
        }
    }

    /// A registered task sees the open barrier once before any stop, so a
    /// rank never misses its start when rank 0 finishes first.
    fn reply_for(&mut self, task: &str) -> Reply {
        let unreleased = self.is_open() && self.registered.contains_key(task) && !self.released.contains(task);
        if self.stop_requested && !unreleased {
            Reply::Stop
        } else if self.is_open() {
            self.released.insert(task.to_string());
            Reply::Proceed(self.proceed_for(task))
        } else {
            Reply::Wait {
                generation: self.generation,
            }
        }
    }

    fn check(&self, job: JobId, task: &str, generation: u64) -> Result<(), RendezvousError> {
        if self.expected.binary_search_by(|t| t.as_str().cmp(task)).is_err() {
            return Err(RendezvousError::UnknownTask {
                job,
                task: task.to_string(),
            });
        }
        if generation != self.generation {
            return Err(RendezvousError::StaleGeneration {
                current: self.generation,
                given: generation,
            });
        }
        Ok(())
    }
}

/// Rendezvous state for every job. Each call is one atomic step under the
/// server lock, so registrations are check-and-insert and a barrier release
/// is seen by every member with identical peers and credentials.
pub struct RendezvousServer {
    seed: u64,
    jobs: Mutex<BTreeMap<JobId, JobRendezvous>>,
}

impl fmt::Debug for RendezvousServer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RendezvousServer")
            .field("jobs", &self.jobs.lock().len())
            .finish()
    }
}

impl RendezvousServer {
    /// Credentials are derived from `seed`, the job and the generation, so a
    /// seeded server is reproducible. Use [`RendezvousServer::random`] in
    /// deployments.
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            jobs: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn random() -> Self {
        Self::new(rand::rng().next_u64())
    }

    fn credentials(&self, job: JobId, generation: u64) -> Credentials {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.seed.to_le_bytes());
        seed[8..16].copy_from_slice(&job.0.to_le_bytes());
        seed[16..24].copy_from_slice(&generation.to_le_bytes());
        let mut rng = ChaCha20Rng::from_seed(seed);
        let mut out = [0u8; 32];
        rng.fill_bytes(&mut out);
        Credentials(out)
    }

    /// Opens (or resets) a job's rendezvous at generation 0.
    pub fn open(&self, job: JobId, expected: impl IntoIterator<Item = String>) {
        let mut expected: Vec<String> = expected.into_iter().collect();
        expected.sort();
        expected.dedup();
        let state = JobRendezvous {
            expected,
            registered: BTreeMap::new(),
            credentials: self.credentials(job, 0),
            generation: 0,
            stop_requested: false,
            stop_acks: BTreeSet::new(),
            released: BTreeSet::new(),
        };
        self.jobs.lock().insert(job, state);
    }

    pub fn contains(&self, job: JobId) -> bool {
        self.jobs.lock().contains_key(&job)
    }

    pub fn generation(&self, job: JobId) -> Option<u64> {
        self.jobs.lock().get(&job).map(|s| s.generation)
    }

    /// Rank of `task`: its index among the job's expected tasks, sorted.
    pub fn rank_of(&self, job: JobId, task: &str) -> Option<u32> {
        let jobs = self.jobs.lock();
        let state = jobs.get(&job)?;
        state
            .expected
            .binary_search_by(|t| t.as_str().cmp(task))
            .ok()
            .map(|r| r as u32)
    }

    /// Registers `task` at `address`. Idempotent within a generation: a
    /// repeated call returns the current reply and keeps the first address.
    pub fn register(&self, job: JobId, task: &str, address: &str, generation: u64) -> Result<Reply, RendezvousError> {
        let mut jobs = self.jobs.lock();
        let state = jobs.get_mut(&job).ok_or(RendezvousError::UnknownJob(job))?;
        state.check(job, task, generation)?;
        if !state.stop_requested {
            state
                .registered
                .entry(task.to_string())
                .or_insert_with(|| address.to_string());
        }
        Ok(state.reply_for(task))
    }

    /// Reply for an already registered task.
    pub fn poll(&self, job: JobId, task: &str, generation: u64) -> Result<Reply, RendezvousError> {
        let mut jobs = self.jobs.lock();
        let state = jobs.get_mut(&job).ok_or(RendezvousError::UnknownJob(job))?;
        state.check(job, task, generation)?;
        if !state.stop_requested && !state.registered.contains_key(task) {
            return Err(RendezvousError::NotRegistered {
                task: task.to_string(),
                generation,
            });
        }
        Ok(state.reply_for(task))
    }

    pub fn stop_ack(&self, job: JobId, task: &str, generation: u64) -> Result<(), RendezvousError> {
        let mut jobs = self.jobs.lock();
        let state = jobs.get_mut(&job).ok_or(RendezvousError::UnknownJob(job))?;
        state.check(job, task, generation)?;
        state.stop_acks.insert(task.to_string());
        Ok(())
    }

    /// Tasks that acknowledged the stop request.
    pub fn stop_acks(&self, job: JobId) -> Vec<String> {
        self.jobs
            .lock()
            .get(&job)
            .map(|s| s.stop_acks.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// Asks every waiting rank to exit. Returns false for unknown jobs.
    pub fn graceful_stop(&self, job: JobId) -> bool {
        match self.jobs.lock().get_mut(&job) {
            Some(state) => {
                state.stop_requested = true;
                true
            }
            None => false,
        }
    }

    pub fn stop_requested(&self, job: JobId) -> bool {
        self.jobs.lock().get(&job).is_some_and(|s| s.stop_requested)
    }

    /// Starts a new generation after a relaunch: fresh credentials, all
    /// registrations dropped, earlier generations rejected as stale. A stop
    /// already requested stays in force, so a relaunched rank of a finished
    /// job is told to stop on registration.
    pub fn relaunch(&self, job: JobId) -> Option<u64> {
        let mut jobs = self.jobs.lock();
        let state = jobs.get_mut(&job)?;
        state.generation += 1;
        state.credentials = self.credentials(job, state.generation);
        state.registered.clear();
        state.stop_acks.clear();
        state.released.clear();
        Some(state.generation)
    }

    pub fn verify_credentials(&self, job: JobId, credentials: &Credentials) -> bool {
        self.jobs
            .lock()
            .get(&job)
            .is_some_and(|s| s.credentials == *credentials)
    }

    pub fn remove(&self, job: JobId) -> bool {
        self.jobs.lock().remove(&job).is_some()
    }

    pub fn job_count(&self) -> usize {
        self.jobs.lock().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("worker-{i}")).collect()
    }

    #[test]
    fn barrier_waits_for_all_then_releases_everyone() {
        let server = RendezvousServer::new(7);
        let job = JobId(1);
        server.open(job, names(3));
        for t in ["worker-0", "worker-1"] {
            assert_eq!(
                server.register(job, t, &format!("addr-{t}"), 0).unwrap(),
                Reply::Wait { generation: 0 }
            );
        }
        let Reply::Proceed(last) = server.register(job, "worker-2", "addr-worker-2", 0).unwrap() else {
            panic!("barrier should open");
        };
        let mut ranks = BTreeMap::new();
        for t in names(3) {
            let Reply::Proceed(p) = server.poll(job, &t, 0).unwrap() else {
                panic!("{t} should proceed");
            };
            assert_eq!(p.credentials, last.credentials);
            assert_eq!(p.peers, last.peers);
            ranks.insert(t, p.rank);
        }
        assert_eq!(ranks["worker-0"], 0);
        assert_eq!(ranks["worker-1"], 1);
        assert_eq!(ranks["worker-2"], 2);
    }

    #[test]
    fn registration_is_idempotent() {
        let server = RendezvousServer::new(0);
        server.open(JobId(1), names(2));
        server.register(JobId(1), "worker-0", "a", 0).unwrap();
        server.register(JobId(1), "worker-0", "b", 0).unwrap();
        let Reply::Proceed(p) = server.register(JobId(1), "worker-1", "c", 0).unwrap() else {
            panic!()
        };
        assert_eq!(p.peers[0].address, "a");
    }

    #[test]
    fn relaunch_invalidates_the_old_generation() {
        let server = RendezvousServer::new(0);
        let job = JobId(4);
        server.open(job, names(3));
        for t in names(3) {
            server.register(job, &t, "x", 0).unwrap();
        }
        let Reply::Proceed(old) = server.poll(job, "worker-0", 0).unwrap() else {
            panic!()
        };
        assert_eq!(server.relaunch(job), Some(1));
        assert_eq!(
            server.poll(job, "worker-0", 0),
            Err(RendezvousError::StaleGeneration { current: 1, given: 0 })
        );
        assert!(!server.verify_credentials(job, &old.credentials));
        assert_eq!(
            server.register(job, "worker-0", "x", 1).unwrap(),
            Reply::Wait { generation: 1 }
        );
        server.register(job, "worker-2", "x", 1).unwrap();
        let Reply::Proceed(new) = server.register(job, "worker-1", "y", 1).unwrap() else {
            panic!()
        };
        assert_eq!(new.generation, 1);
        assert_ne!(new.credentials, old.credentials);
        assert!(server.verify_credentials(job, &new.credentials));
    }

    #[test]
    fn unknown_members_and_jobs_are_rejected() {
        let server = RendezvousServer::new(0);
        assert_eq!(
            server.register(JobId(9), "w", "a", 0),
            Err(RendezvousError::UnknownJob(JobId(9)))
        );
        server.open(JobId(9), names(1));
        assert!(matches!(
            server.register(JobId(9), "ps-0", "a", 0),
            Err(RendezvousError::UnknownTask { .. })
        ));
    }

    #[test]
    fn stop_reaches_waiting_ranks() {
        let server = RendezvousServer::new(0);
        server.open(JobId(1), names(2));
        server.register(JobId(1), "worker-0", "a", 0).unwrap();
        server.register(JobId(1), "worker-1", "b", 0).unwrap();
        assert!(server.graceful_stop(JobId(1)));
        assert_eq!(server.poll(JobId(1), "worker-1", 0).unwrap(), Reply::Stop);
        server.stop_ack(JobId(1), "worker-1", 0).unwrap();
        assert_eq!(server.stop_acks(JobId(1)), ["worker-1"]);
    }

    #[test]
    fn a_rank_sees_its_release_before_a_later_stop() {
        let server = RendezvousServer::new(0);
        server.open(JobId(1), names(2));
        server.register(JobId(1), "worker-0", "a", 0).unwrap();
        server.register(JobId(1), "worker-1", "b", 0).unwrap();
        // Rank 0 finished before worker-0 polled its release.
        server.graceful_stop(JobId(1));
        assert!(matches!(
            server.poll(JobId(1), "worker-0", 0).unwrap(),
            Reply::Proceed(_)
        ));
        assert_eq!(server.poll(JobId(1), "worker-0", 0).unwrap(), Reply::Stop);
    }

    #[test]
    fn credentials_are_redacted_in_debug() {
        let server = RendezvousServer::new(0);
        server.open(JobId(1), names(1));
        let Reply::Proceed(p) = server.register(JobId(1), "worker-0", "a", 0).unwrap() else {
            panic!()
        };
        let shown = format!("{p:?}");
        assert!(!shown.contains(&p.credentials.to_hex()));
        assert!(shown.contains("redacted"));
    }

    #[test]
    fn seeded_servers_agree() {
        let a = RendezvousServer::new(42);
        let b = RendezvousServer::new(42);
        assert_eq!(a.credentials(JobId(3), 2), b.credentials(JobId(3), 2));
        assert_ne!(a.credentials(JobId(3), 2), a.credentials(JobId(3), 3));
    }
}
