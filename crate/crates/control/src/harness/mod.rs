//! Two-phase task startup: the init phase (code fetch and preflight) and the
//! in-task rendezvous used by MPI jobs.

pub mod bootstrap;
pub mod preflight;
pub mod rendezvous;
pub mod wire;

pub use bootstrap::{mpi_bootstrap, LaunchDescriptor, LaunchMode};
pub use preflight::{run_init, CheckResult, InitEnvironment, InitError, InitPlan, PreflightReport};
pub use rendezvous::{Credentials, Peer, Proceed, RendezvousError, RendezvousServer, Reply};
pub use wire::{RendezvousClient, WireServer};
