//! Shared domain model for the acm distributed-training control plane:
//! resource vectors, job specifications, lifecycle state machines, and the
//! packing rules used by both the scheduler and the autoscaler.

pub mod ids;
pub mod packing;
pub mod resources;
pub mod spec;
pub mod state;

pub use ids::{task_name, CodeDigest, JobId, NodeId, Tick};
pub use packing::{aggregate_demand, aggregate_replicas, TypeDemand};
pub use resources::{ResourceError, ResourceVector};
pub use spec::{
    validate_job_spec, CatalogError, FailurePolicy, Harness, InstanceCatalog, InstanceType, JobSpec, SpecViolation,
    TaskGroupSpec, TaskRole,
};
pub use state::{IllegalTransition, JobEvent, JobRecord, JobState, TaskEvent, TaskRecord, TaskState, Transition};
