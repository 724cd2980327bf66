//! Job specifications as submitted by users, and their validation.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{task_name, CodeDigest, Tick};
use crate::resources::ResourceVector;

/// A named compute shape that nodes are launched as.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceType {
    pub name: String,
    pub capacity: ResourceVector,
    #[serde(default)]
    pub boot_delay_ticks: Tick,
}

impl InstanceType {
    pub fn new(name: impl Into<String>, capacity: ResourceVector, boot_delay_ticks: Tick) -> Self {
        Self {
            name: name.into(),
            capacity,
            boot_delay_ticks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CatalogError {
    #[error("instance type {0:?} is declared more than once")]
    DuplicateName(String),
    #[error("instance type {0:?} has zero capacity")]
    ZeroCapacity(String),
}

/// The instance types known to a deployment, keyed by name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstanceCatalog {
    types: BTreeMap<String, InstanceType>,
}

impl InstanceCatalog {
    pub fn new(types: impl IntoIterator<Item = InstanceType>) -> Result<Self, CatalogError> {
        let mut map = BTreeMap::new();
        for ty in types {
            if ty.capacity.is_zero() {
                return Err(CatalogError::ZeroCapacity(ty.name));
            }
            if map.contains_key(&ty.name) {
                return Err(CatalogError::DuplicateName(ty.name));
            }
            map.insert(ty.name.clone(), ty);
        }
        Ok(Self { types: map })
    }

    pub fn get(&self, name: &str) -> Option<&InstanceType> {
        self.types.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &InstanceType> {
        self.types.values()
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Any task failure kills every other task and fails the job.
    #[default]
    TerminateAll,
    /// A failed task is relaunched under the same name, up to
    /// `max_relaunches` times.
    RelaunchFailed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Harness {
    #[default]
    Plain,
    Mpi,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRole {
    #[default]
    Worker,
    ParameterServer,
    Evaluator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGroupSpec {
    pub name: String,
    pub replicas: u32,
    #[serde(default)]
    pub image: String,
    pub instance_type: String,
    #[serde(rename = "resources")]
    pub resources_per_replica: ResourceVector,
    #[serde(default)]
    pub command: Vec<String>,
    #[serde(default)]
    pub harness: Harness,
    #[serde(default)]
    pub role: TaskRole,
}

impl TaskGroupSpec {
    pub fn task_names(&self) -> impl Iterator<Item = String> + '_ {
        (0..self.replicas).map(|i| task_name(&self.name, i))
    }
}

/// A distributed job as submitted. The serialized field names are the job
/// document schema shared by the API and the CLI config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub name: String,
    /// Read-only dataset mount.
    #[serde(rename = "dataset", default, skip_serializing_if = "Option::is_none")]
    pub dataset_uri: Option<String>,
    /// Read-write workspace shared by all tasks.
    #[serde(rename = "workspace", default, skip_serializing_if = "Option::is_none")]
    pub workspace_uri: Option<String>,
    #[serde(rename = "code_digest", default, skip_serializing_if = "Option::is_none")]
    pub code_ref: Option<CodeDigest>,
    #[serde(rename = "tasks")]
    pub task_groups: Vec<TaskGroupSpec>,
    #[serde(default)]
    pub failure_policy: FailurePolicy,
    #[serde(default)]
    pub max_relaunches: u32,
}

impl JobSpec {
    pub fn total_replicas(&self) -> u64 {
        self.task_groups.iter().map(|g| u64::from(g.replicas)).sum()
    }

    pub fn group(&self, name: &str) -> Option<&TaskGroupSpec> {
        self.task_groups.iter().find(|g| g.name == name)
    }

    /// Every task of the job as `(group, task_name)`, in group order.
    pub fn tasks(&self) -> impl Iterator<Item = (&TaskGroupSpec, String)> + '_ {
        self.task_groups
            .iter()
            .flat_map(|g| g.task_names().map(move |n| (g, n)))
    }

    /// Names of tasks that take part in the job's MPI rendezvous.
    pub fn mpi_task_names(&self) -> Vec<String> {
        self.tasks()
            .filter(|(g, _)| g.harness == Harness::Mpi)
            .map(|(_, n)| n)
            .collect()
    }

    pub fn uses_mpi(&self) -> bool {
        self.task_groups
            .iter()
            .any(|g| g.harness == Harness::Mpi && g.replicas > 0)
    }

    /// Sum of every replica's resources.
    pub fn total_resources(&self) -> ResourceVector {
        self.task_groups
            .iter()
            .map(|g| g.resources_per_replica.checked_scale(g.replicas).unwrap_or_default())
            .fold(ResourceVector::ZERO, |acc, r| acc.checked_add(&r).unwrap_or(acc))
    }
}

/// One problem found while validating a [`JobSpec`].
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "PascalCase")]
pub enum SpecViolation {
    #[error("job declares no task groups")]
    NoTaskGroups,
    #[error("task group name {group:?} is not a valid hostname label")]
    InvalidGroupName { group: String },
    #[error("task group {group:?} is declared more than once")]
    DuplicateTaskGroupName { group: String },
    #[error("task group {group:?} has zero replicas")]
    ZeroReplicas { group: String },
    #[error("task group {group:?} requests unknown instance type {instance_type:?}")]
    UnknownInstanceType { group: String, instance_type: String },
    #[error(
        "task group {group:?} requests {requested} per replica, which exceeds instance type {instance_type:?} capacity {capacity}"
    )]
    ResourceExceedsInstanceCapacity {
        group: String,
        instance_type: String,
        requested: ResourceVector,
        capacity: ResourceVector,
    },
}

fn valid_label(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 48
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

/// Checks `spec` against the deployment's instance types. Returns the
/// normalized spec, or every violation found.
pub fn validate_job_spec(mut spec: JobSpec, catalog: &InstanceCatalog) -> Result<JobSpec, Vec<SpecViolation>> {
    let mut violations = Vec::new();
    if spec.task_groups.is_empty() {
        violations.push(SpecViolation::NoTaskGroups);
    }

    let mut seen = HashSet::new();
    for group in &spec.task_groups {
        if !valid_label(&group.name) {
            violations.push(SpecViolation::InvalidGroupName {
                group: group.name.clone(),
            });
        }
        if !seen.insert(group.name.as_str()) {
            violations.push(SpecViolation::DuplicateTaskGroupName {
                group: group.name.clone(),
            });
        }
        if group.replicas == 0 {
            violations.push(SpecViolation::ZeroReplicas {
                group: group.name.clone(),
            });
        }
        match catalog.get(&group.instance_type) {
            None => violations.push(SpecViolation::UnknownInstanceType {
                group: group.name.clone(),
                instance_type: group.instance_type.clone(),
            }),
            Some(ty) if !group.resources_per_replica.fits(&ty.capacity) => {
                violations.push(SpecViolation::ResourceExceedsInstanceCapacity {
                    group: group.name.clone(),
                    instance_type: ty.name.clone(),
                    requested: group.resources_per_replica,
                    capacity: ty.capacity,
                })
            }
            Some(_) => {}
        }
    }

    if !violations.is_empty() {
        return Err(violations);
    }
    if spec.failure_policy == FailurePolicy::TerminateAll {
        spec.max_relaunches = 0;
    }
    Ok(spec)
}
