//! Node table and per-task reservations shared by both backends.

use std::collections::BTreeMap;

use acm_core::{JobId, NodeId, ResourceVector, Tick};

use super::{BackendError, Node, NodeState, ProviderError};

#[derive(Debug, Clone, Default)]
pub(crate) struct Inventory {
    nodes: BTreeMap<NodeId, Node>,
    reservations: BTreeMap<(JobId, String), (NodeId, ResourceVector)>,
}

impl Inventory {
    pub fn add_node(&mut self, id: NodeId, instance_type: &str, capacity: ResourceVector, state: NodeState, now: Tick) {
        let node = Node {
            node_id: id.clone(),
            instance_type: instance_type.to_string(),
            capacity,
            allocatable: capacity,
            state,
            idle_since: (state == NodeState::Ready).then_some(now),
            running_tasks: Default::default(),
        };
        self.nodes.insert(id, node);
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> Vec<Node> {
        self.nodes.values().cloned().collect()
    }

    /// Nodes of `instance_type` that count against its quota.
    pub fn live_count(&self, instance_type: &str) -> usize {
        self.nodes
            .values()
            .filter(|n| n.instance_type == instance_type && n.state != NodeState::Terminating)
            .count()
    }

    pub fn mark_ready(&mut self, id: &NodeId, now: Tick) -> bool {
        match self.nodes.get_mut(id) {
            Some(n) if n.state == NodeState::Booting => {
                n.state = NodeState::Ready;
                n.idle_since = n.running_tasks.is_empty().then_some(now);
                true
            }
            _ => false,
        }
    }

    pub fn mark_terminating(&mut self, id: &NodeId) -> Result<(), ProviderError> {
        let node = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| ProviderError::UnknownNode(id.clone()))?;
        if !node.running_tasks.is_empty() {
            return Err(ProviderError::NodeBusy(id.clone()));
        }
        node.state = NodeState::Terminating;
        node.idle_since = None;
        Ok(())
    }

    pub fn remove_node(&mut self, id: &NodeId) -> Option<Node> {
        self.nodes.remove(id)
    }

    pub fn reserve(
        &mut self,
        job: JobId,
        task: &str,
        node_id: &NodeId,
        resources: ResourceVector,
    ) -> Result<(), BackendError> {
        let key = (job, task.to_string());
        if self.reservations.contains_key(&key) {
            return Err(BackendError::AlreadyLaunched {
                job,
                task: task.to_string(),
            });
        }
        let node = match self.nodes.get_mut(node_id) {
            Some(n) if n.state == NodeState::Ready => n,
            _ => return Err(BackendError::NodeNotReady(node_id.clone())),
        };
        node.allocatable =
            node.allocatable
                .checked_sub(&resources)
                .map_err(|_| BackendError::InsufficientAllocatable {
                    node: node_id.clone(),
                    requested: resources,
                    allocatable: node.allocatable,
                })?;
        node.running_tasks.insert(key.clone());
        node.idle_since = None;
        self.reservations.insert(key, (node_id.clone(), resources));
        Ok(())
    }

    /// Returns the reservation's resources to its node. `None` if the task
    /// held nothing.
    pub fn release(&mut self, job: JobId, task: &str, now: Tick) -> Option<NodeId> {
        let key = (job, task.to_string());
        let (node_id, resources) = self.reservations.remove(&key)?;
        if let Some(node) = self.nodes.get_mut(&node_id) {
            node.allocatable = node
                .allocatable
                .checked_add(&resources)
                .expect("released resources were taken from this node");
            debug_assert!(node.allocatable.fits(&node.capacity));
            node.running_tasks.remove(&key);
            if node.running_tasks.is_empty() && node.state == NodeState::Ready {
                node.idle_since = Some(now);
            }
        }
        Some(node_id)
    }

    pub fn reservation(&self, job: JobId, task: &str) -> Option<&(NodeId, ResourceVector)> {
        self.reservations.get(&(job, task.to_string()))
    }

    /// Tasks holding resources on `node`, sorted.
    pub fn tasks_on(&self, node: &NodeId) -> Vec<(JobId, String)> {
        self.nodes
            .get(node)
            .map(|n| n.running_tasks.iter().cloned().collect())
            .unwrap_or_default()
    }
}
