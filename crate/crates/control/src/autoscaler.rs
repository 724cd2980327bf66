//! Demand-driven cluster sizing: launch instances for queued work, terminate
//! instances that have sat idle past a timeout.

use std::collections::BTreeMap;

use acm_core::packing::aggregate_replicas;
use acm_core::{aggregate_demand, InstanceCatalog, JobSpec, NodeId, ResourceVector, Tick};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{InstanceProvider, Node, NodeState, ProviderError};
use crate::events::{EventLog, EventRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoscalerConfig {
    pub idle_timeout_ticks: Tick,
    pub max_nodes_per_type: u32,
    pub scan_interval_ticks: Tick,
}

impl Default for AutoscalerConfig {
    fn default() -> Self {
        Self {
            idle_timeout_ticks: 30,
            max_nodes_per_type: 16,
            scan_interval_ticks: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("autoscaler {field} must be positive")]
pub struct ConfigError {
    pub field: &'static str,
}

impl AutoscalerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let zero = [
            ("idle_timeout_ticks", self.idle_timeout_ticks == 0),
            ("max_nodes_per_type", self.max_nodes_per_type == 0),
            ("scan_interval_ticks", self.scan_interval_ticks == 0),
        ];
        match zero.into_iter().find(|(_, z)| *z) {
            Some((field, _)) => Err(ConfigError { field }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalingPlan {
    pub launches: BTreeMap<String, u32>,
    pub terminations: Vec<NodeId>,
    pub rationale: Vec<String>,
}

impl ScalingPlan {
    pub fn is_empty(&self) -> bool {
        self.launches.values().all(|&n| n == 0) && self.terminations.is_empty()
    }
}

/// Instances per type needed by queued jobs plus tasks awaiting relaunch.
pub fn compute_demand<'a>(
    queued: impl IntoIterator<Item = &'a JobSpec>,
    relaunch_pending: &[(String, ResourceVector)],
    catalog: &InstanceCatalog,
) -> BTreeMap<String, u32> {
    let mut demand: BTreeMap<String, u32> = BTreeMap::new();
    for spec in queued {
        for (ty, d) in aggregate_demand(spec, catalog) {
            *demand.entry(ty).or_default() += d.instances;
        }
    }
    let loose = aggregate_replicas(relaunch_pending.iter().map(|(ty, r)| (ty.as_str(), *r)), catalog);
    for (ty, d) in loose {
        *demand.entry(ty).or_default() += d.instances;
    }
    demand.retain(|_, n| *n > 0);
    demand
}

/// Supply counts idle Ready nodes and Booting nodes. Idle nodes beyond the
/// demand are terminated once idle for longer than the timeout, keeping the
/// most recently idle ones.
pub fn plan(demand: &BTreeMap<String, u32>, inventory: &[Node], config: &AutoscalerConfig, now: Tick) -> ScalingPlan {
    let mut types: Vec<&str> = demand.keys().map(String::as_str).collect();
    types.extend(inventory.iter().map(|n| n.instance_type.as_str()));
    types.sort_unstable();
    types.dedup();

    let mut out = ScalingPlan::default();
    for ty in types {
        let want = demand.get(ty).copied().unwrap_or(0);
        let of_type = || inventory.iter().filter(move |n| n.instance_type == ty);
        let booting = of_type().filter(|n| n.state == NodeState::Booting).count() as u32;
        let mut idle: Vec<&Node> = of_type().filter(|n| n.is_idle()).collect();
        let live = of_type().filter(|n| n.state != NodeState::Terminating).count() as u32;
        let supply = booting + idle.len() as u32;

        if want > supply {
            let room = config.max_nodes_per_type.saturating_sub(live);
            let n = (want - supply).min(room);
            if n > 0 {
                out.launches.insert(ty.to_string(), n);
            }
            let capped = if n < want - supply {
                format!(", capped at {} nodes", config.max_nodes_per_type)
            } else {
                String::new()
            };
            out.rationale.push(format!(
                "{ty}: demand {want}, supply {supply} ({} idle, {booting} booting); launch {n}{capped}",
                idle.len()
            ));
            continue;
        }

        // Most recently idle first; the oldest are released first.
        idle.sort_by(|a, b| b.idle_since.cmp(&a.idle_since).then_with(|| a.node_id.cmp(&b.node_id)));
        let keep = want.saturating_sub(booting) as usize;
        let expired: Vec<&Node> = idle
            .iter()
            .skip(keep)
            .filter(|n| {
                n.idle_since
                    .is_some_and(|t| now.saturating_sub(t) > config.idle_timeout_ticks)
            })
            .copied()
            .collect();
        for n in &expired {
            out.terminations.push(n.node_id.clone());
            out.rationale.push(format!(
                "{ty}: {} idle since tick {}, past timeout {}; demand {want}",
                n.node_id,
                n.idle_since.unwrap_or_default(),
                config.idle_timeout_ticks
            ));
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ApplyOutcome {
    pub launched: Vec<NodeId>,
    pub terminated: Vec<NodeId>,
    pub alerts: Vec<String>,
}

/// Issues the plan. A quota error stops launches of that type and is
/// reported; a node that picked up work since planning is skipped.
pub fn apply<P: InstanceProvider + ?Sized>(
    plan: &ScalingPlan,
    provider: &mut P,
    catalog: &InstanceCatalog,
) -> ApplyOutcome {
    let mut out = ApplyOutcome::default();
    for (ty, &n) in &plan.launches {
        let Some(instance_type) = catalog.get(ty) else {
            out.alerts.push(format!("unknown instance type {ty}"));
            continue;
        };
        for i in 0..n {
            match provider.launch_instance(instance_type) {
                Ok(id) => out.launched.push(id),
                Err(e) => {
                    out.alerts.push(format!("{e}: launched {i} of {n} {ty}"));
                    break;
                }
            }
        }
    }
    for node in &plan.terminations {
        match provider.terminate_instance(node) {
            Ok(()) => out.terminated.push(node.clone()),
            Err(ProviderError::NodeBusy(_)) => {}
            Err(e) => out.alerts.push(e.to_string()),
        }
    }
    out
}

pub struct Autoscaler {
    config: AutoscalerConfig,
    catalog: InstanceCatalog,
    history: Vec<EventRecord>,
}

impl Autoscaler {
    pub fn new(config: AutoscalerConfig, catalog: InstanceCatalog) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            config,
            catalog,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &AutoscalerConfig {
        &self.config
    }

    pub fn due(&self, now: Tick) -> bool {
        now % self.config.scan_interval_ticks == 0
    }

    /// Scaling records logged so far.
    pub fn history(&self) -> &[EventRecord] {
        &self.history
    }

    /// One scan: plan against the snapshot, apply, and log.
    pub fn scan<P: InstanceProvider + ?Sized>(
        &mut self,
        demand: &BTreeMap<String, u32>,
        inventory: &[Node],
        provider: &mut P,
        events: &EventLog,
        now: Tick,
    ) -> ApplyOutcome {
        let plan = plan(demand, inventory, &self.config, now);
        if plan.is_empty() {
            return ApplyOutcome::default();
        }
        let outcome = apply(&plan, provider, &self.catalog);
        let seq = events.push(|seq| EventRecord::Scaling {
            seq,
            tick: now,
            demand: demand.clone(),
            launches: plan.launches.clone(),
            terminations: outcome.terminated.clone(),
            rationale: plan.rationale.clone(),
        });
        self.history.extend(events.range(seq - 1, seq));
        for message in &outcome.alerts {
            events.push(|seq| EventRecord::Alert {
                seq,
                tick: now,
                job_id: None,
                alert: "ProviderQuotaExceeded".into(),
                message: message.clone(),
            });
        }
        outcome
    }
}
