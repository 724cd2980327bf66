//! First-fit-decreasing packing of task replicas onto instances.
//!
//! Items are ordered by (GPUs, memory, CPU) descending, ties broken by input
//! order, and each goes into the first bin with room.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::resources::ResourceVector;
use crate::spec::{InstanceCatalog, JobSpec};

/// Indices of `items` in first-fit-decreasing order.
pub fn ffd_order(items: &[ResourceVector]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].packing_key().cmp(&items[a].packing_key()));
    order
}

/// Packs `items` into the given bins (free capacities, in preference order).
/// Returns the bin index chosen for each item, or `None` if some item finds
/// no bin with room.
pub fn pack_into_bins(items: &[ResourceVector], bins: &[ResourceVector]) -> Option<Vec<usize>> {
    let mut free = bins.to_vec();
    let mut assignment = vec![usize::MAX; items.len()];
    for i in ffd_order(items) {
        let slot = free.iter().position(|bin| items[i].fits(bin))?;
        free[slot] = free[slot].checked_sub(&items[i]).ok()?;
        assignment[i] = slot;
    }
    Some(assignment)
}

/// Number of identical, initially empty bins of `capacity` that
/// first-fit-decreasing opens for `items`. `None` if an item is larger than
/// a whole bin.
pub fn count_bins(items: &[ResourceVector], capacity: ResourceVector) -> Option<u32> {
    let mut free: Vec<ResourceVector> = Vec::new();
    for i in ffd_order(items) {
        let item = items[i];
        if !item.fits(&capacity) {
            return None;
        }
        match free.iter_mut().find(|bin| item.fits(bin)) {
            Some(bin) => *bin = bin.checked_sub(&item).ok()?,
            None => free.push(capacity.checked_sub(&item).ok()?),
        }
    }
    u32::try_from(free.len()).ok()
}

/// Instances of one type needed to host a set of replicas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TypeDemand {
    pub instances: u32,
    pub total: ResourceVector,
}

/// Demand per instance type for loose replicas given as
/// `(instance_type, resources)`. Types missing from the catalog are skipped.
pub fn aggregate_replicas<'a>(
    replicas: impl IntoIterator<Item = (&'a str, ResourceVector)>,
    catalog: &InstanceCatalog,
) -> BTreeMap<String, TypeDemand> {
    let mut by_type: BTreeMap<&str, Vec<ResourceVector>> = BTreeMap::new();
    for (ty, r) in replicas {
        by_type.entry(ty).or_default().push(r);
    }
    by_type
        .into_iter()
        .filter_map(|(ty, items)| {
            let capacity = catalog.get(ty)?.capacity;
            let instances = count_bins(&items, capacity)?;
            let total = ResourceVector::sum(&items).ok()?;
            Some((ty.to_string(), TypeDemand { instances, total }))
        })
        .collect()
}

/// Whole instances per type needed to run every replica of a validated job.
pub fn aggregate_demand(spec: &JobSpec, catalog: &InstanceCatalog) -> BTreeMap<String, TypeDemand> {
    aggregate_replicas(
        spec.tasks()
            .map(|(g, _)| (g.instance_type.as_str(), g.resources_per_replica)),
        catalog,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{FailurePolicy, Harness, InstanceType, TaskGroupSpec, TaskRole};
    use proptest::prelude::*;

    const GIB: u64 = 1 << 30;

    /// Fewest bins any assignment can use, by exhaustive search. Test-only.
    fn optimal_bins(items: &[ResourceVector], capacity: ResourceVector) -> u32 {
        fn place(
            i: usize,
            items: &[ResourceVector],
            bins: &mut Vec<ResourceVector>,
            capacity: ResourceVector,
            best: &mut usize,
        ) {
            if bins.len() >= *best {
                return;
            }
            if i == items.len() {
                *best = bins.len();
                return;
            }
            for b in 0..bins.len() {
                if let Ok(rest) = bins[b].checked_sub(&items[i]) {
                    let prev = bins[b];
                    bins[b] = rest;
                    place(i + 1, items, bins, capacity, best);
                    bins[b] = prev;
                }
            }
            bins.push(capacity.checked_sub(&items[i]).unwrap());
            place(i + 1, items, bins, capacity, best);
            bins.pop();
        }
        let mut best = usize::MAX;
        place(0, items, &mut Vec::new(), capacity, &mut best);
        best as u32
    }

    fn group(name: &str, replicas: u32, r: ResourceVector) -> TaskGroupSpec {
        TaskGroupSpec {
            name: name.into(),
            replicas,
            image: String::new(),
            instance_type: "node".into(),
            resources_per_replica: r,
            command: vec![],
            harness: Harness::Plain,
            role: TaskRole::Worker,
        }
    }

    fn job(groups: Vec<TaskGroupSpec>) -> JobSpec {
        JobSpec {
            name: "j".into(),
            dataset_uri: None,
            workspace_uri: None,
            code_ref: None,
            task_groups: groups,
            failure_policy: FailurePolicy::TerminateAll,
            max_relaunches: 0,
        }
    }

    fn catalog(capacity: ResourceVector) -> InstanceCatalog {
        InstanceCatalog::new([InstanceType::new("node", capacity, 0)]).unwrap()
    }

    #[test]
    fn eight_single_gpu_replicas_share_one_instance() {
        let cap = ResourceVector::cores(64, 8, 512 * GIB);
        let item = ResourceVector::cores(8, 1, 0);
        // Small enough for the exhaustive oracle.
        assert_eq!(optimal_bins(&[item; 8], cap), 1);
        let demand = aggregate_demand(&job(vec![group("worker", 8, item)]), &catalog(cap));
        assert_eq!(demand["node"].instances, 1);
        assert_eq!(demand["node"].total, ResourceVector::cores(64, 8, 0));
    }

    #[test]
    fn full_instance_groups_never_share() {
        let cap = ResourceVector::cores(64, 8, 512 * GIB);
        let spec = job(vec![group("a", 1, cap), group("b", 1, cap), group("c", 1, cap)]);
        assert_eq!(aggregate_demand(&spec, &catalog(cap))["node"].instances, 3);
    }

    #[test]
    fn sixty_five_single_core_replicas_need_two_instances() {
        let cap = ResourceVector::cores(64, 8, 512 * GIB);
        let item = ResourceVector::cores(1, 0, 0);
        // Identical items: every packing is a partition by count, so the
        // optimum is the ceiling of 65 / 64.
        assert_eq!(65u32.div_ceil(64), 2);
        let demand = aggregate_demand(&job(vec![group("w", 65, item)]), &catalog(cap));
        assert_eq!(demand["node"].instances, 2);
    }

    #[test]
    fn pack_into_bins_respects_capacity_and_order() {
        let bins = [ResourceVector::cores(4, 1, 0), ResourceVector::cores(8, 2, 0)];
        let items = [ResourceVector::cores(1, 0, 0), ResourceVector::cores(4, 2, 0)];
        assert_eq!(pack_into_bins(&items, &bins), Some(vec![0, 1]));
        let too_big = [ResourceVector::cores(9, 0, 0)];
        assert_eq!(pack_into_bins(&too_big, &bins), None);
    }

    fn item() -> impl Strategy<Value = ResourceVector> {
        (0u64..=8, 0u32..=4, 0u64..=4).prop_map(|(c, g, m)| ResourceVector::cores(c, g, m * GIB))
    }

    proptest! {
        #[test]
        fn ffd_is_never_better_than_optimal(items in proptest::collection::vec(item(), 1..7)) {
            let cap = ResourceVector::cores(8, 4, 4 * GIB);
            let ffd = count_bins(&items, cap).unwrap();
            prop_assert!(ffd >= optimal_bins(&items, cap));
        }

        #[test]
        fn demand_covers_the_gpu_lower_bound(
            gpus in 1u32..=8, replicas in 1u32..40, cap_gpus in 8u32..=16,
        ) {
            let cap = ResourceVector::cores(1024, cap_gpus, 0);
            let spec = job(vec![group("w", replicas, ResourceVector::new(0, gpus, 0))]);
            let d = aggregate_demand(&spec, &catalog(cap));
            let lower = (gpus * replicas).div_ceil(cap_gpus);
            prop_assert!(d["node"].instances >= lower);
        }
    }
}
