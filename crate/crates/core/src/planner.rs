//! Expert placement planning.
//!
//! * [`estimate_loads`]: sliding-window average of recent gate decisions.
//! * [`sparse_materialization`]: picks which experts to replicate onto which
//!   devices for one layer and one iteration, bounded by the overlap degree
//!   `t` and the per-device memory capacity `m` (both in experts).
//! * [`calibrate`]: after the gate, re-plans with the observed loads and keeps
//!   the extension only if it lowers the estimated latency once its extra
//!   communication is paid on the critical path.
//! * [`heterogeneous_sharding`]: periodic re-sharding of all layers with equal
//!   per-device memory but an arbitrary number of experts per layer per device.
//!
//! Every descending sort breaks ties by the lower index.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{collective_latency, spag_traffic, sprs_traffic, CostError};
use crate::dispatch::{build_dispatch, dispatch_traffic, DispatchError};
use crate::load::{ExpertLoadMatrix, TokenCounts};
use crate::placement::{balanced_counts, make_even_partition, ChunkPlacement, PlacementError, ShardPlan};
use crate::scalar::Scalar;
use crate::topology::ClusterTopology;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("load history is empty")]
    EmptyHistory,
    #[error("load matrices disagree on dimensions")]
    DimensionMismatch,
    #[error("no free slot for expert {expert} of layer {layer}")]
    InfeasibleSlots { layer: usize, expert: usize },
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
}

/// Per-layer, per-expert loads across the whole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GlobalLoadProfile<T> {
    pub per_layer: Vec<Vec<T>>,
}

impl<T: Scalar> GlobalLoadProfile<T> {
    pub fn new(per_layer: Vec<Vec<T>>) -> Self {
        Self { per_layer }
    }

    pub fn from_matrices(layers: &[ExpertLoadMatrix<T>]) -> Self {
        Self {
            per_layer: layers.iter().map(ExpertLoadMatrix::expert_loads).collect(),
        }
    }

    pub fn total_experts(&self) -> usize {
        self.per_layer.iter().map(Vec::len).sum()
    }
}

/// Target placement of one layer's sparse all-gather.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaterializationPlan {
    /// Sharded placement the all-gather starts from (a partition).
    pub source: ChunkPlacement,
    /// Materialized placement, a superset of `source`.
    pub target: ChunkPlacement,
    /// Replicas added on each device.
    pub added_per_device: Vec<usize>,
}

impl MaterializationPlan {
    /// Plan that materializes nothing.
    pub fn identity(source: ChunkPlacement) -> Self {
        let added_per_device = vec![0; source.num_devices()];
        Self {
            target: source.clone(),
            source,
            added_per_device,
        }
    }

    fn new(source: ChunkPlacement, target: ChunkPlacement) -> Self {
        let mut added_per_device = vec![0; source.num_devices()];
        for (c, d) in target.entries() {
            if !source.contains(c, d) {
                added_per_device[d] += 1;
            }
        }
        Self {
            source,
            target,
            added_per_device,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.source == self.target
    }

    pub fn max_added(&self) -> usize {
        self.added_per_device.iter().copied().max().unwrap_or(0)
    }
}

fn cmp_scalar<T: Scalar>(a: T, b: T) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Indices sorted by descending load, ties to the lower index.
pub fn sort_by_load_desc<T: Scalar>(loads: &[T], indices: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = indices.into_iter().collect();
    idx.sort_by(|&a, &b| cmp_scalar(loads[b], loads[a]).then(a.cmp(&b)));
    idx
}

/// The `t` most loaded experts, most loaded first.
pub fn top_experts<T: Scalar>(loads: &[T], t: usize) -> Vec<usize> {
    let mut order = sort_by_load_desc(loads, 0..loads.len());
    order.truncate(t);
    order
}

/// Sliding-window mean of the last `window` load matrices.
pub fn estimate_loads<T: Scalar>(history: &[TokenCounts], window: usize) -> Result<ExpertLoadMatrix<T>, PlanError> {
    let last = history.last().ok_or(PlanError::EmptyHistory)?;
    let take = window.max(1).min(history.len());
    let recent = &history[history.len() - take..];
    if recent
        .iter()
        .any(|m| m.devices() != last.devices() || m.experts() != last.experts())
    {
        return Err(PlanError::DimensionMismatch);
    }
    let mut mean = ExpertLoadMatrix::<T>::zeros(last.devices(), last.experts());
    let n = T::of_usize(take);
    for d in 0..last.devices() {
        for e in 0..last.experts() {
            let sum: u64 = recent.iter().map(|m| m.get(d, e)).sum();
            mean.set(d, e, T::of_u64(sum) / n);
        }
    }
    Ok(mean)
}

/// Replica counts for `experts` (already sorted by descending load) sharing
/// `tot_slots` slots in proportion to load.
///
/// Each expert first gets `max(1, floor(tot_slots * F_e / sum F))`, capped at
/// `caps[i]` and by the slots still unassigned; leftovers then go to the
/// most loaded experts still under their cap.
pub fn assign_slots_by_load<T: Scalar>(experts: &[usize], loads: &[T], tot_slots: usize, caps: &[usize]) -> Vec<usize> {
    let sum = experts.iter().fold(T::zero(), |acc, &e| acc + loads[e]);
    let mut remaining = tot_slots;
    let mut counts = Vec::with_capacity(experts.len());
    for (i, &e) in experts.iter().enumerate() {
        let share = if sum > T::zero() {
            (T::of_usize(tot_slots) * loads[e] / sum).floor().to_usize().unwrap_or(0)
        } else {
            tot_slots / experts.len()
        };
        let n = share.max(1).min(caps[i]).min(remaining);
        remaining -= n;
        counts.push(n);
    }
    for (i, n) in counts.iter_mut().enumerate() {
        if remaining == 0 {
            break;
        }
        let more = (caps[i] - *n).min(remaining);
        *n += more;
        remaining -= more;
    }
    counts
}

/// Runs the materialization heuristic on top of `base`, which need not be
/// a partition. Returns the extended placement.
fn materialize_onto<T: Scalar>(
    base: &ChunkPlacement,
    expert_loads: &[T],
    t: usize,
    m: usize,
    topology: &ClusterTopology<T>,
) -> ChunkPlacement {
    let experts = base.num_chunks();
    let devices = base.num_devices();
    let t = t.min(experts);
    let m = m.min(t);
    let mut target = base.clone();
    let top = top_experts(expert_loads, t);

    if t <= m {
        for &e in &top {
            for d in 0..devices {
                target.insert(e, d).expect("in range");
            }
        }
        return target;
    }

    let caps: Vec<usize> = top.iter().map(|&e| devices - base.replica_count(e)).collect();
    let counts = assign_slots_by_load(&top, expert_loads, devices * m, &caps);
    let mut avail = vec![m; devices];
    for (&e, &n) in top.iter().zip(&counts) {
        for _ in 0..n {
            let Some(d) = pick_replica_device(&target, e, &avail, topology) else {
                break;
            };
            target.insert(e, d).expect("in range");
            avail[d] -= 1;
        }
    }
    target
}

/// Device for one more replica of `expert`: nodes that do not hold the expert
/// yet come first, then nodes with more free slots; inside the node, the
/// device with the most free slots.
fn pick_replica_device<T: Scalar>(
    target: &ChunkPlacement,
    expert: usize,
    avail: &[usize],
    topology: &ClusterTopology<T>,
) -> Option<usize> {
    let eligible = |d: usize| avail[d] > 0 && !target.contains(expert, d);
    (0..topology.nodes)
        .filter_map(|node| {
            let devs = topology.devices_on(node);
            let free: usize = devs.clone().filter(|&d| eligible(d)).map(|d| avail[d]).sum();
            if free == 0 {
                return None;
            }
            let holds = devs.clone().any(|d| target.contains(expert, d));
            Some((holds, std::cmp::Reverse(free), node))
        })
        .min()
        .and_then(|(_, _, node)| {
            topology
                .devices_on(node)
                .filter(|&d| eligible(d))
                .min_by_key(|&d| (std::cmp::Reverse(avail[d]), d))
        })
}

/// Materialization plan for one layer.
///
/// `t` is the overlap degree and `m` the memory capacity, both in experts.
/// After clamping `t` to the expert count and `m` to `t`: if `t <= m` the
/// `t` most loaded experts go to every device; otherwise `|D| * m` replica
/// slots are shared among the top `t` experts in proportion to load.
pub fn sparse_materialization<T: Scalar>(
    shards: &ChunkPlacement,
    loads: &ExpertLoadMatrix<T>,
    t: usize,
    m: usize,
    topology: &ClusterTopology<T>,
) -> MaterializationPlan {
    debug_assert!(shards.is_partition());
    let target = materialize_onto(shards, &loads.expert_loads(), t, m, topology);
    MaterializationPlan::new(shards.clone(), target)
}

/// Constants needed to estimate MoE-layer latency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MoeCostModel<T> {
    pub expert_bytes: u64,
    pub token_bytes: u64,
    pub per_token_expert_time: T,
    /// Whether a second all-gather re-materializes parameters before backward.
    pub rematerialize: bool,
}

impl<T: Scalar> MoeCostModel<T> {
    /// Forward plus backward latency of one MoE layer: expert compute on the
    /// busiest device (backward twice forward) and dispatch and gather
    /// All-to-Alls in both passes.
    pub fn moe_latency(
        &self,
        placement: &ChunkPlacement,
        tokens: &TokenCounts,
        topology: &ClusterTopology<T>,
    ) -> Result<T, PlanError> {
        let plan = build_dispatch(tokens, placement, topology)?;
        let compute = T::of_u64(plan.bottleneck_tokens()) * self.per_token_expert_time;
        let traffic = dispatch_traffic(&plan, self.token_bytes);
        let a2a = collective_latency(&traffic, topology)? + collective_latency(&traffic.transpose(), topology)?;
        Ok(T::of_f64(3.0) * compute + T::of_f64(2.0) * a2a)
    }

    /// Critical-path cost of gathering `added` replicas from their owners
    /// in `source` and reducing their gradients back.
    pub fn extension_cost(
        &self,
        source: &ChunkPlacement,
        added: &ChunkPlacement,
        topology: &ClusterTopology<T>,
    ) -> Result<T, PlanError> {
        let widened = source.union(added)?;
        let (gather, _) = spag_traffic::<T>(source, &widened, self.expert_bytes)?;
        let (reduce, _) = sprs_traffic::<T>(&widened, source, self.expert_bytes)?;
        let spag = collective_latency(&gather, topology)?;
        let sprs = collective_latency(&reduce, topology)?;
        let remat = if self.rematerialize { spag } else { T::zero() };
        Ok(spag + sprs + remat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub enum CalibrationOutcome<T> {
    Unchanged,
    Extended {
        plan: MaterializationPlan,
        /// Exposed communication added by the extension.
        extra_latency: T,
        /// Estimated latency under the original and extended placements.
        before: T,
        after: T,
    },
}

/// Post-gate calibration of a materialization plan.
///
/// Re-runs the heuristic on top of `plan.target` with the observed loads,
/// the remaining memory capacity `remaining_m`, and an overlap degree derived
/// from the time budget `t_remaining`. The extension is kept only when its
/// estimated latency plus its own (fully exposed) communication is strictly
/// lower than the estimated latency of the original plan.
pub fn calibrate<T: Scalar>(
    plan: &MaterializationPlan,
    actual: &TokenCounts,
    remaining_m: usize,
    t_remaining: T,
    topology: &ClusterTopology<T>,
    cost: &MoeCostModel<T>,
) -> Result<CalibrationOutcome<T>, PlanError> {
    if remaining_m == 0 {
        return Ok(CalibrationOutcome::Unchanged);
    }
    let t = crate::cost::overlap_degree(t_remaining, topology, cost.expert_bytes);
    let loads: Vec<T> = actual.expert_totals().into_iter().map(T::of_u64).collect();
    let extended = materialize_onto(&plan.target, &loads, t, remaining_m, topology);
    if extended == plan.target {
        return Ok(CalibrationOutcome::Unchanged);
    }
    let before = cost.moe_latency(&plan.target, actual, topology)?;
    let after = cost.moe_latency(&extended, actual, topology)?;
    let added = extended.difference(&plan.target)?;
    let extra_latency = cost.extension_cost(&plan.source, &added, topology)?;
    if after + extra_latency < before {
        Ok(CalibrationOutcome::Extended {
            plan: MaterializationPlan::new(plan.source.clone(), extended),
            extra_latency,
            before,
            after,
        })
    } else {
        Ok(CalibrationOutcome::Unchanged)
    }
}

/// Re-shards every layer with exact per-device slot counts.
///
/// The top `t` experts of each layer are left to sparse materialization and
/// only fill leftover slots. The remaining experts are placed first, layer by
/// layer (layers with the heaviest such expert first), each onto the least
/// loaded node and then the least loaded device there, where load is the sum
/// of loads already placed and ties prefer fewer free slots, then the lower
/// index. Leftover slots are filled round-robin in layer-major order. The
/// contiguous split is returned instead when it fits the same slots with a
/// lower maximum per-node load.
pub fn heterogeneous_sharding<T: Scalar>(
    profile: &GlobalLoadProfile<T>,
    t: usize,
    topology: &ClusterTopology<T>,
) -> Result<ShardPlan, PlanError> {
    let devices = topology.num_devices();
    let slots = balanced_counts(profile.total_experts(), devices);
    let mut avail = slots.clone();
    let mut node_load = vec![T::zero(); topology.nodes];
    let mut dev_load = vec![T::zero(); devices];
    let mut per_layer: Vec<ChunkPlacement> = profile
        .per_layer
        .iter()
        .map(|loads| ChunkPlacement::empty(loads.len(), devices))
        .collect();

    let mut overlappable: Vec<Vec<usize>> = Vec::with_capacity(profile.per_layer.len());
    let mut rest: Vec<(usize, Vec<usize>)> = Vec::new();
    for (layer, loads) in profile.per_layer.iter().enumerate() {
        let mut top = top_experts(loads, t);
        let others: Vec<usize> = (0..loads.len()).filter(|e| !top.contains(e)).collect();
        top.sort_unstable();
        overlappable.push(top);
        if !others.is_empty() {
            rest.push((layer, sort_by_load_desc(loads, others)));
        }
    }
    // heaviest remaining expert first; `rest` lists are already sorted
    rest.sort_by(|(la, ea), (lb, eb)| {
        let ma = profile.per_layer[*la][ea[0]];
        let mb = profile.per_layer[*lb][eb[0]];
        cmp_scalar(mb, ma).then(la.cmp(lb))
    });

    for (layer, experts) in &rest {
        for &e in experts {
            let load = profile.per_layer[*layer][e];
            let node = (0..topology.nodes)
                .filter(|&n| topology.devices_on(n).any(|d| avail[d] > 0))
                .min_by(|&a, &b| {
                    let free = |n: usize| topology.devices_on(n).map(|d| avail[d]).sum::<usize>();
                    cmp_scalar(node_load[a], node_load[b])
                        .then(free(a).cmp(&free(b)))
                        .then(a.cmp(&b))
                })
                .ok_or(PlanError::InfeasibleSlots { layer: *layer, expert: e })?;
            let device = topology
                .devices_on(node)
                .filter(|&d| avail[d] > 0)
                .min_by(|&a, &b| {
                    cmp_scalar(dev_load[a], dev_load[b])
                        .then(avail[a].cmp(&avail[b]))
                        .then(a.cmp(&b))
                })
                .expect("node has a free slot");
            per_layer[*layer].insert(e, device)?;
            avail[device] -= 1;
            node_load[node] = node_load[node] + load;
            dev_load[device] = dev_load[device] + load;
        }
    }

    let mut cursor = 0;
    for (layer, experts) in overlappable.iter().enumerate() {
        for &e in experts {
            let device = (0..devices)
                .map(|i| (cursor + i) % devices)
                .find(|&d| avail[d] > 0)
                .ok_or(PlanError::InfeasibleSlots { layer, expert: e })?;
            per_layer[layer].insert(e, device)?;
            avail[device] -= 1;
            cursor = (device + 1) % devices;
        }
    }

    let greedy = ShardPlan { per_layer, slots };
    // Fall back to the contiguous split when it fits the same slots and
    // leaves the busiest node lighter.
    let even = ShardPlan {
        per_layer: profile
            .per_layer
            .iter()
            .map(|loads| make_even_partition(loads.len(), devices))
            .collect(),
        slots: greedy.slots.clone(),
    };
    let peak = |plan: &ShardPlan| {
        node_loads(plan, profile, t, topology)
            .into_iter()
            .fold(T::zero(), |a, b| if b > a { b } else { a })
    };
    if even.is_slot_exact() && peak(&even) < peak(&greedy) {
        return Ok(even);
    }
    Ok(greedy)
}

/// Sum of loads of the non-overlappable experts on each node.
pub fn node_loads<T: Scalar>(
    plan: &ShardPlan,
    profile: &GlobalLoadProfile<T>,
    t: usize,
    topology: &ClusterTopology<T>,
) -> Vec<T> {
    let mut loads = vec![T::zero(); topology.nodes];
    for (placement, layer_loads) in plan.per_layer.iter().zip(&profile.per_layer) {
        let top = top_experts(layer_loads, t);
        for (e, d) in placement.entries() {
            if !top.contains(&e) {
                let n = topology.node_of(d);
                loads[n] = loads[n] + layer_loads[e];
            }
        }
    }
    loads
}
