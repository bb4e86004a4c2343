//! Per-policy state and the single-iteration simulation step.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::cost::{allreduce_traffic, collective_latency, spag_traffic, sprs_traffic, TrafficMatrix};
use crate::dispatch::{build_dispatch, dispatch_traffic};
use crate::load::{ExpertLoadMatrix, TokenCounts};
use crate::placement::{balanced_counts, make_even_partition, ChunkPlacement, ShardPlan};
use crate::planner::{
    calibrate, estimate_loads, heterogeneous_sharding, sort_by_load_desc, sparse_materialization, top_experts,
    CalibrationOutcome, GlobalLoadProfile, MaterializationPlan, MoeCostModel,
};
use crate::scalar::Scalar;
use crate::sim::memory::{memory_report, MemoryMode};
use crate::sim::timeline::{IterationTimeline, LayerCosts, LayerRecord, MemorySnapshot};
use crate::sim::{FssdpParams, ModelConfig, PolicyKind, SimError};
use crate::topology::ClusterTopology;

/// Window of the load estimator used by the rearranging baselines.
const BASELINE_WINDOW: usize = 5;

/// Event counts accumulated over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PolicyCounters {
    /// Materialization plans applied before the gate.
    pub materializations: usize,
    pub calibrations_accepted: usize,
    /// Layers dispatched over the shards because the plan looked worse.
    pub fallbacks: usize,
    pub reshards: usize,
    pub rearrangements: usize,
}

/// Shared inputs of one simulation.
pub struct SimContext<'a, T> {
    pub config: &'a ModelConfig<T>,
    pub topology: &'a ClusterTopology<T>,
    pub cost: MoeCostModel<T>,
}

impl<'a, T: Scalar> SimContext<'a, T> {
    pub fn new(config: &'a ModelConfig<T>, topology: &'a ClusterTopology<T>, rematerialize: bool) -> Self {
        Self {
            config,
            topology,
            cost: MoeCostModel {
                expert_bytes: config.expert_bytes,
                token_bytes: config.token_bytes,
                per_token_expert_time: config.per_token_expert_time,
                rematerialize,
            },
        }
    }

    fn latency(&self, traffic: &TrafficMatrix) -> Result<T, SimError> {
        Ok(collective_latency(traffic, self.topology)?)
    }

    /// Dispatch, compute and gather costs of one layer on `placement`.
    fn moe_costs(&self, placement: &ChunkPlacement, tokens: &TokenCounts) -> Result<LayerCosts<T>, SimError> {
        let plan = build_dispatch(tokens, placement, self.topology)?;
        let traffic = dispatch_traffic(&plan, self.config.token_bytes);
        Ok(LayerCosts {
            dispatch_a2a: self.latency(&traffic)?,
            gather_a2a: self.latency(&traffic.transpose())?,
            expert_fwd: T::of_u64(plan.bottleneck_tokens()) * self.config.per_token_expert_time,
            ..LayerCosts::default()
        })
    }

    fn moe_latency(&self, placement: &ChunkPlacement, tokens: &TokenCounts) -> Result<T, SimError> {
        Ok(self.cost.moe_latency(placement, tokens, self.topology)?)
    }

    /// Exposed time to move every `(layer, expert, from, to)` relocation with
    /// its optimizer state.
    fn relocation_latency(&self, moves: impl IntoIterator<Item = (usize, usize)>) -> Result<T, SimError> {
        let mut traffic = TrafficMatrix::zeros(self.topology.num_devices());
        for (from, to) in moves {
            traffic.add(from, to, self.config.relocation_bytes());
        }
        self.latency(&traffic)
    }

    /// Estimated per-iteration MoE latency of `placements` under `loads`.
    fn plan_latency(&self, placements: &[ChunkPlacement], loads: &[TokenCounts]) -> Result<T, SimError> {
        placements
            .iter()
            .zip(loads)
            .try_fold(T::zero(), |acc, (p, l)| Ok(acc + self.moe_latency(p, l)?))
    }
}

/// Sliding window of observed gate decisions for every layer.
#[derive(Debug, Clone)]
struct LoadHistory {
    window: usize,
    layers: Vec<VecDeque<TokenCounts>>,
}

impl LoadHistory {
    fn new(layers: usize, window: usize) -> Self {
        Self {
            window,
            layers: vec![VecDeque::with_capacity(window); layers],
        }
    }

    fn push(&mut self, step: &[TokenCounts]) {
        for (h, l) in self.layers.iter_mut().zip(step) {
            if h.len() == self.window {
                h.pop_front();
            }
            h.push_back(l.clone());
        }
    }

    fn is_empty(&self) -> bool {
        self.layers.first().is_none_or(VecDeque::is_empty)
    }

    fn estimate<T: Scalar>(&self, layer: usize) -> Result<ExpertLoadMatrix<T>, SimError> {
        let h: Vec<TokenCounts> = self.layers[layer].iter().cloned().collect();
        Ok(estimate_loads(&h, self.window)?)
    }

    fn estimate_all<T: Scalar>(&self) -> Result<Vec<ExpertLoadMatrix<T>>, SimError> {
        (0..self.layers.len()).map(|l| self.estimate(l)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FssdpState {
    params: FssdpParams,
    shards: ShardPlan,
    history: LoadHistory,
    overlap_degree: usize,
    memory_capacity: usize,
}

impl FssdpState {
    pub fn overlap_degree(&self) -> usize {
        self.overlap_degree
    }

    pub fn memory_capacity(&self) -> usize {
        self.memory_capacity
    }

    pub fn shards(&self) -> &ShardPlan {
        &self.shards
    }

    fn mode(&self) -> MemoryMode {
        if self.params.rematerialize {
            MemoryMode::Rematerialize
        } else {
            MemoryMode::Retain
        }
    }
}

#[derive(Debug, Clone)]
pub struct RearrangeState {
    interval: usize,
    placements: Vec<ChunkPlacement>,
    history: LoadHistory,
}

#[derive(Debug, Clone)]
pub struct FlexState {
    interval: usize,
    reserved_slots: usize,
    replicas: Vec<ChunkPlacement>,
    history: LoadHistory,
}

/// Mutable state carried across iterations by a policy.
#[derive(Debug, Clone)]
pub enum PolicyState {
    Ep(ShardPlan),
    Fssdp(FssdpState),
    ReplicateAll { shards: ShardPlan, top_k: usize },
    SwapBalance(RearrangeState),
    FlexRearrange(FlexState),
}

impl PolicyState {
    pub fn new<T: Scalar>(
        kind: &PolicyKind,
        config: &ModelConfig<T>,
        topology: &ClusterTopology<T>,
    ) -> Result<Self, SimError> {
        kind.validate()?;
        let devices = topology.num_devices();
        let layers = config.layers;
        let experts = config.experts_per_layer;
        let even = ShardPlan::even(layers, experts, devices);
        Ok(match kind {
            PolicyKind::Ep => PolicyState::Ep(even),
            PolicyKind::Fssdp(params) => {
                let overlap_degree = params.overlap_degree.unwrap_or_else(|| {
                    crate::cost::overlap_degree(config.attn_fwd_time, topology, config.expert_bytes)
                });
                let memory_capacity = params
                    .memory_capacity
                    .unwrap_or_else(|| derived_capacity(config, &even, params.rematerialize))
                    .min(experts);
                PolicyState::Fssdp(FssdpState {
                    params: params.clone(),
                    shards: even,
                    history: LoadHistory::new(layers, params.window),
                    overlap_degree,
                    memory_capacity,
                })
            }
            PolicyKind::ReplicateAll { top_k } => PolicyState::ReplicateAll {
                shards: even,
                top_k: *top_k,
            },
            PolicyKind::SwapBalance { interval } => PolicyState::SwapBalance(RearrangeState {
                interval: *interval,
                placements: even.per_layer,
                history: LoadHistory::new(layers, BASELINE_WINDOW),
            }),
            PolicyKind::FlexRearrange {
                interval,
                reserved_slots,
            } => PolicyState::FlexRearrange(FlexState {
                interval: *interval,
                reserved_slots: *reserved_slots,
                replicas: even.per_layer,
                history: LoadHistory::new(layers, BASELINE_WINDOW),
            }),
        })
    }

    fn rematerialize(&self) -> bool {
        matches!(self, PolicyState::Fssdp(s) if s.params.rematerialize)
    }
}

/// Materialization capacity in experts per layer implied by device memory:
/// whatever the shards (parameters, gradients, optimizer states) leave free,
/// divided among layers unless replicas are released after each layer.
pub fn derived_capacity<T: Scalar>(config: &ModelConfig<T>, shards: &ShardPlan, rematerialize: bool) -> usize {
    let Some(memory) = config.device_memory_bytes else {
        return config.experts_per_layer;
    };
    let max_slots = shards.slots.iter().copied().max().unwrap_or(0) as u64;
    let resident = max_slots * config.expert_bytes * (2 + config.optimizer_multiplier);
    let total = (memory.saturating_sub(resident) / config.expert_bytes) as usize;
    if rematerialize {
        total
    } else {
        total / config.layers
    }
}

fn snapshot(breakdown: &crate::sim::memory::MemoryBreakdown) -> MemorySnapshot {
    MemorySnapshot {
        optimizer_total: breakdown.optimizer_total(),
        peak_device_bytes: breakdown.peak_device_bytes(),
        peak_materialized_bytes: breakdown.peak_materialized_bytes(),
    }
}

/// Simulates one training iteration under `state`, updating it in place.
pub fn simulate_iteration<T: Scalar>(
    config: &ModelConfig<T>,
    topology: &ClusterTopology<T>,
    state: &mut PolicyState,
    iteration: usize,
    step_loads: &[TokenCounts],
    counters: &mut PolicyCounters,
) -> Result<IterationTimeline<T>, SimError> {
    if step_loads.len() != config.layers {
        return Err(SimError::TraceMismatch(format!(
            "iteration {iteration} has {} layers, model has {}",
            step_loads.len(),
            config.layers
        )));
    }
    let ctx = SimContext::new(config, topology, state.rematerialize());
    match state {
        PolicyState::Ep(shards) => ep_iteration(&ctx, shards, iteration, step_loads),
        PolicyState::Fssdp(s) => fssdp_iteration(&ctx, s, iteration, step_loads, counters),
        PolicyState::ReplicateAll { shards, top_k } => replicate_iteration(&ctx, shards, *top_k, iteration, step_loads),
        PolicyState::SwapBalance(s) => swap_iteration(&ctx, s, iteration, step_loads, counters),
        PolicyState::FlexRearrange(s) => flex_iteration(&ctx, s, iteration, step_loads, counters),
    }
}

fn ep_iteration<T: Scalar>(
    ctx: &SimContext<'_, T>,
    shards: &ShardPlan,
    iteration: usize,
    step: &[TokenCounts],
) -> Result<IterationTimeline<T>, SimError> {
    let layers = shards
        .per_layer
        .iter()
        .zip(step)
        .map(|(p, tokens)| Ok(LayerRecord::from_costs(ctx.config.attn_fwd_time, &ctx.moe_costs(p, tokens)?)))
        .collect::<Result<Vec<_>, SimError>>()?;
    let memory = memory_report(shards, &[], ctx.config, MemoryMode::Retain);
    Ok(IterationTimeline::new(iteration, layers, T::zero(), snapshot(&memory)))
}

/// Forward all-gather, backward reduce-scatter and re-materialization times
/// of a plan.
fn plan_collectives<T: Scalar>(ctx: &SimContext<'_, T>, plan: &MaterializationPlan) -> Result<(T, T, T), SimError> {
    if plan.is_identity() {
        return Ok((T::zero(), T::zero(), T::zero()));
    }
    let (gather, _) = spag_traffic::<T>(&plan.source, &plan.target, ctx.config.expert_bytes)?;
    let (reduce, _) = sprs_traffic::<T>(&plan.target, &plan.source, ctx.config.expert_bytes)?;
    let spag = ctx.latency(&gather)?;
    let sprs = ctx.latency(&reduce)?;
    let remat = if ctx.cost.rematerialize { spag } else { T::zero() };
    Ok((spag, sprs, remat))
}

impl FssdpState {
    /// Pre-gate plan from estimated loads. Tries overlap degrees from `t`
    /// down and keeps the first plan whose collectives hide completely under
    /// attention and whose estimated latency beats the bare shards.
    fn predicted_plan<T: Scalar>(
        &self,
        ctx: &SimContext<'_, T>,
        layer: usize,
    ) -> Result<MaterializationPlan, SimError> {
        let shards = &self.shards.per_layer[layer];
        let identity = MaterializationPlan::identity(shards.clone());
        if self.history.is_empty() || self.overlap_degree == 0 || self.memory_capacity == 0 {
            return Ok(identity);
        }
        let estimate: ExpertLoadMatrix<T> = self.history.estimate(layer)?;
        let counts = estimate.round_to_counts();
        let baseline = ctx.moe_latency(shards, &counts)?;
        let attn_fwd = ctx.config.attn_fwd_time;
        let attn_bwd = T::of_f64(2.0) * attn_fwd;
        let mut last_target = None;
        for t in (1..=self.overlap_degree.min(shards.num_chunks())).rev() {
            let plan = sparse_materialization(shards, &estimate, t, self.memory_capacity, ctx.topology);
            if plan.is_identity() || last_target.as_ref() == Some(&plan.target) {
                continue;
            }
            last_target = Some(plan.target.clone());
            let (spag, sprs, remat) = plan_collectives(ctx, &plan)?;
            if spag > attn_fwd || sprs + remat > attn_bwd {
                continue;
            }
            if ctx.moe_latency(&plan.target, &counts)? < baseline {
                return Ok(plan);
            }
        }
        Ok(identity)
    }
}

fn fssdp_iteration<T: Scalar>(
    ctx: &SimContext<'_, T>,
    state: &mut FssdpState,
    iteration: usize,
    step: &[TokenCounts],
    counters: &mut PolicyCounters,
) -> Result<IterationTimeline<T>, SimError> {
    let mut records = Vec::with_capacity(step.len());
    let mut finals = Vec::with_capacity(step.len());
    for (layer, actual) in step.iter().enumerate() {
        let plan = state.predicted_plan(ctx, layer)?;
        if !plan.is_identity() {
            counters.materializations += 1;
        }
        let (spag, sprs, remat_spag) = plan_collectives(ctx, &plan)?;
        let predicted = plan.clone();

        let mut calib = T::zero();
        let mut best = ctx.moe_latency(&plan.target, actual)?;
        let mut current = plan;
        if state.params.calibration && state.overlap_degree > 0 {
            let remaining_m = state.memory_capacity.saturating_sub(current.max_added());
            if let CalibrationOutcome::Extended {
                plan: extended,
                extra_latency,
                after,
                ..
            } = calibrate(&current, actual, remaining_m, best, ctx.topology, &ctx.cost)?
            {
                counters.calibrations_accepted += 1;
                calib = extra_latency;
                best = after + extra_latency;
                current = extended;
            }
        }

        // Dispatching on the bare shards skips any calibration extension.
        let bare = ctx.moe_latency(&current.source, actual)?;
        let mut dispatch_on = current.target.clone();
        if !current.is_identity() && bare < best {
            counters.fallbacks += 1;
            if calib > T::zero() {
                counters.calibrations_accepted -= 1;
                calib = T::zero();
                current = predicted;
            }
            dispatch_on = current.source.clone();
        }
        let costs = LayerCosts {
            spag,
            sprs,
            remat_spag,
            calib,
            ..ctx.moe_costs(&dispatch_on, actual)?
        };
        records.push(LayerRecord::from_costs(ctx.config.attn_fwd_time, &costs));
        finals.push(current);
    }
    let memory = memory_report(&state.shards, &finals, ctx.config, state.mode());
    state.history.push(step);

    // with no overlap the policy is plain expert parallelism
    let mut rearrange = T::zero();
    if let (Some(interval), true) = (state.params.reshard_interval, state.overlap_degree > 0) {
        if (iteration + 1) % interval == 0 {
            rearrange = try_reshard(ctx, state, interval, counters)?;
        }
    }
    Ok(IterationTimeline::new(iteration, records, rearrange, snapshot(&memory)))
}

/// Heterogeneous re-sharding on the estimated loads. Applied only when the
/// shards change and the estimated saving over one interval exceeds the
/// exposed relocation time. Returns the time charged.
fn try_reshard<T: Scalar>(
    ctx: &SimContext<'_, T>,
    state: &mut FssdpState,
    interval: usize,
    counters: &mut PolicyCounters,
) -> Result<T, SimError> {
    let estimates: Vec<ExpertLoadMatrix<T>> = state.history.estimate_all()?;
    let profile = GlobalLoadProfile::from_matrices(&estimates);
    let next = heterogeneous_sharding(&profile, state.overlap_degree, ctx.topology)?;
    if next.per_layer == state.shards.per_layer {
        return Ok(T::zero());
    }
    let counts: Vec<TokenCounts> = estimates.iter().map(ExpertLoadMatrix::round_to_counts).collect();
    let before = ctx.plan_latency(&state.shards.per_layer, &counts)?;
    let after = ctx.plan_latency(&next.per_layer, &counts)?;
    let moves = state.shards.relocations(&next);
    let cost = ctx.relocation_latency(moves.iter().map(|&(_, _, from, to)| (from, to)))?;
    if (before - after) * T::of_usize(interval) > cost {
        state.shards = next;
        counters.reshards += 1;
        Ok(cost)
    } else {
        Ok(T::zero())
    }
}

/// Experts whose load exceeds the layer mean, heaviest first, at most `k`.
fn overloaded_experts(loads: &[u64], k: usize) -> Vec<usize> {
    let total: u64 = loads.iter().sum();
    let n = loads.len() as u64;
    let as_f64: Vec<f64> = loads.iter().map(|&l| l as f64).collect();
    top_experts(&as_f64, k)
        .into_iter()
        .filter(|&e| loads[e] * n > total)
        .collect()
}

fn replicate_iteration<T: Scalar>(
    ctx: &SimContext<'_, T>,
    shards: &ShardPlan,
    top_k: usize,
    iteration: usize,
    step: &[TokenCounts],
) -> Result<IterationTimeline<T>, SimError> {
    let devices = ctx.topology.num_devices();
    let mut records = Vec::with_capacity(step.len());
    let mut plans = Vec::with_capacity(step.len());
    for (source, actual) in shards.per_layer.iter().zip(step) {
        let mut target = source.clone();
        for e in overloaded_experts(&actual.expert_totals(), top_k) {
            for d in 0..devices {
                target.insert(e, d)?;
            }
        }
        let plan = MaterializationPlan {
            added_per_device: target.difference(source)?.per_device_counts(),
            source: source.clone(),
            target,
        };
        let (replication, sync) = if plan.is_identity() {
            (T::zero(), T::zero())
        } else {
            let (gather, _) = spag_traffic::<T>(&plan.source, &plan.target, ctx.config.expert_bytes)?;
            (
                ctx.latency(&gather)?,
                ctx.latency(&allreduce_traffic(&plan.target, ctx.config.expert_bytes))?,
            )
        };
        let costs = LayerCosts {
            replication,
            sync,
            ..ctx.moe_costs(&plan.target, actual)?
        };
        records.push(LayerRecord::from_costs(ctx.config.attn_fwd_time, &costs));
        plans.push(plan);
    }
    let memory = memory_report(shards, &plans, ctx.config, MemoryMode::Retain);
    Ok(IterationTimeline::new(iteration, records, T::zero(), snapshot(&memory)))
}

/// Pairs heavy with light experts: in even rounds each device takes the
/// heaviest remaining expert, in odd rounds the lightest.
pub fn swap_pairing<T: Scalar>(loads: &[T], num_devices: usize) -> ChunkPlacement {
    let mut order: VecDeque<usize> = sort_by_load_desc(loads, 0..loads.len()).into();
    let capacity = balanced_counts(loads.len(), num_devices);
    let mut placement = ChunkPlacement::empty(loads.len(), num_devices);
    let rounds = capacity.iter().copied().max().unwrap_or(0);
    for round in 0..rounds {
        for (device, &cap) in capacity.iter().enumerate() {
            if round >= cap {
                continue;
            }
            let expert = if round % 2 == 0 {
                order.pop_front()
            } else {
                order.pop_back()
            };
            if let Some(e) = expert {
                placement.insert(e, device).expect("in range");
            }
        }
    }
    placement
}

fn swap_iteration<T: Scalar>(
    ctx: &SimContext<'_, T>,
    state: &mut RearrangeState,
    iteration: usize,
    step: &[TokenCounts],
    counters: &mut PolicyCounters,
) -> Result<IterationTimeline<T>, SimError> {
    let records = state
        .placements
        .iter()
        .zip(step)
        .map(|(p, tokens)| Ok(LayerRecord::from_costs(ctx.config.attn_fwd_time, &ctx.moe_costs(p, tokens)?)))
        .collect::<Result<Vec<_>, SimError>>()?;
    let shards = ShardPlan {
        slots: ShardPlan::device_totals(&state.placements, ctx.topology.num_devices()),
        per_layer: state.placements.clone(),
    };
    let memory = memory_report(&shards, &[], ctx.config, MemoryMode::Retain);
    state.history.push(step);

    let mut rearrange = T::zero();
    if state.interval > 0 && (iteration + 1) % state.interval == 0 {
        let mut moves = Vec::new();
        for layer in 0..state.placements.len() {
            let estimate: ExpertLoadMatrix<T> = state.history.estimate(layer)?;
            let counts = estimate.round_to_counts();
            let candidate = swap_pairing(&estimate.expert_loads(), ctx.topology.num_devices());
            let current = &state.placements[layer];
            if candidate != *current && ctx.moe_latency(&candidate, &counts)? < ctx.moe_latency(current, &counts)? {
                for e in 0..candidate.num_chunks() {
                    let (from, to) = (current.owner(e), candidate.owner(e));
                    if let (Some(from), Some(to)) = (from, to) {
                        if from != to {
                            moves.push((from, to));
                        }
                    }
                }
                state.placements[layer] = candidate;
            }
        }
        if !moves.is_empty() {
            counters.rearrangements += 1;
            rearrange = ctx.relocation_latency(moves)?;
        }
    }
    Ok(IterationTimeline::new(iteration, records, rearrange, snapshot(&memory)))
}

/// Rebuilds the replica set of one layer: starting from the even partition,
/// repeatedly gives the expert with the highest load per replica one more
/// replica on the least loaded device with a free reserved slot, while that
/// expert's per-replica load is above the mean expert load.
pub fn flex_replicas<T: Scalar>(loads: &[T], num_devices: usize, reserved_slots: usize) -> ChunkPlacement {
    let experts = loads.len();
    let mut placement = make_even_partition(experts, num_devices);
    if reserved_slots == 0 || experts == 0 {
        return placement;
    }
    let mean = loads.iter().fold(T::zero(), |a, &b| a + b) / T::of_usize(experts);
    let mut free = vec![reserved_slots; num_devices];
    let mut replicas = vec![1usize; experts];
    let mut exhausted = vec![false; experts];
    let share = |e: usize, replicas: &[usize]| loads[e] / T::of_usize(replicas[e]);
    loop {
        let Some(e) = (0..experts)
            .filter(|&e| !exhausted[e])
            .max_by(|&a, &b| {
                share(a, &replicas)
                    .partial_cmp(&share(b, &replicas))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.cmp(&a))
            })
        else {
            break;
        };
        if share(e, &replicas) <= mean {
            break;
        }
        let device_load = |d: usize| {
            placement
                .chunks_on(d)
                .into_iter()
                .fold(T::zero(), |acc, c| acc + share(c, &replicas))
        };
        let target = (0..num_devices)
            .filter(|&d| free[d] > 0 && !placement.contains(e, d))
            .min_by(|&a, &b| {
                device_load(a)
                    .partial_cmp(&device_load(b))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
        match target {
            Some(d) => {
                placement.insert(e, d).expect("in range");
                free[d] -= 1;
                replicas[e] += 1;
            }
            None => exhausted[e] = true,
        }
    }
    placement
}

fn flex_iteration<T: Scalar>(
    ctx: &SimContext<'_, T>,
    state: &mut FlexState,
    iteration: usize,
    step: &[TokenCounts],
    counters: &mut PolicyCounters,
) -> Result<IterationTimeline<T>, SimError> {
    let devices = ctx.topology.num_devices();
    let even = make_even_partition(ctx.config.experts_per_layer, devices);
    let mut records = Vec::with_capacity(step.len());
    let mut plans = Vec::with_capacity(step.len());
    for (replicas, actual) in state.replicas.iter().zip(step) {
        let sync = ctx.latency(&allreduce_traffic(replicas, ctx.config.expert_bytes))?;
        let costs = LayerCosts {
            sync,
            ..ctx.moe_costs(replicas, actual)?
        };
        records.push(LayerRecord::from_costs(ctx.config.attn_fwd_time, &costs));
        plans.push(MaterializationPlan {
            added_per_device: replicas.difference(&even)?.per_device_counts(),
            source: even.clone(),
            target: replicas.clone(),
        });
    }
    let shards = ShardPlan::even(ctx.config.layers, ctx.config.experts_per_layer, devices);
    let memory = memory_report(&shards, &plans, ctx.config, MemoryMode::Retain);
    state.history.push(step);

    let mut rearrange = T::zero();
    if state.interval > 0 && state.reserved_slots > 0 && (iteration + 1) % state.interval == 0 {
        let mut moves = Vec::new();
        for layer in 0..state.replicas.len() {
            let estimate: ExpertLoadMatrix<T> = state.history.estimate(layer)?;
            let counts = estimate.round_to_counts();
            let candidate = flex_replicas(&estimate.expert_loads(), devices, state.reserved_slots);
            let current = &state.replicas[layer];
            if candidate != *current && ctx.moe_latency(&candidate, &counts)? < ctx.moe_latency(current, &counts)? {
                for (e, d) in candidate.difference(current)?.entries() {
                    moves.push((even.owner(e).expect("partition"), d));
                }
                state.replicas[layer] = candidate;
            }
        }
        if !moves.is_empty() {
            counters.rearrangements += 1;
            rearrange = ctx.relocation_latency(moves)?;
        }
    }
    Ok(IterationTimeline::new(iteration, records, rearrange, snapshot(&memory)))
}
