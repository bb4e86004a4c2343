use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::sim::policy::{simulate_iteration, PolicyCounters, PolicyState};
use crate::sim::timeline::IterationTimeline;
use crate::sim::{ModelConfig, PolicyKind, SimError};
use crate::topology::ClusterTopology;
use crate::trace::Trace;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Critical-path time by category, summed over the run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Breakdown<T> {
    pub attention: T,
    pub exposed_spag: T,
    pub exposed_sprs: T,
    pub a2a: T,
    pub expert: T,
    pub calibration: T,
    pub replication: T,
    pub sync: T,
    pub rearrange: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RunReport<T> {
    pub schema_version: u32,
    pub policy: String,
    /// Baselines are simplified models of the systems they stand for.
    pub approximation: bool,
    pub total_latency: T,
    pub mean_iteration_latency: T,
    pub per_layer_mean_latency: Vec<T>,
    pub breakdown: Breakdown<T>,
    pub peak_device_bytes: u64,
    pub peak_materialized_bytes: u64,
    pub optimizer_total: u64,
    pub counters: PolicyCounters,
    pub iterations: Vec<IterationTimeline<T>>,
}

const CSV_HEADER: [&str; 20] = [
    "policy",
    "iteration",
    "layer",
    "attn_fwd",
    "attn_bwd",
    "spag_time",
    "sprs_time",
    "remat_spag_time",
    "exposed_spag",
    "exposed_sprs",
    "a2a_time",
    "expert_fwd",
    "expert_bwd",
    "calib_time",
    "replication_time",
    "sync_time",
    "layer_latency",
    "rearrange_time",
    "iteration_latency",
    "optimizer_total",
];

impl<T: Scalar> RunReport<T> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per iteration per layer.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for it in &self.iterations {
            for (layer, r) in it.layers.iter().enumerate() {
                let times = [
                    r.attn_fwd,
                    r.attn_bwd,
                    r.spag_time,
                    r.sprs_time,
                    r.remat_spag_time,
                    r.exposed_spag,
                    r.exposed_sprs,
                    r.a2a_time,
                    r.expert_fwd,
                    r.expert_bwd,
                    r.calib_time,
                    r.replication_time,
                    r.sync_time,
                    r.latency,
                    it.rearrange_time,
                    it.total_latency,
                ];
                let mut row = vec![self.policy.clone(), it.iteration.to_string(), layer.to_string()];
                row.extend(times.iter().map(|v| v.to_string()));
                row.push(it.memory.optimizer_total.to_string());
                w.write_record(&row).expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    fn summarize(policy: &PolicyKind, iterations: Vec<IterationTimeline<T>>, counters: PolicyCounters) -> Self {
        let layers = iterations.first().map_or(0, |it| it.layers.len());
        let mut per_layer = vec![T::zero(); layers];
        let mut b = Breakdown::<T>::default();
        let mut total = T::zero();
        for it in &iterations {
            total = total + it.total_latency;
            b.rearrange = b.rearrange + it.rearrange_time;
            for (acc, r) in per_layer.iter_mut().zip(&it.layers) {
                *acc = *acc + r.latency;
                b.attention = b.attention + r.attn_fwd + r.attn_bwd;
                b.exposed_spag = b.exposed_spag + r.exposed_spag;
                b.exposed_sprs = b.exposed_sprs + r.exposed_sprs;
                b.a2a = b.a2a + r.a2a_time;
                b.expert = b.expert + r.expert_fwd + r.expert_bwd;
                b.calibration = b.calibration + r.calib_time;
                b.replication = b.replication + r.replication_time;
                b.sync = b.sync + r.sync_time;
            }
        }
        let n = T::of_usize(iterations.len().max(1));
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            policy: policy.label(),
            approximation: policy.is_approximation(),
            total_latency: total,
            mean_iteration_latency: total / n,
            per_layer_mean_latency: per_layer.into_iter().map(|v| v / n).collect(),
            breakdown: b,
            peak_device_bytes: iterations.iter().map(|it| it.memory.peak_device_bytes).max().unwrap_or(0),
            peak_materialized_bytes: iterations
                .iter()
                .map(|it| it.memory.peak_materialized_bytes)
                .max()
                .unwrap_or(0),
            optimizer_total: iterations.first().map_or(0, |it| it.memory.optimizer_total),
            counters,
            iterations,
        }
    }
}

/// Runs `policy` over every step of `trace`.
pub fn simulate_run<T: Scalar>(
    config: &ModelConfig<T>,
    topology: &ClusterTopology<T>,
    policy: &PolicyKind,
    trace: &Trace,
) -> Result<RunReport<T>, SimError> {
    config.validate()?;
    topology.validate()?;
    let meta = &trace.meta;
    if meta.layers != config.layers
        || meta.experts != config.experts_per_layer
        || meta.devices != topology.num_devices()
    {
        return Err(SimError::TraceMismatch(format!(
            "trace is {} layers x {} experts x {} devices, model is {} x {} x {}",
            meta.layers,
            meta.experts,
            meta.devices,
            config.layers,
            config.experts_per_layer,
            topology.num_devices()
        )));
    }
    let mut state = PolicyState::new(policy, config, topology)?;
    let mut counters = PolicyCounters::default();
    let iterations = trace
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| simulate_iteration(config, topology, &mut state, i, step, &mut counters))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunReport::summarize(policy, iterations, counters))
}
