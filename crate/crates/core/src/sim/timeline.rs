use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Raw durations of everything that happens in one MoE block.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LayerCosts<T> {
    /// Forward materialization all-gather.
    pub spag: T,
    /// Backward gradient reduce-scatter.
    pub sprs: T,
    /// Second all-gather before backward; zero unless re-materializing.
    pub remat_spag: T,
    /// Post-gate calibration communication.
    pub calib: T,
    /// Exposed expert replication (replicate-all baseline).
    pub replication: T,
    pub dispatch_a2a: T,
    pub gather_a2a: T,
    pub expert_fwd: T,
    /// Exposed gradient all-reduce of replicated experts.
    pub sync: T,
}

/// One MoE block of one iteration after applying the overlap rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LayerRecord<T> {
    pub attn_fwd: T,
    pub attn_bwd: T,
    pub spag_time: T,
    pub sprs_time: T,
    pub remat_spag_time: T,
    pub exposed_spag: T,
    /// Backward sparse collectives left uncovered by attention backward.
    pub exposed_sprs: T,
    /// Dispatch and gather All-to-Alls of forward and backward.
    pub a2a_time: T,
    pub expert_fwd: T,
    pub expert_bwd: T,
    pub calib_time: T,
    pub replication_time: T,
    pub sync_time: T,
    /// Critical-path time of this block.
    pub latency: T,
}

impl<T: Scalar> LayerRecord<T> {
    /// Applies the overlap contract: the forward all-gather hides under
    /// attention forward; the reduce-scatter and re-materialization hide
    /// under attention backward, which takes twice as long. Everything else
    /// is on the critical path.
    pub fn from_costs(attn_fwd: T, c: &LayerCosts<T>) -> Self {
        let two = T::of_f64(2.0);
        let attn_bwd = two * attn_fwd;
        let exposed_spag = (c.spag - attn_fwd).non_negative();
        let exposed_sprs = (c.sprs + c.remat_spag - attn_bwd).non_negative();
        let a2a_time = two * (c.dispatch_a2a + c.gather_a2a);
        let expert_bwd = two * c.expert_fwd;
        let latency = attn_fwd
            + exposed_spag
            + c.calib
            + c.replication
            + a2a_time
            + c.expert_fwd
            + attn_bwd
            + exposed_sprs
            + expert_bwd
            + c.sync;
        Self {
            attn_fwd,
            attn_bwd,
            spag_time: c.spag,
            sprs_time: c.sprs,
            remat_spag_time: c.remat_spag,
            exposed_spag,
            exposed_sprs,
            a2a_time,
            expert_fwd: c.expert_fwd,
            expert_bwd,
            calib_time: c.calib,
            replication_time: c.replication,
            sync_time: c.sync,
            latency,
        }
    }
}

/// Snapshot of device memory for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub optimizer_total: u64,
    pub peak_device_bytes: u64,
    pub peak_materialized_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct IterationTimeline<T> {
    pub iteration: usize,
    pub layers: Vec<LayerRecord<T>>,
    /// Exposed re-sharding or rearrangement at iteration end.
    pub rearrange_time: T,
    pub total_latency: T,
    pub memory: MemorySnapshot,
}

impl<T: Scalar> IterationTimeline<T> {
    pub fn new(iteration: usize, layers: Vec<LayerRecord<T>>, rearrange_time: T, memory: MemorySnapshot) -> Self {
        let total_latency = layers.iter().fold(T::zero(), |acc, l| acc + l.latency) + rearrange_time;
        Self {
            iteration,
            layers,
            rearrange_time,
            total_latency,
            memory,
        }
    }
}
