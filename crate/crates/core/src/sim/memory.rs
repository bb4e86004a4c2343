use serde::{Deserialize, Serialize};

use crate::placement::ShardPlan;
use crate::planner::MaterializationPlan;
use crate::scalar::Scalar;
use crate::sim::ModelConfig;

/// Whether materialized replicas live through the whole iteration or are
/// released after each layer's forward and gathered again for backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    Retain,
    Rematerialize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DeviceMemory {
    pub param_bytes: u64,
    pub grad_bytes: u64,
    pub optimizer_bytes: u64,
    pub materialized_bytes: u64,
}

impl DeviceMemory {
    pub fn total(&self) -> u64 {
        self.param_bytes + self.grad_bytes + self.optimizer_bytes + self.materialized_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub devices: Vec<DeviceMemory>,
}

impl MemoryBreakdown {
    pub fn optimizer_total(&self) -> u64 {
        self.devices.iter().map(|d| d.optimizer_bytes).sum()
    }

    pub fn peak_device_bytes(&self) -> u64 {
        self.devices.iter().map(DeviceMemory::total).max().unwrap_or(0)
    }

    pub fn peak_materialized_bytes(&self) -> u64 {
        self.devices.iter().map(|d| d.materialized_bytes).max().unwrap_or(0)
    }
}

/// Memory held by each device for expert parameters, gradients, optimizer
/// states and materialized replicas. Activations are not modeled.
pub fn memory_report<T: Scalar>(
    plan: &ShardPlan,
    materializations: &[MaterializationPlan],
    config: &ModelConfig<T>,
    mode: MemoryMode,
) -> MemoryBreakdown {
    let devices = plan.per_layer.first().map_or(0, |p| p.num_devices());
    let owned = ShardPlan::device_totals(&plan.per_layer, devices);
    let devices = (0..devices)
        .map(|d| {
            let param_bytes = owned[d] as u64 * config.expert_bytes;
            let per_layer = materializations
                .iter()
                .map(|m| m.added_per_device[d] as u64 * config.expert_bytes);
            let materialized_bytes = match mode {
                MemoryMode::Retain => per_layer.sum(),
                MemoryMode::Rematerialize => per_layer.max().unwrap_or(0),
            };
            DeviceMemory {
                param_bytes,
                grad_bytes: param_bytes + materialized_bytes,
                optimizer_bytes: param_bytes * config.optimizer_multiplier,
                materialized_bytes,
            }
        })
        .collect();
    MemoryBreakdown { devices }
}
