//! Deterministic per-iteration simulation of a Transformer-MoE model under
//! a placement policy.

mod config;
mod memory;
mod policy;
mod run;
mod timeline;

use thiserror::Error;

pub use config::{FssdpParams, ModelConfig, PolicyKind};
pub use memory::{memory_report, DeviceMemory, MemoryBreakdown, MemoryMode};
pub use policy::{derived_capacity, flex_replicas, simulate_iteration, swap_pairing, FssdpState, PolicyCounters, PolicyState, SimContext};
pub use run::{simulate_run, Breakdown, RunReport, REPORT_SCHEMA_VERSION};
pub use timeline::{IterationTimeline, LayerCosts, LayerRecord, MemorySnapshot};

use crate::cost::CostError;
use crate::dispatch::DispatchError;
use crate::placement::PlacementError;
use crate::planner::PlanError;
use crate::topology::TopologyError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("trace does not match the model: {0}")]
    TraceMismatch(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
}
