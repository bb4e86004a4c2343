//! Planning, cost modeling and simulation for fully sharded sparse data
//! parallel (FSSDP) Mixture-of-Experts training.
//!
//! Expert parameters and optimizer states are sharded across devices; each
//! iteration a sparse all-gather materializes extra replicas of hot experts
//! and a matching sparse reduce-scatter folds their gradients back. This
//! crate validates and costs those collectives, plans which experts to
//! materialize and how to shard them, routes tokens to replicas, and
//! simulates whole training runs against expert-parallel and rearrangement
//! baselines.
//!
//! Time, bandwidth and averaged-load computations are generic over
//! [`Scalar`] (`f32` or `f64`); byte and token counts are exact integers.
//! The aliases below fix the scalar to `f64`.

pub mod cost;
pub mod dispatch;
pub mod experiment;
pub mod load;
pub mod placement;
pub mod planner;
pub mod scalar;
pub mod sim;
pub mod topology;
pub mod trace;

pub use cost::{
    allreduce_dp_volume, allreduce_traffic, collective_latency, overlap_degree, spag_traffic, sprs_traffic,
    CostError, SparsityReport, TrafficMatrix,
};
pub use dispatch::{build_dispatch, dispatch_traffic, DispatchError, DispatchPlan};
pub use load::{ExpertLoadMatrix, TokenCounts};
pub use placement::{
    make_even_partition, validate_pair, validate_spag_pair, validate_sprs_pair, ChunkPlacement, Collective, DeviceId,
    PlacementError, ShardPlan,
};
pub use planner::{
    calibrate, estimate_loads, heterogeneous_sharding, sparse_materialization, CalibrationOutcome, GlobalLoadProfile,
    MaterializationPlan, MoeCostModel, PlanError,
};
pub use scalar::Scalar;
pub use sim::{
    memory_report, simulate_iteration, simulate_run, MemoryMode, ModelConfig, PolicyKind, RunReport, SimError,
};
pub use topology::{ClusterTopology, TopologyError};
pub use trace::{gen_synthetic_trace, load_trace, save_trace, Trace, TraceError, TraceMeta};

/// Exact rational volumes, for checking volume identities without rounding.
pub type ExactVolume = num_rational::Ratio<i64>;

pub type Topology = ClusterTopology<f64>;
pub type Topology32 = ClusterTopology<f32>;
pub type Model = ModelConfig<f64>;
pub type Model32 = ModelConfig<f32>;
pub type LoadEstimate = ExpertLoadMatrix<f64>;
pub type LoadProfile = GlobalLoadProfile<f64>;
pub type Sparsity = SparsityReport<f64>;
pub type Calibration = CalibrationOutcome<f64>;
pub type CostModel = MoeCostModel<f64>;
pub type Timeline = sim::IterationTimeline<f64>;
pub type Report = RunReport<f64>;
pub type Report32 = RunReport<f32>;
