use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::sim::SimError;

fn default_optimizer_multiplier() -> u64 {
    6
}

/// Transformer-MoE model description used by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ModelConfig<T> {
    pub layers: usize,
    pub experts_per_layer: usize,
    /// Parameter bytes of one expert.
    pub expert_bytes: u64,
    /// Bytes of one token's hidden state.
    pub token_bytes: u64,
    /// Attention forward time per layer, seconds.
    pub attn_fwd_time: T,
    /// Expert forward time per token, seconds.
    pub per_token_expert_time: T,
    /// Optimizer-state bytes per parameter byte.
    #[serde(default = "default_optimizer_multiplier")]
    pub optimizer_multiplier: u64,
    /// Device memory; when set, the materialization capacity is derived
    /// from what the shards leave free.
    #[serde(default)]
    pub device_memory_bytes: Option<u64>,
}

impl<T: Scalar> ModelConfig<T> {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |what: &str| Err(SimError::Config(format!("{what} must be positive")));
        if self.layers == 0 {
            return bad("layers");
        }
        if self.experts_per_layer == 0 {
            return bad("experts_per_layer");
        }
        if self.expert_bytes == 0 {
            return bad("expert_bytes");
        }
        if self.token_bytes == 0 {
            return bad("token_bytes");
        }
        if !(self.attn_fwd_time > T::zero() && self.attn_fwd_time.is_finite()) {
            return bad("attn_fwd_time");
        }
        if !(self.per_token_expert_time > T::zero() && self.per_token_expert_time.is_finite()) {
            return bad("per_token_expert_time");
        }
        Ok(())
    }

    /// Bytes moved when one expert changes owner: parameters plus optimizer states.
    pub fn relocation_bytes(&self) -> u64 {
        self.expert_bytes * (1 + self.optimizer_multiplier)
    }

    /// One sharded copy of every expert's optimizer state.
    pub fn global_optimizer_bytes(&self) -> u64 {
        (self.layers * self.experts_per_layer) as u64 * self.expert_bytes * self.optimizer_multiplier
    }
}

fn default_window() -> usize {
    5
}

fn default_true() -> bool {
    true
}

fn default_reshard_interval() -> Option<usize> {
    Some(100)
}

/// Parameters of the fully sharded sparse policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FssdpParams {
    /// Overlap degree `t`; derived from attention time and bandwidth when unset.
    #[serde(default)]
    pub overlap_degree: Option<usize>,
    /// Memory capacity `m` in experts; derived from device memory when unset.
    #[serde(default)]
    pub memory_capacity: Option<usize>,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_true")]
    pub calibration: bool,
    /// Iterations between heterogeneous re-sharding attempts; `None` disables.
    #[serde(default = "default_reshard_interval")]
    pub reshard_interval: Option<usize>,
    /// Release materialized parameters after forward and gather them again
    /// before backward.
    #[serde(default = "default_true")]
    pub rematerialize: bool,
}

impl Default for FssdpParams {
    fn default() -> Self {
        Self {
            overlap_degree: None,
            memory_capacity: None,
            window: default_window(),
            calibration: true,
            reshard_interval: default_reshard_interval(),
            rematerialize: true,
        }
    }
}

/// Placement policy under simulation.
///
/// Everything other than `Ep` and `Fssdp` is a simplified model of a
/// rearrangement-style system and reported as an approximation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    /// Static even expert partition.
    Ep,
    Fssdp(FssdpParams),
    /// After each gate, replicate up to `top_k` overloaded experts to every device.
    ReplicateAll { top_k: usize },
    /// Every `interval` iterations, re-pair heavy and light experts on devices.
    SwapBalance { interval: usize },
    /// Every `interval` iterations, rebuild replicas within `reserved_slots`
    /// extra slots per device and layer.
    FlexRearrange { interval: usize, reserved_slots: usize },
}

impl PolicyKind {
    pub fn fssdp() -> Self {
        PolicyKind::Fssdp(FssdpParams::default())
    }

    pub fn label(&self) -> String {
        match self {
            PolicyKind::Ep => "ep".into(),
            PolicyKind::Fssdp(_) => "fssdp".into(),
            PolicyKind::ReplicateAll { top_k } => format!("replicate_all(top_k={top_k})"),
            PolicyKind::SwapBalance { interval } => format!("swap(interval={interval})"),
            PolicyKind::FlexRearrange {
                interval,
                reserved_slots,
            } => format!("flex(interval={interval},slots={reserved_slots})"),
        }
    }

    pub fn is_approximation(&self) -> bool {
        !matches!(self, PolicyKind::Ep | PolicyKind::Fssdp(_))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if let PolicyKind::Fssdp(p) = self {
            if p.window == 0 {
                return Err(SimError::Config("fssdp window must be at least 1".into()));
            }
            if p.reshard_interval == Some(0) {
                return Err(SimError::Config("reshard_interval must be positive".into()));
            }
        }
        Ok(())
    }
}
