//! Topology-aware token dispatch over a materialized expert placement.
//!
//! Tokens for an expert stay on the source device when it holds a replica.
//! Otherwise they go to replicas inside the source node when any exist, and
//! cross nodes only when none do. Tokens are split evenly among the chosen
//! destinations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::TrafficMatrix;
use crate::load::TokenCounts;
use crate::placement::ChunkPlacement;
use crate::scalar::Scalar;
use crate::topology::ClusterTopology;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DispatchError {
    #[error("expert {expert} has tokens but no replica")]
    OrphanExpert { expert: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Tokens per `(source device, expert, destination device)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchPlan {
    devices: usize,
    experts: usize,
    route: Vec<u64>,
}

impl DispatchPlan {
    fn zeros(devices: usize, experts: usize) -> Self {
        Self {
            devices,
            experts,
            route: vec![0; devices * experts * devices],
        }
    }

    fn idx(&self, src: usize, expert: usize, dst: usize) -> usize {
        (src * self.experts + expert) * self.devices + dst
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn get(&self, src: usize, expert: usize, dst: usize) -> u64 {
        self.route[self.idx(src, expert, dst)]
    }

    /// Destinations of `(src, expert)`.
    pub fn split(&self, src: usize, expert: usize) -> &[u64] {
        let start = self.idx(src, expert, 0);
        &self.route[start..start + self.devices]
    }

    /// Tokens each device computes on, local ones included.
    pub fn received_tokens(&self) -> Vec<u64> {
        let mut recv = vec![0; self.devices];
        for chunk in self.route.chunks(self.devices) {
            for (r, &v) in recv.iter_mut().zip(chunk) {
                *r += v;
            }
        }
        recv
    }

    /// Largest per-device token count.
    pub fn bottleneck_tokens(&self) -> u64 {
        self.received_tokens().into_iter().max().unwrap_or(0)
    }

    /// Plan with source and destination swapped, i.e. the gather path.
    pub fn transposed(&self) -> Self {
        let mut t = Self::zeros(self.devices, self.experts);
        for s in 0..self.devices {
            for e in 0..self.experts {
                for d in 0..self.devices {
                    let i = t.idx(d, e, s);
                    t.route[i] = self.get(s, e, d);
                }
            }
        }
        t
    }
}

/// Builds the dispatch plan for `tokens` over `placement`.
pub fn build_dispatch<T: Scalar>(
    tokens: &TokenCounts,
    placement: &ChunkPlacement,
    topology: &ClusterTopology<T>,
) -> Result<DispatchPlan, DispatchError> {
    let devices = topology.num_devices();
    if tokens.devices() != devices || placement.num_devices() != devices {
        return Err(DispatchError::DimensionMismatch(format!(
            "tokens have {} devices, placement {}, topology {}",
            tokens.devices(),
            placement.num_devices(),
            devices
        )));
    }
    if tokens.experts() != placement.num_chunks() {
        return Err(DispatchError::DimensionMismatch(format!(
            "tokens have {} experts, placement {}",
            tokens.experts(),
            placement.num_chunks()
        )));
    }

    let holders: Vec<Vec<usize>> = (0..tokens.experts()).map(|e| placement.holders(e)).collect();
    let mut plan = DispatchPlan::zeros(devices, tokens.experts());
    let mut assigned = vec![0u64; devices];
    let mut chosen = Vec::with_capacity(devices);

    for src in 0..devices {
        let node = topology.node_of(src);
        for (expert, replicas) in holders.iter().enumerate() {
            let n = tokens.get(src, expert);
            if n == 0 {
                continue;
            }
            if replicas.is_empty() {
                return Err(DispatchError::OrphanExpert { expert });
            }
            chosen.clear();
            if replicas.contains(&src) {
                chosen.push(src);
            } else {
                chosen.extend(replicas.iter().copied().filter(|&d| topology.node_of(d) == node));
                if chosen.is_empty() {
                    chosen.extend_from_slice(replicas);
                }
            }
            let k = chosen.len() as u64;
            let base = n / k;
            let extra = (n % k) as usize;
            // remainders go to the least-assigned destinations, lowest index first
            let mut order = chosen.clone();
            order.sort_by_key(|&d| (assigned[d], d));
            let bonus = &order[..extra];
            for &dst in chosen.iter() {
                let count = base + u64::from(bonus.contains(&dst));
                let i = plan.idx(src, expert, dst);
                plan.route[i] = count;
                assigned[dst] += count;
            }
        }
    }
    Ok(plan)
}

/// Bytes moved by the dispatch All-to-All; local tokens are free.
pub fn dispatch_traffic(plan: &DispatchPlan, token_bytes: u64) -> TrafficMatrix {
    let mut traffic = TrafficMatrix::zeros(plan.devices());
    for src in 0..plan.devices() {
        for expert in 0..plan.experts() {
            for (dst, &n) in plan.split(src, expert).iter().enumerate() {
                if n > 0 {
                    traffic.add(src, dst, n * token_bytes);
                }
            }
        }
    }
    traffic
}
