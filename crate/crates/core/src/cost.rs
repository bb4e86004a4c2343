//! Traffic accounting and bottleneck latency for sparse collectives.
//!
//! A sparse all-gather is a set of per-chunk broadcasts, each realized as
//! direct unicasts from the chunk's single owner. The reduce-scatter is the
//! mirror image: every non-final replica sends its chunk to the final owner.

use num_traits::{FromPrimitive, Num};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::placement::{validate_spag_pair, validate_sprs_pair, ChunkPlacement, DeviceId, PlacementError};
use crate::scalar::Scalar;
use crate::topology::ClusterTopology;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("invalid collective pair: {0}")]
    InvalidPair(#[from] PlacementError),
    #[error("traffic matrix has {matrix} devices but topology has {topology}")]
    DimensionMismatch { matrix: usize, topology: usize },
}

/// Bytes sent from each device (row) to each device (column).
///
/// The diagonal is always zero: local copies cost nothing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficMatrix {
    devices: usize,
    bytes: Vec<u64>,
}

impl TrafficMatrix {
    pub fn zeros(devices: usize) -> Self {
        Self {
            devices,
            bytes: vec![0; devices * devices],
        }
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn get(&self, src: usize, dst: usize) -> u64 {
        self.bytes[src * self.devices + dst]
    }

    /// Adds `bytes` on the `src -> dst` link; self-sends are dropped.
    pub fn add(&mut self, src: usize, dst: usize, bytes: u64) {
        if src != dst {
            self.bytes[src * self.devices + dst] += bytes;
        }
    }

    pub fn total(&self) -> u64 {
        self.bytes.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.bytes.iter().all(|&b| b == 0)
    }

    pub fn outbound(&self, device: usize) -> u64 {
        self.bytes[device * self.devices..(device + 1) * self.devices]
            .iter()
            .sum()
    }

    pub fn inbound(&self, device: usize) -> u64 {
        (0..self.devices).map(|s| self.get(s, device)).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.devices);
        for s in 0..self.devices {
            for d in 0..self.devices {
                t.bytes[d * self.devices + s] = self.get(s, d);
            }
        }
        t
    }

    /// Element-wise sum with another matrix of the same size.
    pub fn merge(&mut self, other: &TrafficMatrix) {
        assert_eq!(self.devices, other.devices, "traffic matrices differ in size");
        for (a, b) in self.bytes.iter_mut().zip(&other.bytes) {
            *a += b;
        }
    }

    /// Bytes that leave the node of `src` for another node, summed per node.
    fn node_flows<T: Scalar>(&self, topology: &ClusterTopology<T>) -> (Vec<u64>, Vec<u64>) {
        let mut out = vec![0; topology.nodes];
        let mut inb = vec![0; topology.nodes];
        for s in 0..self.devices {
            for d in 0..self.devices {
                let b = self.get(s, d);
                if b > 0 && !topology.same_node(s, d) {
                    out[topology.node_of(s)] += b;
                    inb[topology.node_of(d)] += b;
                }
            }
        }
        (out, inb)
    }
}

/// Sparsity and bottleneck summary of one sparse collective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SparsityReport<T> {
    /// Fraction of chunks that take part in inter-device transfer.
    pub lambda: T,
    pub involved_chunks: usize,
    /// Distinct bytes involved (`lambda` times the buffer size).
    pub volume_bytes: u64,
    pub total_interdevice_bytes: u64,
    pub bottleneck_device: DeviceId,
    /// `max(inbound, outbound)` of the bottleneck device.
    pub bottleneck_bytes: u64,
    pub max_inbound_bytes: u64,
}

impl<T: Scalar> SparsityReport<T> {
    fn from_traffic(traffic: &TrafficMatrix, involved_chunks: usize, num_chunks: usize, chunk_bytes: u64) -> Self {
        let mut bottleneck_device = 0;
        let mut bottleneck_bytes = 0;
        let mut max_inbound_bytes = 0;
        for d in 0..traffic.devices() {
            let inbound = traffic.inbound(d);
            let load = inbound.max(traffic.outbound(d));
            if load > bottleneck_bytes {
                bottleneck_bytes = load;
                bottleneck_device = d;
            }
            max_inbound_bytes = max_inbound_bytes.max(inbound);
        }
        let lambda = if num_chunks == 0 {
            T::zero()
        } else {
            T::of_usize(involved_chunks) / T::of_usize(num_chunks)
        };
        Self {
            lambda,
            involved_chunks,
            volume_bytes: involved_chunks as u64 * chunk_bytes,
            total_interdevice_bytes: traffic.total(),
            bottleneck_device: DeviceId(bottleneck_device),
            bottleneck_bytes,
            max_inbound_bytes,
        }
    }
}

/// Traffic of a sparse all-gather from partition `pre` to superset `post`.
pub fn spag_traffic<T: Scalar>(
    pre: &ChunkPlacement,
    post: &ChunkPlacement,
    chunk_bytes: u64,
) -> Result<(TrafficMatrix, SparsityReport<T>), CostError> {
    validate_spag_pair(pre, post)?;
    let mut traffic = TrafficMatrix::zeros(pre.num_devices());
    let mut involved = 0;
    for chunk in 0..pre.num_chunks() {
        let owner = pre.owner(chunk).expect("validated partition");
        let mut sent = false;
        for dst in post.holders(chunk) {
            if dst != owner {
                traffic.add(owner, dst, chunk_bytes);
                sent = true;
            }
        }
        involved += usize::from(sent);
    }
    let report = SparsityReport::from_traffic(&traffic, involved, pre.num_chunks(), chunk_bytes);
    Ok((traffic, report))
}

/// Traffic of a sparse reduce-scatter from superset `pre` to partition `post`.
pub fn sprs_traffic<T: Scalar>(
    pre: &ChunkPlacement,
    post: &ChunkPlacement,
    chunk_bytes: u64,
) -> Result<(TrafficMatrix, SparsityReport<T>), CostError> {
    validate_sprs_pair(pre, post)?;
    let mut traffic = TrafficMatrix::zeros(pre.num_devices());
    let mut involved = 0;
    for chunk in 0..post.num_chunks() {
        let owner = post.owner(chunk).expect("validated partition");
        let mut sent = false;
        for src in pre.holders(chunk) {
            if src != owner {
                traffic.add(src, owner, chunk_bytes);
                sent = true;
            }
        }
        involved += usize::from(sent);
    }
    let report = SparsityReport::from_traffic(&traffic, involved, post.num_chunks(), chunk_bytes);
    Ok((traffic, report))
}

/// Total ring all-reduce volume needed to synchronize gradients of every
/// replicated chunk in `post` within its replica group:
/// `sum over groups of 2 (n - 1) / n * chunk_bytes`.
///
/// Generic over the numeric type so it can be evaluated exactly with a
/// rational type as well as with floats.
pub fn allreduce_dp_volume<V>(post: &ChunkPlacement, chunk_bytes: u64) -> V
where
    V: Num + FromPrimitive + Copy,
{
    let mut volume = V::zero();
    for chunk in 0..post.num_chunks() {
        let n = post.replica_count(chunk) as u64;
        if n > 1 {
            let numer = V::from_u64(2 * (n - 1) * chunk_bytes).expect("volume fits the numeric type");
            let denom = V::from_u64(n).expect("group size fits the numeric type");
            volume = volume + numer / denom;
        }
    }
    volume
}

/// Ring all-reduce traffic for every replica group in `post`: each member
/// sends `ceil(2 (n - 1) / n * chunk_bytes)` to its ring successor.
pub fn allreduce_traffic(post: &ChunkPlacement, chunk_bytes: u64) -> TrafficMatrix {
    let mut traffic = TrafficMatrix::zeros(post.num_devices());
    for chunk in 0..post.num_chunks() {
        let group = post.holders(chunk);
        let n = group.len() as u64;
        if n < 2 {
            continue;
        }
        let per_member = (2 * (n - 1) * chunk_bytes).div_ceil(n);
        for (i, &src) in group.iter().enumerate() {
            traffic.add(src, group[(i + 1) % group.len()], per_member);
        }
    }
    traffic
}

/// Bandwidth-bottleneck latency of a traffic pattern on a two-tier topology.
///
/// Constrained resources are each device's intra-node inbound and outbound
/// (same-node traffic at `intra_bw`) and each node's aggregated cross-node
/// inbound and outbound (at `inter_bw`). A non-empty pattern pays `alpha`
/// once; an empty one costs nothing.
pub fn collective_latency<T: Scalar>(
    traffic: &TrafficMatrix,
    topology: &ClusterTopology<T>,
) -> Result<T, CostError> {
    let n = topology.num_devices();
    if traffic.devices() != n {
        return Err(CostError::DimensionMismatch {
            matrix: traffic.devices(),
            topology: n,
        });
    }
    if traffic.is_zero() {
        return Ok(T::zero());
    }
    let mut intra_max = 0u64;
    for dev in 0..n {
        let (mut out, mut inb) = (0u64, 0u64);
        for peer in topology.devices_on(topology.node_of(dev)) {
            out += traffic.get(dev, peer);
            inb += traffic.get(peer, dev);
        }
        intra_max = intra_max.max(out).max(inb);
    }
    let (node_out, node_in) = traffic.node_flows(topology);
    let inter_max = node_out.into_iter().chain(node_in).max().unwrap_or(0);
    let intra_time = T::of_u64(intra_max) / topology.intra_bw;
    let inter_time = T::of_u64(inter_max) / topology.inter_bw;
    Ok(topology.alpha + intra_time.max(inter_time))
}

/// Number of experts whose materialization hides under `t_nonmoe` seconds of
/// non-MoE compute: `floor(t_nonmoe * BW / expert_bytes)`.
pub fn overlap_degree<T: Scalar>(t_nonmoe: T, topology: &ClusterTopology<T>, expert_bytes: u64) -> usize {
    assert!(expert_bytes > 0, "expert_bytes must be positive");
    if !(t_nonmoe > T::zero()) {
        return 0;
    }
    let raw = t_nonmoe * topology.materialization_bw() / T::of_u64(expert_bytes);
    // absorb representation error in products such as 0.01 * 12.5e9
    let slack = T::one() + T::epsilon() * T::of_f64(16.0);
    (raw * slack).floor().to_usize().unwrap_or(usize::MAX)
}
