//! Two-tier cluster description: nodes of devices joined by fast intra-node
//! links, nodes joined by a shared per-node NIC.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::placement::DeviceId;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("topology needs at least one node and one device per node")]
    Empty,
    #[error("{field} must be positive and finite")]
    NonPositive { field: &'static str },
    #[error("alpha must be non-negative and finite")]
    NegativeAlpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ClusterTopology<T> {
    pub nodes: usize,
    pub devices_per_node: usize,
    /// Per-device intra-node bandwidth, bytes/s.
    pub intra_bw: T,
    /// Per-node NIC bandwidth, bytes/s.
    pub inter_bw: T,
    /// Fixed launch cost of one collective, seconds.
    pub alpha: T,
}

impl<T: Scalar> ClusterTopology<T> {
    pub fn new(
        nodes: usize,
        devices_per_node: usize,
        intra_bw: T,
        inter_bw: T,
        alpha: T,
    ) -> Result<Self, TopologyError> {
        let topo = Self {
            nodes,
            devices_per_node,
            intra_bw,
            inter_bw,
            alpha,
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.nodes == 0 || self.devices_per_node == 0 {
            return Err(TopologyError::Empty);
        }
        let positive = |v: T| v > T::zero() && v.is_finite();
        if !positive(self.intra_bw) {
            return Err(TopologyError::NonPositive { field: "intra_bw" });
        }
        if !positive(self.inter_bw) {
            return Err(TopologyError::NonPositive { field: "inter_bw" });
        }
        if !(self.alpha >= T::zero() && self.alpha.is_finite()) {
            return Err(TopologyError::NegativeAlpha);
        }
        Ok(())
    }

    pub fn num_devices(&self) -> usize {
        self.nodes * self.devices_per_node
    }

    pub fn node_of(&self, device: usize) -> usize {
        DeviceId(device).node(self.devices_per_node)
    }

    pub fn devices_on(&self, node: usize) -> std::ops::Range<usize> {
        node * self.devices_per_node..(node + 1) * self.devices_per_node
    }

    pub fn same_node(&self, a: usize, b: usize) -> bool {
        self.node_of(a) == self.node_of(b)
    }

    /// Bandwidth that bounds how fast expert parameters can be spread:
    /// the NIC when it is slower than the intra-node fabric on a multi-node
    /// cluster, otherwise the uniform device bandwidth.
    pub fn materialization_bw(&self) -> T {
        if self.nodes > 1 && self.inter_bw < self.intra_bw {
            self.inter_bw
        } else {
            self.intra_bw
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_values() {
        assert_eq!(
            ClusterTopology::new(0, 4, 1.0, 1.0, 0.0).unwrap_err(),
            TopologyError::Empty
        );
        assert!(ClusterTopology::new(1, 4, 0.0, 1.0, 0.0).is_err());
        assert!(ClusterTopology::new(1, 4, 1.0, f64::NAN, 0.0).is_err());
        assert!(ClusterTopology::new(1, 4, 1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn node_mapping() {
        let t = ClusterTopology::new(2, 4, 300e9, 12.5e9, 1e-5).unwrap();
        assert_eq!(t.num_devices(), 8);
        assert_eq!(t.node_of(3), 0);
        assert_eq!(t.node_of(4), 1);
        assert_eq!(t.devices_on(1), 4..8);
        assert_eq!(t.materialization_bw(), 12.5e9);
        let single = ClusterTopology::new(1, 4, 300e9, 12.5e9, 1e-5).unwrap();
        assert_eq!(single.materialization_bw(), 300e9);
    }
}
