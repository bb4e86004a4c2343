//! Per-(device, expert) token counts for one MoE layer.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Tokens each source device routes to each expert, stored row-major
/// (`devices` rows by `experts` columns).
///
/// Observed gate decisions use `u64`; estimates averaged over several
/// iterations use a [`Scalar`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertLoadMatrix<V = u64> {
    devices: usize,
    experts: usize,
    tokens: Vec<V>,
}

/// Observed token counts.
pub type TokenCounts = ExpertLoadMatrix<u64>;

impl<V: Copy + Default> ExpertLoadMatrix<V> {
    pub fn zeros(devices: usize, experts: usize) -> Self {
        Self {
            devices,
            experts,
            tokens: vec![V::default(); devices * experts],
        }
    }

    /// Builds a matrix from rows; returns `None` if rows are ragged.
    pub fn from_rows(rows: Vec<Vec<V>>) -> Option<Self> {
        let devices = rows.len();
        let experts = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != experts) {
            return None;
        }
        Some(Self {
            devices,
            experts,
            tokens: rows.into_iter().flatten().collect(),
        })
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn get(&self, device: usize, expert: usize) -> V {
        self.tokens[device * self.experts + expert]
    }

    pub fn set(&mut self, device: usize, expert: usize, value: V) {
        self.tokens[device * self.experts + expert] = value;
    }

    pub fn row(&self, device: usize) -> &[V] {
        &self.tokens[device * self.experts..(device + 1) * self.experts]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[V]> {
        (0..self.devices).map(move |d| self.row(d))
    }

    pub fn map<W: Copy + Default>(&self, f: impl Fn(V) -> W) -> ExpertLoadMatrix<W> {
        ExpertLoadMatrix {
            devices: self.devices,
            experts: self.experts,
            tokens: self.tokens.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl TokenCounts {
    /// Per-expert load: column sums.
    pub fn expert_totals(&self) -> Vec<u64> {
        let mut totals = vec![0; self.experts];
        for row in self.rows() {
            for (t, &v) in totals.iter_mut().zip(row) {
                *t += v;
            }
        }
        totals
    }

    pub fn device_totals(&self) -> Vec<u64> {
        self.rows().map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.tokens.iter().sum()
    }

    pub fn to_scalar<T: Scalar>(&self) -> ExpertLoadMatrix<T> {
        self.map(T::of_u64)
    }
}

impl<T: Scalar> ExpertLoadMatrix<T> {
    /// Per-expert load: column sums.
    pub fn expert_loads(&self) -> Vec<T> {
        let mut totals = vec![T::zero(); self.experts];
        for row in self.rows() {
            for (t, &v) in totals.iter_mut().zip(row) {
                *t = *t + v;
            }
        }
        totals
    }

    /// Nearest integer token counts (half away from zero, negatives clamp to 0).
    pub fn round_to_counts(&self) -> TokenCounts {
        self.map(|v| v.round().non_negative().to_u64().unwrap_or(0))
    }
}
