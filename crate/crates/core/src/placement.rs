//! Chunk placements and the validity rules of the two sparse collectives.
//!
//! A placement is a set of `(chunk, device)` pairs saying which device holds a
//! copy of which parameter chunk. One chunk is one expert's parameter block.
//! A sparse all-gather goes from a partition to a superset of it; a sparse
//! reduce-scatter goes from a superset back to a partition.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a device in the communication group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub usize);

impl DeviceId {
    pub fn index(self) -> usize {
        self.0
    }

    /// Node that hosts this device.
    pub fn node(self, devices_per_node: usize) -> usize {
        self.0 / devices_per_node
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dev{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlacementError {
    #[error("chunk {chunk} out of range (placement has {num_chunks} chunks)")]
    ChunkOutOfRange { chunk: usize, num_chunks: usize },
    #[error("device {device} out of range (placement has {num_devices} devices)")]
    DeviceOutOfRange { device: usize, num_devices: usize },
    #[error("duplicate entry (chunk {chunk}, device {device})")]
    DuplicateEntry { chunk: usize, device: usize },
    #[error("placements disagree on dimensions: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("chunk {chunk} has no owner")]
    MissingChunk { chunk: usize },
    #[error("chunk {chunk} has more than one owner: {devices:?}")]
    DuplicateOwner { chunk: usize, devices: Vec<usize> },
    #[error("entry (chunk {chunk}, device {device}) of the smaller placement is absent from the larger one")]
    DroppedEntry { chunk: usize, device: usize },
}

/// Which sparse collective a placement pair is checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Collective {
    Spag,
    Sprs,
}

/// Set of `(chunk, device)` pairs.
///
/// Entries are kept sorted, so the serialized form is canonical.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawPlacement", into = "RawPlacement")]
pub struct ChunkPlacement {
    num_chunks: usize,
    num_devices: usize,
    entries: BTreeSet<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct RawPlacement {
    num_chunks: usize,
    num_devices: usize,
    entries: Vec<(usize, usize)>,
}

impl TryFrom<RawPlacement> for ChunkPlacement {
    type Error = PlacementError;

    fn try_from(raw: RawPlacement) -> Result<Self, Self::Error> {
        ChunkPlacement::from_pairs(raw.num_chunks, raw.num_devices, raw.entries)
    }
}

impl From<ChunkPlacement> for RawPlacement {
    fn from(p: ChunkPlacement) -> Self {
        RawPlacement {
            num_chunks: p.num_chunks,
            num_devices: p.num_devices,
            entries: p.entries.into_iter().collect(),
        }
    }
}

impl ChunkPlacement {
    pub fn empty(num_chunks: usize, num_devices: usize) -> Self {
        Self {
            num_chunks,
            num_devices,
            entries: BTreeSet::new(),
        }
    }

    /// Builds a placement from `(chunk, device)` pairs, rejecting duplicates
    /// and out-of-range indices.
    pub fn from_pairs(
        num_chunks: usize,
        num_devices: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, PlacementError> {
        let mut p = Self::empty(num_chunks, num_devices);
        for (chunk, device) in pairs {
            if !p.insert(chunk, device)? {
                return Err(PlacementError::DuplicateEntry { chunk, device });
            }
        }
        Ok(p)
    }

    pub fn num_chunks(&self) -> usize {
        self.num_chunks
    }

    pub fn num_devices(&self) -> usize {
        self.num_devices
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `(chunk, device)`; returns whether it was newly inserted.
    pub fn insert(&mut self, chunk: usize, device: usize) -> Result<bool, PlacementError> {
        self.check_range(chunk, device)?;
        Ok(self.entries.insert((chunk, device)))
    }

    pub fn remove(&mut self, chunk: usize, device: usize) -> bool {
        self.entries.remove(&(chunk, device))
    }

    pub fn contains(&self, chunk: usize, device: usize) -> bool {
        self.entries.contains(&(chunk, device))
    }

    /// Sorted `(chunk, device)` pairs.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().copied()
    }

    /// Devices holding `chunk`, ascending.
    pub fn holders(&self, chunk: usize) -> Vec<usize> {
        self.entries
            .range((chunk, 0)..(chunk, usize::MAX))
            .map(|&(_, d)| d)
            .collect()
    }

    pub fn replica_count(&self, chunk: usize) -> usize {
        self.entries.range((chunk, 0)..(chunk, usize::MAX)).count()
    }

    /// Chunks held by `device`, ascending.
    pub fn chunks_on(&self, device: usize) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|&&(_, d)| d == device)
            .map(|&(c, _)| c)
            .collect()
    }

    /// Number of chunks held by each device.
    pub fn per_device_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_devices];
        for &(_, d) in &self.entries {
            counts[d] += 1;
        }
        counts
    }

    /// Single owner of `chunk`, if exactly one device holds it.
    pub fn owner(&self, chunk: usize) -> Option<usize> {
        let mut it = self.entries.range((chunk, 0)..(chunk, usize::MAX));
        match (it.next(), it.next()) {
            (Some(&(_, d)), None) => Some(d),
            _ => None,
        }
    }

    /// Owner of every chunk when the placement is a partition.
    pub fn owners(&self) -> Result<Vec<usize>, PlacementError> {
        self.check_partition()?;
        Ok(self.entries.iter().map(|&(_, d)| d).collect())
    }

    pub fn is_partition(&self) -> bool {
        self.check_partition().is_ok()
    }

    /// Checks that every chunk is on exactly one device.
    pub fn check_partition(&self) -> Result<(), PlacementError> {
        for chunk in 0..self.num_chunks {
            let holders = self.holders(chunk);
            match holders.len() {
                0 => return Err(PlacementError::MissingChunk { chunk }),
                1 => {}
                _ => {
                    return Err(PlacementError::DuplicateOwner {
                        chunk,
                        devices: holders,
                    })
                }
            }
        }
        Ok(())
    }

    /// Every chunk has at least one holder.
    pub fn is_surjective(&self) -> bool {
        (0..self.num_chunks).all(|c| self.replica_count(c) > 0)
    }

    /// First entry of `self` missing from `other`, if any.
    pub fn first_not_in(&self, other: &ChunkPlacement) -> Option<(usize, usize)> {
        self.entries.iter().copied().find(|e| !other.entries.contains(e))
    }

    pub fn is_subset(&self, other: &ChunkPlacement) -> bool {
        self.entries.is_subset(&other.entries)
    }

    pub fn union(&self, other: &ChunkPlacement) -> Result<ChunkPlacement, PlacementError> {
        self.check_same_shape(other)?;
        Ok(ChunkPlacement {
            entries: self.entries.union(&other.entries).copied().collect(),
            ..self.clone()
        })
    }

    /// Entries of `self` that are not in `other`.
    pub fn difference(&self, other: &ChunkPlacement) -> Result<ChunkPlacement, PlacementError> {
        self.check_same_shape(other)?;
        Ok(ChunkPlacement {
            entries: self.entries.difference(&other.entries).copied().collect(),
            ..self.clone()
        })
    }

    pub fn check_same_shape(&self, other: &ChunkPlacement) -> Result<(), PlacementError> {
        if self.num_chunks != other.num_chunks || self.num_devices != other.num_devices {
            return Err(PlacementError::DimensionMismatch {
                left: (self.num_chunks, self.num_devices),
                right: (other.num_chunks, other.num_devices),
            });
        }
        Ok(())
    }

    fn check_range(&self, chunk: usize, device: usize) -> Result<(), PlacementError> {
        if chunk >= self.num_chunks {
            return Err(PlacementError::ChunkOutOfRange {
                chunk,
                num_chunks: self.num_chunks,
            });
        }
        if device >= self.num_devices {
            return Err(PlacementError::DeviceOutOfRange {
                device,
                num_devices: self.num_devices,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("placement serializes")
    }
}

/// Number of items each of `num_devices` bins receives when `total` items are
/// split as evenly as possible, remainders going to the lowest indices.
pub fn balanced_counts(total: usize, num_devices: usize) -> Vec<usize> {
    let base = total / num_devices;
    let rem = total % num_devices;
    (0..num_devices)
        .map(|d| base + usize::from(d < rem))
        .collect()
}

/// Contiguous even partition of `num_chunks` chunks over `num_devices` devices.
///
/// When the division is not exact the lowest-index devices take one extra chunk.
pub fn make_even_partition(num_chunks: usize, num_devices: usize) -> ChunkPlacement {
    assert!(num_devices > 0, "at least one device is required");
    let mut p = ChunkPlacement::empty(num_chunks, num_devices);
    let mut chunk = 0;
    for (device, count) in balanced_counts(num_chunks, num_devices).into_iter().enumerate() {
        for _ in 0..count {
            p.entries.insert((chunk, device));
            chunk += 1;
        }
    }
    p
}

/// Checks a sparse all-gather pair: `pre` is a partition and `pre ⊆ post`.
pub fn validate_spag_pair(pre: &ChunkPlacement, post: &ChunkPlacement) -> Result<(), PlacementError> {
    pre.check_same_shape(post)?;
    pre.check_partition()?;
    match pre.first_not_in(post) {
        Some((chunk, device)) => Err(PlacementError::DroppedEntry { chunk, device }),
        None => Ok(()),
    }
}

/// Checks a sparse reduce-scatter pair: `post` is a partition and `post ⊆ pre`.
pub fn validate_sprs_pair(pre: &ChunkPlacement, post: &ChunkPlacement) -> Result<(), PlacementError> {
    pre.check_same_shape(post)?;
    post.check_partition()?;
    match post.first_not_in(pre) {
        Some((chunk, device)) => Err(PlacementError::DroppedEntry { chunk, device }),
        None => Ok(()),
    }
}

pub fn validate_pair(
    collective: Collective,
    pre: &ChunkPlacement,
    post: &ChunkPlacement,
) -> Result<(), PlacementError> {
    match collective {
        Collective::Spag => validate_spag_pair(pre, post),
        Collective::Sprs => validate_sprs_pair(pre, post),
    }
}

/// Per-layer expert sharding with a fixed number of expert slots per device
/// summed over all layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub per_layer: Vec<ChunkPlacement>,
    /// Slots of each device; equal everywhere when the global expert count
    /// divides evenly, otherwise the lowest-index devices have one more.
    pub slots: Vec<usize>,
}

impl ShardPlan {
    /// Homogeneous sharding: every layer evenly partitioned.
    pub fn even(layers: usize, experts: usize, num_devices: usize) -> Self {
        let per_layer = vec![make_even_partition(experts, num_devices); layers];
        let slots = Self::device_totals(&per_layer, num_devices);
        Self { per_layer, slots }
    }

    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }

    /// Experts held by each device across all layers.
    pub fn device_totals(per_layer: &[ChunkPlacement], num_devices: usize) -> Vec<usize> {
        let mut totals = vec![0; num_devices];
        for p in per_layer {
            for (d, c) in p.per_device_counts().into_iter().enumerate() {
                totals[d] += c;
            }
        }
        totals
    }

    /// Checks the partition and slot-exactness invariants.
    pub fn check(&self) -> Result<(), PlacementError> {
        for p in &self.per_layer {
            p.check_partition()?;
        }
        Ok(())
    }

    pub fn is_slot_exact(&self) -> bool {
        let Some(first) = self.per_layer.first() else {
            return true;
        };
        Self::device_totals(&self.per_layer, first.num_devices()) == self.slots
    }

    /// `(layer, expert, from, to)` for every expert whose owner differs
    /// between `self` and `next`.
    pub fn relocations(&self, next: &ShardPlan) -> Vec<(usize, usize, usize, usize)> {
        let mut moves = Vec::new();
        for (layer, (a, b)) in self.per_layer.iter().zip(&next.per_layer).enumerate() {
            for chunk in 0..a.num_chunks() {
                if let (Some(from), Some(to)) = (a.owner(chunk), b.owner(chunk)) {
                    if from != to {
                        moves.push((layer, chunk, from, to));
                    }
                }
            }
        }
        moves
    }
}
