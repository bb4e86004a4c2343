//! Seeded generators and brute-force oracles shared by the integration tests.
//! Nothing here calls the planner or cost code under test.

#![allow(dead_code)]

use fssdp::{ChunkPlacement, ClusterTopology, DispatchPlan, TokenCounts, TrafficMatrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn partition_from_owners(owners: &[usize], devices: usize) -> ChunkPlacement {
    ChunkPlacement::from_pairs(owners.len(), devices, owners.iter().copied().enumerate()).unwrap()
}

pub fn random_partition(rng: &mut ChaCha8Rng, chunks: usize, devices: usize) -> ChunkPlacement {
    let owners: Vec<usize> = (0..chunks).map(|_| rng.gen_range(0..devices)).collect();
    partition_from_owners(&owners, devices)
}

/// `pre` plus every `(chunk, device)` whose mask bit is set.
pub fn superset(pre: &ChunkPlacement, mask: &[bool]) -> ChunkPlacement {
    let devices = pre.num_devices();
    let mut post = pre.clone();
    for (i, &on) in mask.iter().enumerate() {
        if on {
            post.insert(i / devices, i % devices).unwrap();
        }
    }
    post
}

/// A valid sparse all-gather pair with a random replication density.
pub fn random_spag_pair(rng: &mut ChaCha8Rng, chunks: usize, devices: usize) -> (ChunkPlacement, ChunkPlacement) {
    let pre = random_partition(rng, chunks, devices);
    let density: f64 = rng.gen();
    let mask: Vec<bool> = (0..chunks * devices).map(|_| rng.gen_bool(density)).collect();
    let post = superset(&pre, &mask);
    (pre, post)
}

/// Proptest strategy for `(pre, post)` spag pairs up to the given size.
pub fn spag_pair(max_chunks: usize, max_devices: usize) -> impl Strategy<Value = (ChunkPlacement, ChunkPlacement)> {
    (1..=max_chunks, 1..=max_devices).prop_flat_map(|(c, d)| {
        (
            proptest::collection::vec(0..d, c),
            proptest::collection::vec(any::<bool>(), c * d),
        )
            .prop_map(move |(owners, mask)| {
                let pre = partition_from_owners(&owners, d);
                let post = superset(&pre, &mask);
                (pre, post)
            })
    })
}

/// Bytes a pair moves when every extra replica costs one chunk transfer.
pub fn oracle_pair_bytes(partition: &ChunkPlacement, replicated: &ChunkPlacement, chunk_bytes: u64) -> u64 {
    replicated.entries().filter(|&(c, d)| !partition.contains(c, d)).count() as u64 * chunk_bytes
}

/// Chunks with at least two holders.
pub fn oracle_replicated_chunks(p: &ChunkPlacement) -> usize {
    (0..p.num_chunks()).filter(|&c| p.entries().filter(|&(x, _)| x == c).count() > 1).count()
}

pub fn topology(nodes: usize, per_node: usize) -> ClusterTopology<f64> {
    ClusterTopology::new(nodes, per_node, 300e9, 12.5e9, 1e-5).unwrap()
}

pub fn random_topology(rng: &mut ChaCha8Rng, max_nodes: usize, max_per_node: usize) -> ClusterTopology<f64> {
    topology(rng.gen_range(1..=max_nodes), rng.gen_range(1..=max_per_node))
}

pub fn random_tokens(rng: &mut ChaCha8Rng, devices: usize, experts: usize, max: u64) -> TokenCounts {
    let rows = (0..devices)
        .map(|_| (0..experts).map(|_| rng.gen_range(0..=max)).collect())
        .collect();
    TokenCounts::from_rows(rows).unwrap()
}

/// Loads drawn from a heavy-tailed distribution so that experts differ by
/// well over 2x.
pub fn skewed_loads(rng: &mut ChaCha8Rng, experts: usize) -> Vec<f64> {
    (0..experts).map(|_| (rng.gen::<f64>() * 4.0).exp().round() + 1.0).collect()
}

/// All assignments of `items` to `bins`, each bin taking exactly `cap` items.
pub fn balanced_assignments(items: usize, bins: usize, cap: usize) -> Vec<Vec<usize>> {
    fn go(i: usize, items: usize, cap: usize, fill: &mut Vec<usize>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == items {
            out.push(cur.clone());
            return;
        }
        for b in 0..fill.len() {
            if fill[b] < cap {
                fill[b] += 1;
                cur.push(b);
                go(i + 1, items, cap, fill, cur, out);
                cur.pop();
                fill[b] -= 1;
            }
        }
    }
    let mut out = Vec::new();
    go(0, items, cap, &mut vec![0; bins], &mut Vec::new(), &mut out);
    out
}

/// Max over nodes of the summed load of experts placed there.
pub fn max_node_load(owner_device: &[usize], loads: &[f64], per_node: usize, nodes: usize) -> f64 {
    let mut node = vec![0.0; nodes];
    for (e, &d) in owner_device.iter().enumerate() {
        node[d / per_node] += loads[e];
    }
    node.into_iter().fold(0.0, f64::max)
}

/// Per-device load when each expert's load is split evenly over its holders.
pub fn expected_device_loads(p: &ChunkPlacement, loads: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.num_devices()];
    for c in 0..p.num_chunks() {
        let holders: Vec<usize> = p.entries().filter(|&(x, _)| x == c).map(|(_, d)| d).collect();
        for &d in &holders {
            out[d] += loads[c] / holders.len() as f64;
        }
    }
    out
}

/// Panics unless `plan` routes every token to a holder chosen by locality
/// and splits it evenly over those holders.
pub fn check_plan(topo: &ClusterTopology<f64>, placement: &ChunkPlacement, tokens: &TokenCounts, plan: &DispatchPlan) {
    let devices = topo.num_devices();
    for src in 0..devices {
        for e in 0..tokens.experts() {
            let split = plan.split(src, e);
            assert_eq!(split.iter().sum::<u64>(), tokens.get(src, e), "conservation");
            let used: Vec<usize> = (0..devices).filter(|&d| split[d] > 0).collect();
            assert!(used.iter().all(|&d| placement.contains(e, d)), "validity");
            if tokens.get(src, e) == 0 {
                continue;
            }
            let holders = placement.holders(e);
            let local: Vec<usize> = holders.iter().copied().filter(|&d| topo.same_node(src, d)).collect();
            let chosen = if placement.contains(e, src) {
                vec![src]
            } else if !local.is_empty() {
                local
            } else {
                holders
            };
            assert!(used.iter().all(|d| chosen.contains(d)), "locality");
            let counts: Vec<u64> = chosen.iter().map(|&d| split[d]).collect();
            let hi = *counts.iter().max().unwrap();
            let lo = *counts.iter().min().unwrap();
            assert!(hi - lo <= 1, "even split {counts:?}");
        }
    }
}

/// Traffic matrix rebuilt from the route grid.
pub fn recount(plan: &DispatchPlan, token_bytes: u64) -> TrafficMatrix {
    let mut m = TrafficMatrix::zeros(plan.devices());
    for s in 0..plan.devices() {
        for e in 0..plan.experts() {
            for d in 0..plan.devices() {
                if s != d {
                    m.add(s, d, plan.get(s, e, d) * token_bytes);
                }
            }
        }
    }
    m
}

/// `shards` with the first `k` experts of `order` copied to every device.
pub fn top_k_everywhere(shards: &ChunkPlacement, order: &[usize], k: usize) -> ChunkPlacement {
    let mut p = shards.clone();
    for &e in &order[..k] {
        for d in 0..p.num_devices() {
            p.insert(e, d).unwrap();
        }
    }
    p
}

/// Loads for the hand-traced 4-expert, 2-device table.
pub const SMALL_SKEWED_LOADS: [f64; 4] = [5.0, 1.0, 3.0, 1.0];

/// Traced by hand for 4 experts on 2 devices (one node), shards
/// `{0,1} | {2,3}`. Each entry is the number of experts, in descending
/// load order, that end up on both devices, indexed by `[t][m]`.
const SMALL_TABLE: [[usize; 6]; 6] = [
    [0, 0, 0, 0, 0, 0],
    [0, 1, 1, 1, 1, 1],
    [0, 2, 2, 2, 2, 2],
    [0, 2, 3, 3, 3, 3],
    [0, 2, 4, 4, 4, 4],
    [0, 2, 4, 4, 4, 4],
];

/// Expected materialization for `t, m < 6` on the small instance, either
/// with [`SMALL_SKEWED_LOADS`] or with all-zero loads.
pub fn small_table_target(shards: &ChunkPlacement, zero_loads: bool, t: usize, m: usize) -> ChunkPlacement {
    if !zero_loads {
        // order 0,2,1,3
        return top_k_everywhere(shards, &[0, 2, 1, 3], SMALL_TABLE[t][m]);
    }
    // Ties order by index. With m = 1 and t >= 2 both slots go to experts
    // 0 and 1, which live on device 0, so only one replica fits.
    if m == 1 && t >= 2 {
        let mut p = shards.clone();
        p.insert(0, 1).unwrap();
        p
    } else {
        top_k_everywhere(shards, &[0, 1, 2, 3], SMALL_TABLE[t][m])
    }
}
