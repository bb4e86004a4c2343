mod common;

use common::*;
use fssdp::{build_dispatch, dispatch_traffic, ChunkPlacement, ClusterTopology, DispatchError, TokenCounts};
use proptest::prelude::*;

const TOKEN_BYTES: u64 = 512;

/// Every expert keeps at least one holder; extra holders come from the mask.
fn covering_placement(owners: &[usize], mask: &[bool], devices: usize) -> ChunkPlacement {
    superset(&partition_from_owners(owners, devices), mask)
}

fn case() -> impl Strategy<Value = (ClusterTopology<f64>, ChunkPlacement, TokenCounts)> {
    (1usize..=3, 1usize..=3, 1usize..=8).prop_flat_map(|(nodes, per_node, experts)| {
        let devices = nodes * per_node;
        (
            proptest::collection::vec(0..devices, experts),
            proptest::collection::vec(proptest::bool::weighted(0.3), experts * devices),
            proptest::collection::vec(proptest::collection::vec(0u64..200, experts), devices),
        )
            .prop_map(move |(owners, mask, rows)| {
                (
                    topology(nodes, per_node),
                    covering_placement(&owners, &mask, devices),
                    TokenCounts::from_rows(rows).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn dispatch_properties((topo, placement, tokens) in case()) {
        let plan = build_dispatch(&tokens, &placement, &topo).unwrap();
        check_plan(&topo, &placement, &tokens, &plan);
        prop_assert_eq!(dispatch_traffic(&plan, TOKEN_BYTES), recount(&plan, TOKEN_BYTES));
        prop_assert_eq!(plan.received_tokens().iter().sum::<u64>(), tokens.total());
    }

    #[test]
    fn no_cross_node_bytes_with_local_replicas((topo, placement, tokens) in case()) {
        // add one replica of every expert inside every node
        let mut p = placement.clone();
        for e in 0..p.num_chunks() {
            for n in 0..topo.nodes {
                if !topo.devices_on(n).any(|d| p.contains(e, d)) {
                    p.insert(e, topo.devices_on(n).start).unwrap();
                }
            }
        }
        let plan = build_dispatch(&tokens, &p, &topo).unwrap();
        let traffic = dispatch_traffic(&plan, TOKEN_BYTES);
        for s in 0..topo.num_devices() {
            for d in 0..topo.num_devices() {
                if !topo.same_node(s, d) {
                    prop_assert_eq!(traffic.get(s, d), 0);
                }
            }
        }
    }
}

#[test]
fn orphan_expert_is_reported() {
    let topo = topology(1, 2);
    let p = ChunkPlacement::from_pairs(2, 2, [(0, 0)]).unwrap();
    let mut tokens = TokenCounts::zeros(2, 2);
    tokens.set(1, 1, 3);
    assert_eq!(build_dispatch(&tokens, &p, &topo), Err(DispatchError::OrphanExpert { expert: 1 }));
}

#[test]
fn seeded_cases() {
    let mut r = rng(23);
    for _ in 0..300 {
        let topo = random_topology(&mut r, 3, 4);
        let devices = topo.num_devices();
        let experts = 8;
        let (_, placement) = random_spag_pair(&mut r, experts, devices);
        let tokens = random_tokens(&mut r, devices, experts, 500);
        let plan = build_dispatch(&tokens, &placement, &topo).unwrap();
        check_plan(&topo, &placement, &tokens, &plan);
        assert_eq!(dispatch_traffic(&plan, 7), recount(&plan, 7));
    }
}
