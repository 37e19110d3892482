mod common;

use proptest::prelude::*;
use common::check_invariants;
use tgmm_core::graphpart::{expand_one_hop, partition, partition_stats, SensorGraph};

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn random_geometric_partitions_hold_invariants(seed in 0u64..1_000_000, n in 20usize..=200, p in 2usize..=20, deg in 3.0f64..8.0) {
        let g = SensorGraph::random_geometric(n, deg, seed);
        let part = expand_one_hop(&partition(&g, p, 0.1, seed).unwrap(), &g);
        prop_assert!(check_invariants(&g, &part, p).is_ok(), "{:?}", check_invariants(&g, &part, p));
        prop_assert!(part.validate(&g).is_ok());
    }
}

#[test]
fn sixty_nodes_six_patches_over_100_seeds() {
    for seed in 0..100 {
        let g = SensorGraph::random_geometric(60, 4.0, seed);
        let part = expand_one_hop(&partition(&g, 6, 0.1, seed).unwrap(), &g);
        if let Err(e) = check_invariants(&g, &part, 6) {
            panic!("seed {seed}: {e}");
        }
    }
}

#[test]
fn mean_membership_on_degree_six_graph_is_small() {
    for seed in 0..5 {
        let g = SensorGraph::random_geometric(200, 6.0, seed);
        assert!((g.mean_degree() - 6.0).abs() < 1.0, "mean degree {}", g.mean_degree());
        let part = expand_one_hop(&partition(&g, 12, 0.1, seed).unwrap(), &g);
        let stats = partition_stats(&part, &g);
        let mean_core: f64 = 200.0 / 12.0;
        assert!((mean_core - 16.0).abs() < 1.0);
        assert!(stats.mean_membership <= 10.0, "seed {seed}: {}", stats.mean_membership);
        assert!(stats.mean_membership >= 1.0);

        let part20 = expand_one_hop(&partition(&g, 20, 0.1, seed).unwrap(), &g);
        assert!(partition_stats(&part20, &g).mean_membership <= 10.0);
    }
}

#[test]
fn partition_is_deterministic_per_seed() {
    let g = SensorGraph::random_geometric(80, 5.0, 3);
    let a = partition(&g, 5, 0.1, 11).unwrap();
    let b = partition(&g, 5, 0.1, 11).unwrap();
    assert_eq!(a, b);
}

#[test]
fn grid_bisection_cut_is_within_twice_optimal() {
    // the best balanced bisection of a 10 x 10 grid cuts 10 edges; a random
    // balanced split cuts about 90
    let g = SensorGraph::grid(10, 10);
    for seed in 0..4 {
        let part = partition(&g, 2, 0.0, seed).unwrap();
        assert!(part.edge_cut(&g) <= 20, "seed {seed}: edge cut {}", part.edge_cut(&g));
    }
}
