use proptest::prelude::*;
use tgmm_core::datapipe::*;
use tgmm_core::graphpart::SensorGraph;
use tgmm_core::numcore::rng;

use rand::Rng;

fn mso(nodes: usize, steps: usize, seed: u64) -> SpatioTemporalDataset {
    let mut cfg = MsoConfig {
        steps,
        seed,
        ..Default::default()
    };
    cfg.graph.nodes = nodes;
    cfg.graph.seed = seed;
    generate_mso(&cfg).unwrap()
}

fn mean_edge_gap(g: &SensorGraph, field: &[f64], k: usize) -> f64 {
    let total: f64 = g
        .edges()
        .iter()
        .map(|&(a, b)| (0..k).map(|j| (field[a * k + j] - field[b * k + j]).abs()).sum::<f64>())
        .sum();
    total / (g.num_edges() * k) as f64
}

#[test]
fn smoothing_reduces_edge_differences() {
    for seed in 0..50 {
        let g = SensorGraph::random_geometric(30, 4.0, seed);
        if g.num_edges() == 0 {
            continue;
        }
        let k = 3;
        let mut r = rng::stream(seed, "field", 0);
        let field: Vec<f64> = (0..30 * k).map(|_| r.random_range(0.0..2.0)).collect();
        let smooth = smooth_over_graph(&g, &field, k, 3);
        assert!(
            mean_edge_gap(&g, &smooth, k) < mean_edge_gap(&g, &field, k),
            "seed {seed}"
        );
    }
}

#[test]
fn split_boundaries_follow_floor_arithmetic() {
    for t in [10usize, 11, 57, 100, 1000, 1234] {
        let s = chronological_split(t).unwrap();
        assert_eq!(s.train, 0..7 * t / 10);
        assert_eq!(s.val, 7 * t / 10..8 * t / 10);
        assert_eq!(s.test, 8 * t / 10..t);
    }
    assert!(chronological_split(9).is_err());
}

#[test]
fn stride_equal_to_range_gives_at_most_one_window() {
    let ds = mso(4, 200, 1);
    let prep = Prepared::new(&ds).unwrap();
    let w = make_windows(&prep, 0..10, 3, 2, 10).unwrap();
    assert_eq!(w.len(), 1);
    assert_eq!(make_windows(&prep, 0..10, 3, 2, 1).unwrap().len(), 6);
    assert_eq!(make_windows(&prep, 0..4, 3, 2, 4).unwrap().len(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 50, ..ProptestConfig::default() })]

    #[test]
    fn train_mask_is_subset_of_eval_mask(seed in 0u64..10_000, kind in 0usize..3) {
        let ds = mso(10, 200, seed);
        let hidden = match kind {
            0 => inject_point(&ds, 0.2, seed).unwrap(),
            1 => inject_block_t(&ds, 20.0, (5, 15), seed).unwrap(),
            _ => inject_block_st(&ds, 4, 1, (5, 15), seed).unwrap(),
        };
        let prep = Prepared::new(&hidden).unwrap();
        for split in Split::ALL {
            for s in split_windows(&prep, split, 6, 4, 3).unwrap() {
                for (tm, em) in s.train_mask.data().iter().zip(s.eval_mask.data()) {
                    prop_assert!(*tm <= *em);
                }
            }
        }
    }

    #[test]
    fn normalizer_round_trips(seed in 0u64..10_000, z in -50.0f64..50.0) {
        let ds = inject_point(&mso(6, 120, seed), 0.3, seed).unwrap();
        let split = chronological_split(ds.num_timesteps).unwrap();
        let norm = Normalizer::fit(&ds, split.train);
        for node in 0..ds.num_nodes {
            let x = norm.invert(node, 0, z);
            prop_assert!((norm.apply(node, 0, x) - z).abs() < 1e-9 * (1.0 + z.abs()));
            prop_assert!(norm.std[node] > 0.0);
        }
    }

    #[test]
    fn normalizer_ignores_values_outside_train_or_unobserved(seed in 0u64..10_000, junk in -1e6f64..1e6) {
        let ds = inject_point(&mso(5, 100, seed), 0.3, seed).unwrap();
        let split = chronological_split(ds.num_timesteps).unwrap();
        let base = Normalizer::fit(&ds, split.train.clone());
        let mut other = ds.clone();
        for i in 0..other.len() {
            let t = (i / other.num_channels) % other.num_timesteps;
            if !other.mask[i] || t >= split.train.end {
                other.values[i] = junk;
            }
        }
        let again = Normalizer::fit(&other, split.train);
        prop_assert_eq!(base, again);
    }

    #[test]
    fn imputation_never_changes_observed_entries(seed in 0u64..10_000, p in 0.0f64..1.0) {
        let mut r = rng::stream(seed, "series", 0);
        let values: Vec<f64> = (0..40).map(|_| r.random_range(-3.0..3.0)).collect();
        let observed: Vec<bool> = (0..40).map(|_| r.random::<f64>() >= p).collect();
        let out = impute_series(&values, &observed);
        let mut last = 0.0;
        for i in 0..40 {
            if observed[i] {
                prop_assert_eq!(out[i].to_bits(), values[i].to_bits());
                last = values[i];
            } else {
                prop_assert_eq!(out[i].to_bits(), (last as f64).to_bits());
            }
        }
    }
}

#[test]
fn dataset_directory_round_trip_after_injection() {
    let ds = inject_block_st(&mso(12, 150, 4), 3, 1, (5, 10), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &ds).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.mask, ds.mask);
    assert_eq!(back.eval_truth, ds.eval_truth);
    assert_eq!(back.graph, ds.graph);
    for (a, b) in ds.values.iter().zip(&back.values) {
        assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
    }
}
