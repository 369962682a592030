mod common;

use ndarray::array;

use dsm_core::induction::{chu_liu_edmonds, prim_mst, ScoreMatrix};

// Sums of optimal weights, in units of 1/1024, over seeded batches.
const FROZEN_MST_UNITS: u64 = 204019;
const FROZEN_ARBORESCENCE_UNITS: u64 = 156716;

#[test]
fn enumeration_yields_cayley_many_distinct_trees() {
    for n in 2..=6 {
        let trees = common::all_spanning_trees(n);
        assert_eq!(trees.len(), n.pow(n as u32 - 2));
        let distinct: std::collections::BTreeSet<Vec<(usize, usize)>> = trees
            .into_iter()
            .map(|mut t| {
                t.sort_unstable();
                t
            })
            .collect();
        assert_eq!(distinct.len(), n.pow(n as u32 - 2), "n = {n}");
    }
}

#[test]
fn prufer_decoding_by_hand() {
    // sequence [3, 3] on 4 vertices is the star centred at 3
    assert_eq!(common::prufer_edges(&[3, 3], 4), vec![(0, 3), (1, 3), (2, 3)]);
    assert_eq!(common::prufer_edges(&[1, 2], 4), vec![(0, 1), (1, 2), (2, 3)]);
}

#[test]
fn brute_force_by_hand() {
    let m = array![[0.0, 0.5, 0.25], [0.5, 0.0, 0.75], [0.25, 0.75, 0.0]];
    assert_eq!(common::brute_mst_weight(&m, &common::all_spanning_trees(3)), 1.25);
    // 0 → 1 (0.5) then 1 → 2 (0.75) beats 0 → 2 → 1
    let d = array![[0.0, 0.5, 0.25], [0.0, 0.0, 0.75], [0.0, 0.125, 0.0]];
    assert_eq!(common::brute_arborescence_weight(&d, 0), 1.25);
    // rooted at 2: 2 → 0 → 1 scores 0 + 0.5, more than 2 → 1 → 0
    assert_eq!(common::brute_arborescence_weight(&d, 2), 0.5);
}

#[test]
fn frozen_mst_weights() {
    let mut rng = common::rng(2024);
    let trees = common::all_spanning_trees(6);
    let mut units = 0u64;
    for _ in 0..50 {
        let m = common::random_symmetric(6, &mut rng);
        let brute = common::brute_mst_weight(&m, &trees);
        let s = ScoreMatrix::symmetric(m).unwrap();
        assert_eq!(prim_mst(&s).unwrap().weight(&s), brute);
        units += (brute * 1024.0) as u64;
    }
    assert_eq!(units, FROZEN_MST_UNITS);
}

#[test]
fn frozen_arborescence_weights() {
    let mut rng = common::rng(2025);
    let mut units = 0u64;
    for i in 0..50 {
        let m = common::random_square(5, &mut rng);
        let root = i % 5;
        let brute = common::brute_arborescence_weight(&m, root);
        assert_eq!(chu_liu_edmonds(&m, root).unwrap().weight(&m), brute);
        units += (brute * 1024.0) as u64;
    }
    assert_eq!(units, FROZEN_ARBORESCENCE_UNITS);
}
