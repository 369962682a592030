//! Brute-force reference decoders and seeded inputs shared by the
//! integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random weight that is an exact multiple of 1/1024, so sums of a few of
/// them never round and weights compare exactly.
pub fn dyadic(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0..1024) as f64 / 1024.0
}

pub fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let w = dyadic(rng);
            m[(i, j)] = w;
            m[(j, i)] = w;
        }
    }
    m
}

pub fn random_square(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { dyadic(rng) })
}

/// Edges of the labeled tree encoded by a Prüfer sequence over `0..n`.
pub fn prufer_edges(seq: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut degree = vec![1usize; n];
    for &v in seq {
        degree[v] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &v in seq {
        let leaf = (0..n).find(|&u| degree[u] == 1).expect("a leaf exists");
        edges.push((leaf.min(v), leaf.max(v)));
        degree[leaf] -= 1;
        degree[v] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&u| degree[u] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges
}

/// Every spanning tree of the complete graph on `n` vertices (n ≥ 2).
pub fn all_spanning_trees(n: usize) -> Vec<Vec<(usize, usize)>> {
    if n == 2 {
        return vec![vec![(0, 1)]];
    }
    let len = n - 2;
    let total = n.pow(len as u32);
    (0..total)
        .map(|mut code| {
            let seq: Vec<usize> = (0..len)
                .map(|_| {
                    let d = code % n;
                    code /= n;
                    d
                })
                .collect();
            prufer_edges(&seq, n)
        })
        .collect()
}

/// Weight of the maximum spanning tree by enumeration.
pub fn brute_mst_weight(m: &Array2<f64>, trees: &[Vec<(usize, usize)>]) -> f64 {
    trees
        .iter()
        .map(|t| t.iter().map(|&(a, b)| m[(a, b)]).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
}

fn reaches_root(heads: &[Option<usize>], mut v: usize) -> bool {
    for _ in 0..heads.len() {
        match heads[v] {
            None => return true,
            Some(h) => v = h,
        }
    }
    false
}

/// Weight of the maximum arborescence rooted at `root` (arc `h → d` scored
/// by `m[(h, d)]`), by trying every parent assignment.
pub fn brute_arborescence_weight(m: &Array2<f64>, root: usize) -> f64 {
    let n = m.nrows();
    let others: Vec<usize> = (0..n).filter(|&v| v != root).collect();
    let choices = n - 1;
    let total = choices.pow(others.len() as u32);
    let mut best = f64::NEG_INFINITY;
    for mut code in 0..total {
        let mut heads = vec![None; n];
        for &d in &others {
            let c = code % choices;
            code /= choices;
            // parent among all words except d itself
            heads[d] = Some(if c >= d { c + 1 } else { c });
        }
        if others.iter().all(|&d| reaches_root(&heads, d)) {
            let w: f64 = others.iter().map(|&d| m[(heads[d].unwrap(), d)]).sum();
            best = best.max(w);
        }
    }
    best
}

/// Heads of a random tree over `0..n` rooted at `root`.
pub fn random_heads(n: usize, rng: &mut ChaCha8Rng) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    let mut heads = vec![None; n];
    for i in 1..n {
        heads[order[i]] = Some(order[rng.random_range(0..i)]);
    }
    heads
}
