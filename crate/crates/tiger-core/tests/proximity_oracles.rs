//! Hand-computed values and brute-force set oracles for the proximity
//! scores, plus reconstruction checks for the truncated SVD.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tiger_core::graph::{Delta, Edge, NodeAttributes, NodeId, TemporalGraph, View};
use tiger_core::proximity::{self, BaselineMethod};
use tiger_core::Error;

fn graph(edges: &[(u64, u64)], n: u64) -> TemporalGraph {
    let attrs: BTreeMap<NodeId, NodeAttributes> = (0..n)
        .map(|id| {
            (
                id,
                NodeAttributes {
                    features: vec![0.0],
                    label: None,
                },
            )
        })
        .collect();
    let mut g = TemporalGraph::new(1, attrs).unwrap();
    g.apply_delta(&Delta {
        new_nodes: (0..n).collect(),
        new_edges: edges
            .iter()
            .map(|&(a, b)| Edge::new(a, b).unwrap())
            .collect(),
    })
    .unwrap();
    g
}

#[test]
fn adamic_adar_hand_values() {
    // Path 0-1, 2 isolated from both: no common neighbors anywhere.
    let g = graph(&[(0, 1)], 3);
    assert_eq!(
        proximity::adamic_adar(&g, 0, 2, View::Unpurified).unwrap(),
        0.0
    );

    // a=0, b=1, c=2, d=3 with edges a-c, b-c, a-d, b-d: two common
    // neighbors of degree 2 each.
    let g = graph(&[(0, 2), (1, 2), (0, 3), (1, 3)], 4);
    let aa = proximity::adamic_adar(&g, 0, 1, View::Unpurified).unwrap();
    let want = 2.0 / 2.0f64.ln();
    assert!((aa - want).abs() < 1e-12);
    assert!((aa - 2.8854).abs() < 1e-4);

    // Star: leaves 1 and 2 share only the center of degree 4.
    let g = graph(&[(0, 1), (0, 2), (0, 3), (0, 4)], 5);
    let aa = proximity::adamic_adar(&g, 1, 2, View::Unpurified).unwrap();
    assert!((aa - 1.0 / 4.0f64.ln()).abs() < 1e-12);
}

#[test]
fn jaccard_hand_values() {
    let g = graph(&[(0, 2), (1, 2), (0, 3), (1, 3)], 4);
    assert_eq!(proximity::jaccard(&g, 0, 1, View::Unpurified).unwrap(), 1.0);

    // Disjoint neighborhoods.
    let g = graph(&[(0, 2), (1, 3)], 4);
    assert_eq!(proximity::jaccard(&g, 0, 1, View::Unpurified).unwrap(), 0.0);

    // Adjacent pair: each other excluded from the union.
    let g = graph(&[(0, 1), (0, 2), (1, 2)], 3);
    assert_eq!(proximity::jaccard(&g, 0, 1, View::Unpurified).unwrap(), 1.0);
}

#[test]
fn local_scores_match_brute_force_sets_on_random_graphs() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let n = rng.random_range(3..=40u64);
        let p = rng.random_range(0.05..0.4f64);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.random_range(0.0..1.0) < p {
                    edges.push((u, v));
                }
            }
        }
        let g = graph(&edges, n);

        let neigh = |x: u64| -> BTreeSet<u64> {
            g.neighbors(x, View::Unpurified).unwrap().into_iter().collect()
        };
        for _ in 0..30 {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a == b {
                continue;
            }
            let (na, nb) = (neigh(a), neigh(b));
            let common: BTreeSet<u64> = na.intersection(&nb).copied().collect();
            let want_aa: f64 = common
                .iter()
                .map(|&w| 1.0 / (neigh(w).len() as f64).ln())
                .sum();
            let got_aa = proximity::adamic_adar(&g, a, b, View::Unpurified).unwrap();
            assert_eq!(got_aa, want_aa, "seed {seed} pair ({a},{b})");

            let strip = |s: &BTreeSet<u64>| -> BTreeSet<u64> {
                s.iter().copied().filter(|&w| w != a && w != b).collect()
            };
            let (sa, sb) = (strip(&na), strip(&nb));
            let inter = sa.intersection(&sb).count();
            let union = sa.union(&sb).count();
            let want_j = if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            };
            let got_j = proximity::jaccard(&g, a, b, View::Unpurified).unwrap();
            assert_eq!(got_j, want_j, "seed {seed} pair ({a},{b})");
        }
    }
}

#[test]
fn scores_are_symmetric_and_bounded() {
    let g = graph(&[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)], 4);
    for a in 0..4u64 {
        for b in (a + 1)..4 {
            let aa1 = proximity::adamic_adar(&g, a, b, View::Unpurified).unwrap();
            let aa2 = proximity::adamic_adar(&g, b, a, View::Unpurified).unwrap();
            assert_eq!(aa1, aa2);
            assert!(aa1 >= 0.0);
            let j1 = proximity::jaccard(&g, a, b, View::Unpurified).unwrap();
            let j2 = proximity::jaccard(&g, b, a, View::Unpurified).unwrap();
            assert_eq!(j1, j2);
            assert!((0.0..=1.0).contains(&j1));
        }
    }
}

#[test]
fn full_rank_svd_reconstructs_the_adjacency() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let n = rng.random_range(4..=20u64);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.random_range(0.0..1.0) < 0.3 {
                    edges.push((u, v));
                }
            }
        }
        if edges.is_empty() {
            edges.push((0, 1));
        }
        let g = graph(&edges, n);
        let mut candidates = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                candidates.push(Edge::new(u, v).unwrap());
            }
        }
        let scores =
            proximity::svd_scores(&g, &candidates, n as usize, View::Unpurified).unwrap();
        for (e, s) in candidates.iter().zip(&scores) {
            let truth = if g.has_edge(e, View::Unpurified) {
                1.0
            } else {
                0.0
            };
            assert!(
                (s - truth).abs() < 1e-6,
                "seed {seed} edge {e}: {s} vs {truth}"
            );
        }
    }
}

#[test]
fn rank_one_prefers_the_dominant_block() {
    // A 6-clique and a 4-clique joined by one cross edge: the leading
    // eigenvector concentrates on the big clique.
    let mut edges = Vec::new();
    for u in 0..6u64 {
        for v in (u + 1)..6 {
            edges.push((u, v));
        }
    }
    for u in 6..10u64 {
        for v in (u + 1)..10 {
            edges.push((u, v));
        }
    }
    edges.push((0, 6));
    let g = graph(&edges, 10);
    let cands = vec![Edge::new(1, 2).unwrap(), Edge::new(2, 7).unwrap()];
    let scores = proximity::svd_scores(&g, &cands, 1, View::Unpurified).unwrap();
    assert!(
        scores[0] > scores[1],
        "within-block {} should beat cross-block {}",
        scores[0],
        scores[1]
    );
}

#[test]
fn svd_edge_cases() {
    let g = graph(&[], 5);
    let cands = vec![Edge::new(0, 1).unwrap()];
    let scores = proximity::svd_scores(&g, &cands, 3, View::Unpurified).unwrap();
    assert_eq!(scores, vec![0.0]);

    let g = graph(&[(0, 1)], 3);
    assert!(matches!(
        proximity::svd_scores(&g, &cands, 0, View::Unpurified),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        proximity::svd_scores(&g, &cands, 9, View::Unpurified),
        Err(Error::Config(_))
    ));
}

#[test]
fn baseline_purify_contract() {
    let g = graph(&[(0, 2), (1, 2), (0, 3), (1, 3), (0, 1), (2, 3)], 4);
    let candidates = vec![
        Edge::new(0, 1).unwrap(),
        Edge::new(2, 3).unwrap(),
        Edge::new(0, 2).unwrap(),
    ];

    let none = proximity::baseline_purify(
        &g,
        &candidates,
        0,
        BaselineMethod::Jaccard,
        View::Unpurified,
        1,
    )
    .unwrap();
    assert!(none.is_empty());

    assert!(matches!(
        proximity::baseline_purify(
            &g,
            &candidates,
            4,
            BaselineMethod::Jaccard,
            View::Unpurified,
            1
        ),
        Err(Error::Config(_))
    ));

    // Order independence: reversing candidates keeps the removed set.
    let k = 2;
    for method in [
        BaselineMethod::Jaccard,
        BaselineMethod::AdamicAdar,
        BaselineMethod::Svd { rank: 2 },
        BaselineMethod::Random,
    ] {
        let fwd =
            proximity::baseline_purify(&g, &candidates, k, method, View::Unpurified, 7).unwrap();
        let mut rev_c = candidates.clone();
        rev_c.reverse();
        let rev =
            proximity::baseline_purify(&g, &rev_c, k, method, View::Unpurified, 7).unwrap();
        assert_eq!(fwd, rev, "{method:?}");
        assert_eq!(fwd.len(), k);
        for e in &fwd {
            assert!(candidates.contains(e));
        }
    }
}

#[test]
fn bottom_k_breaks_ties_canonically() {
    let candidates = vec![
        Edge::new(5, 6).unwrap(),
        Edge::new(0, 1).unwrap(),
        Edge::new(2, 3).unwrap(),
    ];
    let scores = vec![0.5, 0.5, 0.9];
    let picked = proximity::bottom_k(&candidates, &scores, 1);
    assert_eq!(picked, vec![Edge::new(0, 1).unwrap()]);
}
