//! Consistency-score oracle equivalence.
//!
//! The oracle below is a deliberately line-by-line transcription of the
//! consistency-score procedure, written independently of the library path
//! (own KL, own mean/stdev, own neighbor walk over external ids). The
//! library implementation must agree within 1e-9 on random graphs,
//! including every degenerate-sigma case.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tiger_core::graph::{Delta, Edge, NodeAttributes, NodeId, TemporalGraph, View};
use tiger_core::shortterm::{self, LatentMatrix, ShortTermConfig};
use tiger_core::Tensor;

fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    let eps = 1e-12;
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = if a < eps { eps } else { a };
            let b = if b < eps { eps } else { b };
            a * (a / b).ln()
        })
        .sum()
}

fn oracle_endpoint_z(
    g: &TemporalGraph,
    latent: &[Vec<f64>],
    i: NodeId,
    j: NodeId,
    exclude: bool,
) -> f64 {
    let li = &latent[g.node_index(i).unwrap() as usize];
    let mut ks: Vec<f64> = Vec::new();
    for vk in g.neighbors(i, View::Unpurified).unwrap() {
        if exclude && vk == j {
            continue;
        }
        ks.push(oracle_kl(li, &latent[g.node_index(vk).unwrap() as usize]));
    }
    if ks.is_empty() {
        return 0.0;
    }
    let mu = ks.iter().sum::<f64>() / ks.len() as f64;
    let sigma = (ks.iter().map(|k| (k - mu) * (k - mu)).sum::<f64>() / ks.len() as f64).sqrt();
    if sigma < 1e-12 {
        return 0.0;
    }
    let lj = &latent[g.node_index(j).unwrap() as usize];
    (oracle_kl(li, lj) - mu).abs() / sigma
}

fn oracle_consistency(
    g: &TemporalGraph,
    latent: &[Vec<f64>],
    i: NodeId,
    j: NodeId,
    exclude: bool,
) -> f64 {
    let zi = oracle_endpoint_z(g, latent, i, j, exclude);
    let zj = oracle_endpoint_z(g, latent, j, i, exclude);
    -(zi + zj) / 2.0
}

fn random_instance(seed: u64) -> (TemporalGraph, Vec<Vec<f64>>, Vec<Edge>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=30u64);
    let classes = rng.random_range(2..=4usize);
    let p_edge = rng.random_range(0.05..0.5f64);

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
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random_range(0.0..1.0) < p_edge {
                edges.push(Edge::new(u, v).unwrap());
            }
        }
    }
    g.apply_delta(&Delta {
        new_nodes: (0..n).collect(),
        new_edges: edges.clone(),
    })
    .unwrap();

    // Random rows; every fourth instance shares one row across all nodes
    // to force fully degenerate statistics.
    let degenerate = seed % 4 == 0;
    let shared: Vec<f64> = {
        let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    let latent: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            if degenerate {
                shared.clone()
            } else {
                let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            }
        })
        .collect();

    // Candidates: existing edges plus sampled non-edges.
    let mut candidates = edges;
    for _ in 0..10 {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            let e = Edge::new(a, b).unwrap();
            if !g.has_edge(&e, View::Unpurified) {
                candidates.push(e);
            }
        }
    }
    (g, latent, candidates)
}

#[test]
fn matches_literal_transcription_on_100_random_graphs() {
    let mut checked = 0usize;
    let mut degenerate_hit = 0usize;
    for seed in 0..100u64 {
        let (g, latent_rows, candidates) = random_instance(seed);
        let n = g.num_nodes();
        let c = latent_rows[0].len();
        let flat: Vec<f64> = latent_rows.iter().flatten().copied().collect();
        let latent = LatentMatrix::from_rows(Tensor::matrix(n, c, flat).unwrap());

        for exclude in [true, false] {
            let cfg = ShortTermConfig {
                exclude_candidate: exclude,
            };
            for e in &candidates {
                let (u, v) = e.endpoints();
                let want = oracle_consistency(&g, &latent_rows, u, v, exclude);
                let got =
                    shortterm::consistency_score(&g, e, &latent, View::Unpurified, &cfg).unwrap();
                assert!(
                    (got - want).abs() < 1e-9,
                    "seed {seed} edge {e}: {got} vs {want}"
                );
                if want == 0.0 {
                    degenerate_hit += 1;
                }
                checked += 1;
            }
        }
    }
    assert!(checked > 2000, "only {checked} comparisons ran");
    assert!(degenerate_hit > 50, "degenerate cases barely exercised");
}
