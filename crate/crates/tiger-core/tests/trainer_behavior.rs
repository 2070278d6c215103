//! Trainer contracts: negative sampling, positive filtering, the
//! closed-form loss value, determinism, and score separation on a
//! planted-noise toy graph.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tiger_core::ensemble::WeightMlpParams;
use tiger_core::gcn::GcnParams;
use tiger_core::graph::{Delta, Edge, NodeAttributes, NodeId, TemporalGraph, View};
use tiger_core::longterm::{AttentionParams, BilinearParams, EmbeddingMemory};
use tiger_core::optim::Adam;
use tiger_core::trainer::{
    self, PurifierModel, PurifierParams, TigerConfig, filter_positives, sample_negatives,
};
use tiger_core::{Error, Tensor};

fn graph_from(features: &[(NodeId, Vec<f64>, Option<u32>)], edges: &[(u64, u64)]) -> TemporalGraph {
    let dim = features[0].1.len();
    let attrs: BTreeMap<NodeId, NodeAttributes> = features
        .iter()
        .map(|(id, f, l)| {
            (
                *id,
                NodeAttributes {
                    features: f.clone(),
                    label: *l,
                },
            )
        })
        .collect();
    let mut g = TemporalGraph::new(dim, attrs).unwrap();
    g.apply_delta(&Delta {
        new_nodes: features.iter().map(|(id, _, _)| *id).collect(),
        new_edges: edges
            .iter()
            .map(|&(a, b)| Edge::new(a, b).unwrap())
            .collect(),
    })
    .unwrap();
    g
}

fn plain_nodes(n: u64, dim: usize) -> Vec<(NodeId, Vec<f64>, Option<u32>)> {
    (0..n).map(|id| (id, vec![0.1 * id as f64; dim], None)).collect()
}

#[test]
fn sampling_errors_and_exhaustive_draw() {
    // Complete graph: no non-edges.
    let nodes = plain_nodes(4, 1);
    let g = graph_from(
        &nodes,
        &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(matches!(
        sample_negatives(&g, 1, View::Unpurified, &mut rng),
        Err(Error::Config(_))
    ));

    // Zero draws.
    assert!(sample_negatives(&g, 0, View::Unpurified, &mut rng)
        .unwrap()
        .is_empty());

    // Empty 10-node graph: asking for all 45 pairs yields each exactly once.
    let nodes = plain_nodes(10, 1);
    let g = graph_from(&nodes, &[]);
    let drawn = sample_negatives(&g, 45, View::Unpurified, &mut rng).unwrap();
    assert_eq!(drawn.len(), 45);
    let distinct: BTreeSet<Edge> = drawn.iter().copied().collect();
    assert_eq!(distinct.len(), 45);
}

#[test]
fn negative_sampling_is_deterministic_and_avoids_edges() {
    let nodes = plain_nodes(12, 1);
    let g = graph_from(&nodes, &[(0, 1), (1, 2), (2, 3), (4, 5)]);
    let draw = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_negatives(&g, 20, View::Unpurified, &mut rng).unwrap()
    };
    assert_eq!(draw(9), draw(9));
    for e in draw(9) {
        assert!(!g.has_edge(&e, View::Unpurified));
    }
}

#[test]
fn positive_filtering_keeps_the_top_fraction() {
    let edges: Vec<Edge> = (0..10u64).map(|k| Edge::new(2 * k, 2 * k + 1).unwrap()).collect();

    // beta = 1 keeps everything.
    let scores: Vec<f64> = (0..10).map(|k| k as f64 / 10.0).collect();
    assert_eq!(filter_positives(&edges, &scores, 1.0), edges);

    // beta = 0.5 over two edges keeps the higher-scoring one.
    let two = vec![edges[0], edges[1]];
    let kept = filter_positives(&two, &[0.9, 0.1], 0.5);
    assert_eq!(kept, vec![edges[0]]);

    // beta = 0.3 over 10 distinct scores keeps exactly the top 3, the
    // same set a full sort picks.
    let kept = filter_positives(&edges, &scores, 0.3);
    let mut by_score: Vec<usize> = (0..10).collect();
    by_score.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let want: BTreeSet<Edge> = by_score[..3].iter().map(|&i| edges[i]).collect();
    assert_eq!(kept.len(), 3);
    assert_eq!(kept.iter().copied().collect::<BTreeSet<_>>(), want);

    // Ties break toward canonical edge order.
    let kept = filter_positives(&edges[..3], &[0.5, 0.5, 0.5], 0.34);
    assert_eq!(kept, vec![edges[0], edges[1]]);
}

fn zero_params(feature_dim: usize, hidden: usize, classes: usize) -> PurifierParams {
    PurifierParams {
        encoder: GcnParams {
            w1: Tensor::zeros(&[feature_dim, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, hidden]),
            b2: Tensor::zeros(&[hidden]),
        },
        attention: AttentionParams {
            w_q: Tensor::zeros(&[hidden, hidden]),
            w_k: Tensor::zeros(&[hidden, hidden]),
            w_v: Tensor::zeros(&[hidden, hidden]),
        },
        bilinear: BilinearParams {
            raw: Tensor::zeros(&[hidden, hidden]),
            bias: Tensor::zeros(&[1]),
        },
        mlp_long: WeightMlpParams {
            w1: Tensor::zeros(&[2 * hidden, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, 1]),
            b2: Tensor::zeros(&[1]),
        },
        mlp_short: WeightMlpParams {
            w1: Tensor::zeros(&[2 * classes, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, 1]),
            b2: Tensor::zeros(&[1]),
        },
    }
}

#[test]
fn uniform_half_scores_give_twice_ln_two() {
    // A perfect matching has no common neighbors anywhere, so every
    // proximity score is 0 and min-max normalization goes neutral; zero
    // parameters force S_L = 1/2. Every pair then scores exactly 1/2 and
    // the two-term loss is 2 ln 2.
    let nodes = plain_nodes(8, 2);
    let g = graph_from(&nodes, &[(0, 1), (2, 3), (4, 5), (6, 7)]);
    let mut model = PurifierModel {
        params: zero_params(2, 4, 1),
        memory: EmbeddingMemory::new(None),
        optimizer: Adam::new(1e-3),
    };
    let cfg = TigerConfig {
        hidden: 4,
        epochs: 1,
        ..TigerConfig::default()
    };
    let trace = trainer::train_step(&mut model, &g, None, &cfg, 5, 1).unwrap();
    let want = 2.0 * std::f64::consts::LN_2;
    assert!(
        (trace.losses[0] - want).abs() < 1e-9,
        "loss {} vs {want}",
        trace.losses[0]
    );
}

#[test]
fn training_is_bitwise_deterministic() {
    let nodes: Vec<_> = (0..14u64)
        .map(|id| {
            let c = if id < 7 { 1.0 } else { -1.0 };
            (id, vec![c, 0.3 * (id % 3) as f64], None)
        })
        .collect();
    let edges = [
        (0, 1),
        (1, 2),
        (2, 3),
        (3, 4),
        (4, 5),
        (5, 6),
        (7, 8),
        (8, 9),
        (9, 10),
        (10, 11),
        (11, 12),
        (12, 13),
        (0, 7),
    ];
    let run = || {
        let g = graph_from(&nodes, &edges);
        let cfg = TigerConfig {
            hidden: 8,
            epochs: 12,
            ..TigerConfig::default()
        };
        let mut model = PurifierModel::init(2, 0, &cfg, 77);
        let h = trainer::embed(&model.params, &g, View::Purified).unwrap();
        model.memory.push_matrix(&h);
        trainer::train_step(&mut model, &g, None, &cfg, 77, 2).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.epochs_run, b.epochs_run);
}

#[test]
fn training_separates_planted_noise_scores() {
    // Two feature-separated communities, three planted cross edges.
    let mut nodes = Vec::new();
    for id in 0..16u64 {
        let c = if id < 8 { 0 } else { 1 };
        let f = if c == 0 { vec![1.5, 0.0] } else { vec![0.0, 1.5] };
        nodes.push((id, f, Some(c as u32)));
    }
    let mut edges = Vec::new();
    for base in [0u64, 8] {
        for k in 0..8u64 {
            edges.push((base + k, base + (k + 1) % 8));
            edges.push((base + k, base + (k + 2) % 8));
        }
    }
    let noise = [(0u64, 9u64), (2, 11), (5, 14)];
    edges.extend_from_slice(&noise);
    let g = graph_from(&nodes, &edges);

    let cfg = TigerConfig {
        hidden: 8,
        epochs: 50,
        ..TigerConfig::default()
    };
    let mut model = PurifierModel::init(2, 2, &cfg, 3);
    let h = trainer::embed(&model.params, &g, View::Purified).unwrap();
    model.memory.push_matrix(&h);

    let all_edges: Vec<Edge> = edges
        .iter()
        .map(|&(a, b)| Edge::new(a, b).unwrap())
        .collect();
    let noise_set: BTreeSet<Edge> = noise.iter().map(|&(a, b)| Edge::new(a, b).unwrap()).collect();
    let gap = |params: &PurifierParams, memory: &EmbeddingMemory| {
        let scored =
            trainer::score_candidates(params, memory, &g, None, &all_edges, &cfg).unwrap();
        let (mut clean, mut noisy) = (Vec::new(), Vec::new());
        for s in scored {
            if noise_set.contains(&s.edge) {
                noisy.push(s.score);
            } else {
                clean.push(s.score);
            }
        }
        clean.iter().sum::<f64>() / clean.len() as f64
            - noisy.iter().sum::<f64>() / noisy.len() as f64
    };

    let before = gap(&model.params, &model.memory);
    trainer::train_step(&mut model, &g, None, &cfg, 3, 1).unwrap();
    let after = gap(&model.params, &model.memory);
    assert!(
        after > before,
        "separation should grow: before {before}, after {after}"
    );
    assert!(after > 0.0, "trained model should favor clean edges: {after}");
}

#[test]
fn ablations_and_short_term_path_run() {
    let mut nodes = Vec::new();
    for id in 0..10u64 {
        nodes.push((id, vec![id as f64 * 0.2, 1.0], Some((id % 2) as u32)));
    }
    let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (5, 6), (6, 7), (8, 9), (0, 5)];
    let g = graph_from(&nodes, &edges);
    let logits = Tensor::matrix(
        10,
        2,
        (0..20).map(|i| if i % 2 == 0 { 0.3 } else { -0.4 }).collect(),
    )
    .unwrap();
    let latent = tiger_core::shortterm::LatentMatrix::from_logits(&logits).unwrap();

    for (no_attn, no_short) in [(false, false), (true, false), (false, true), (true, true)] {
        let cfg = TigerConfig {
            hidden: 6,
            epochs: 3,
            no_attention: no_attn,
            no_short_term: no_short,
            ..TigerConfig::default()
        };
        let mut model = PurifierModel::init(2, 2, &cfg, 11);
        let h = trainer::embed(&model.params, &g, View::Purified).unwrap();
        model.memory.push_matrix(&h);
        let trace = trainer::train_step(&mut model, &g, Some(&latent), &cfg, 11, 2).unwrap();
        assert_eq!(trace.epochs_run, 3);
        assert!(trace.losses.iter().all(|l| l.is_finite()));

        let cands = vec![Edge::new(0, 5).unwrap(), Edge::new(2, 3).unwrap()];
        let scored = trainer::score_candidates(
            &model.params,
            &model.memory,
            &g,
            Some(&latent),
            &cands,
            &cfg,
        )
        .unwrap();
        assert_eq!(scored.len(), 2);
        for s in &scored {
            assert!((0.0..=1.0).contains(&s.score));
            assert_eq!(s.s_short.is_some(), !no_short);
            let wsum = s.weight_long + s.weight_short.unwrap_or(0.0) + s.weight_prox;
            assert!((wsum - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn positives_cap_limits_the_batch() {
    let nodes = plain_nodes(10, 1);
    let g = graph_from(
        &nodes,
        &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (7, 8), (8, 9)],
    );
    let cfg = TigerConfig {
        hidden: 4,
        epochs: 2,
        positives_cap: Some(4),
        ..TigerConfig::default()
    };
    let mut model = PurifierModel::init(1, 0, &cfg, 5);
    let trace = trainer::train_step(&mut model, &g, None, &cfg, 5, 1).unwrap();
    assert_eq!(trace.positives, 9);
    assert!(trace.losses.iter().all(|l| l.is_finite()));
}
