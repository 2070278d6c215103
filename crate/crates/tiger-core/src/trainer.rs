//! Self-supervised training of the purifier, and candidate scoring with
//! the trained model.
//!
//! Pseudo-labels per step: every surviving edge of the merged graph is a
//! positive, an equal number of uniformly sampled non-edges are negatives
//! (fresh draw every epoch). The lowest-scoring positives are filtered out
//! before the loss so suspected noise stops teaching the model:
//!
//! ```text
//! L = -mean over top-beta positives of ln S  -  mean over negatives of ln(1 - S)
//! ```
//!
//! One optimizer spans the encoder, attention, bilinear, and both weight
//! MLPs (single joint loss), and persists across time steps when the
//! model is warm-started.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;


use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AggregationWeights, Tape};
use crate::ensemble::{
    self, bind_mlp, minmax_normalize, MlpVars, ShortTermInputs, SubScores, WeightMlpParams,
};
use crate::error::{Error, Result};
use crate::gcn::{self, GcnParams, GcnVars};
use crate::graph::{Edge, TemporalGraph, View};
use crate::longterm::{
    bind_attention, bind_bilinear, fuse_all, AttentionParams, AttentionVars, BilinearParams,
    BilinearVars, EmbeddingMemory,
};
use crate::mathx;
use crate::optim::Adam;
use crate::proximity;
use crate::seed;
use crate::shortterm::{self, LatentMatrix, ShortTermConfig};
use crate::tensor::Tensor;

/// Every trainable parameter of the purifier.
#[derive(Clone, Debug)]
pub struct PurifierParams {
    pub encoder: GcnParams,
    pub attention: AttentionParams,
    pub bilinear: BilinearParams,
    pub mlp_long: WeightMlpParams,
    pub mlp_short: WeightMlpParams,
}

impl PurifierParams {
    /// Fresh parameters; the short-term weight MLP reads pair features of
    /// latent class distributions, so its input width is `2 * classes`.
    pub fn init(feature_dim: usize, hidden: usize, num_classes: usize, master_seed: u64) -> Self {
        let mut rng = seed::rng(master_seed, "purifier-init", 0);
        PurifierParams {
            encoder: GcnParams::init(feature_dim, hidden, hidden, &mut rng),
            attention: AttentionParams::init(hidden, &mut rng),
            bilinear: BilinearParams::init(hidden, &mut rng),
            mlp_long: WeightMlpParams::init(2 * hidden, hidden, &mut rng),
            mlp_short: WeightMlpParams::init(2 * num_classes.max(1), hidden, &mut rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Canonical tensor order, shared by the optimizer and checkpoints.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(17);
        out.extend(self.encoder.tensors());
        out.extend(self.attention.tensors());
        out.extend(self.bilinear.tensors());
        out.extend(self.mlp_long.tensors());
        out.extend(self.mlp_short.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(17);
        out.extend(self.encoder.tensors_mut());
        out.extend(self.attention.tensors_mut());
        out.extend(self.bilinear.tensors_mut());
        out.extend(self.mlp_long.tensors_mut());
        out.extend(self.mlp_short.tensors_mut());
        out
    }
}

/// Parameters plus the cross-step state they drag along: the embedding
/// memory and the optimizer moments.
pub struct PurifierModel {
    pub params: PurifierParams,
    pub memory: EmbeddingMemory,
    pub optimizer: Adam,
}

impl PurifierModel {
    pub fn init(
        feature_dim: usize,
        num_classes: usize,
        cfg: &TigerConfig,
        master_seed: u64,
    ) -> Self {
        PurifierModel {
            params: PurifierParams::init(feature_dim, cfg.hidden, num_classes, master_seed),
            memory: EmbeddingMemory::new(cfg.memory_cap),
            optimizer: Adam::new(cfg.lr),
        }
    }
}

/// Purifier hyperparameters and ablation switches.
#[derive(Clone, Debug)]
pub struct TigerConfig {
    /// Fraction of positives kept after score filtering.
    pub beta: f64,
    /// Shared proximity-weight logit.
    pub w_p: f64,
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    /// Cap on stored memory entries per node (None = unlimited).
    pub memory_cap: Option<usize>,
    /// Uniform subsample cap on positives per epoch (None = all edges).
    pub positives_cap: Option<usize>,
    /// Ablation: skip attention fusion, score raw encoder embeddings.
    pub no_attention: bool,
    /// Ablation: drop the short-term column from the ensemble.
    pub no_short_term: bool,
    /// Leave the candidate partner out of short-term reference stats.
    pub exclude_candidate: bool,
    /// Re-initialize parameters at every step instead of warm-starting.
    pub reinit_per_step: bool,
    pub early_stop_eps: f64,
    pub early_stop_patience: usize,
}

impl Default for TigerConfig {
    fn default() -> Self {
        TigerConfig {
            beta: 0.3,
            w_p: 5.0,
            epochs: 100,
            lr: 1e-3,
            hidden: 64,
            memory_cap: None,
            positives_cap: None,
            no_attention: false,
            no_short_term: false,
            exclude_candidate: true,
            reinit_per_step: false,
            early_stop_eps: 1e-5,
            early_stop_patience: 10,
        }
    }
}

impl TigerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config(format!(
                "beta must be in (0, 1], got {}",
                self.beta
            )));
        }
        if !self.w_p.is_finite() {
            return Err(Error::config("w_p must be finite"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden dimension must be positive"));
        }
        Ok(())
    }

    fn short_cfg(&self) -> ShortTermConfig {
        ShortTermConfig {
            exclude_candidate: self.exclude_candidate,
        }
    }
}

/// Uniform sample of `count` distinct non-adjacent unordered pairs of
/// appeared nodes, deterministic under the RNG.
pub fn sample_negatives(
    g: &TemporalGraph,
    count: usize,
    view: View,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Edge>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let n = g.num_nodes();
    let total_pairs = n * (n - 1) / 2;
    let non_edges = total_pairs - g.num_edges(view);
    if count > non_edges {
        return Err(Error::config(format!(
            "requested {count} negatives but only {non_edges} non-edges exist"
        )));
    }
    let mut pool: Vec<Edge> = Vec::with_capacity(non_edges);
    for i in 0..n as u32 {
        let adj = g.neighbors_internal(i, view);
        for j in (i + 1)..n as u32 {
            if !adj.contains(&j) {
                pool.push(
                    Edge::new(g.node_id(i), g.node_id(j)).expect("distinct internal indices"),
                );
            }
        }
    }
    Ok(rand::seq::index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|k| pool[k])
        .collect())
}

/// Indices of the `ceil(beta * len)` highest-scoring positives, ties
/// broken by canonical edge order.
pub fn filter_positive_indices(positives: &[Edge], scores: &[f64], beta: f64) -> Vec<usize> {
    let keep = mathx::ceil_pos(beta * positives.len() as f64).min(positives.len());
    let mut order: Vec<usize> = (0..positives.len()).collect();
    order.sort_by(|&x, &y| {
        scores[y]
            .partial_cmp(&scores[x])
            .expect("scores must be finite")
            .then(positives[x].cmp(&positives[y]))
    });
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept
}

/// The filtered positive set itself.
pub fn filter_positives(positives: &[Edge], scores: &[f64], beta: f64) -> Vec<Edge> {
    filter_positive_indices(positives, scores, beta)
        .into_iter()
        .map(|i| positives[i])
        .collect()
}

struct BoundVars {
    enc: GcnVars,
    att: AttentionVars,
    bil: BilinearVars,
    mlp_long: MlpVars,
    mlp_short: MlpVars,
}

fn bind_all(tape: &mut Tape, p: &PurifierParams) -> BoundVars {
    BoundVars {
        enc: gcn::bind(tape, &p.encoder),
        att: bind_attention(tape, &p.attention),
        bil: bind_bilinear(tape, &p.bilinear),
        mlp_long: bind_mlp(tape, &p.mlp_long),
        mlp_short: bind_mlp(tape, &p.mlp_short),
    }
}

/// Value-domain sub-score columns for a pair batch; min-max normalization
/// runs over exactly this batch.
struct PairColumns {
    s_prox_raw: Vec<f64>,
    s_prox_norm: Vec<f64>,
    s_short_raw: Option<Vec<f64>>,
    s_short_norm: Option<Vec<f64>>,
    latent_features: Option<Tensor>,
}

fn pair_columns(
    g: &TemporalGraph,
    latent: Option<&LatentMatrix>,
    pairs: &[Edge],
    view: View,
    cfg: &TigerConfig,
) -> Result<PairColumns> {
    let mut s_prox_raw = Vec::with_capacity(pairs.len());
    for e in pairs {
        let (u, v) = e.endpoints();
        s_prox_raw.push(proximity::adamic_adar(g, u, v, view)?);
    }
    let s_prox_norm = minmax_normalize(&s_prox_raw)?;

    let (s_short_raw, s_short_norm, latent_features) = match latent {
        Some(lat) if !cfg.no_short_term => {
            let raw = shortterm::score_short_batch(g, pairs, lat, view, &cfg.short_cfg())?;
            let norm = minmax_normalize(&raw)?;
            let c = lat.num_classes();
            let mut feats = Vec::with_capacity(pairs.len() * 2 * c);
            for e in pairs {
                let (u, v) = e.endpoints();
                let iu = g.node_index(u).expect("scored endpoints exist") as usize;
                let iv = g.node_index(v).expect("scored endpoints exist") as usize;
                feats.extend(ensemble::pair_features_rows(lat.row(iu), lat.row(iv)));
            }
            let features = Tensor::matrix(pairs.len(), 2 * c, feats)?;
            (Some(raw), Some(norm), Some(features))
        }
        _ => (None, None, None),
    };
    Ok(PairColumns {
        s_prox_raw,
        s_prox_norm,
        s_short_raw,
        s_short_norm,
        latent_features,
    })
}

/// Forward pass shared by training and scoring: encoder, optional
/// attention fusion, endpoint gathering, ensemble combination.
fn forward_scores(
    tape: &mut Tape,
    bound: &BoundVars,
    memory: &EmbeddingMemory,
    g: &TemporalGraph,
    agg: &Arc<AggregationWeights>,
    features: &Tensor,
    pairs: &[Edge],
    columns: &PairColumns,
    cfg: &TigerConfig,
) -> Result<ensemble::ScoredBatch> {
    let x = tape.constant(features.clone());
    let h = gcn::forward(tape, &bound.enc, agg, x)?;
    let z = if cfg.no_attention {
        h
    } else {
        fuse_all(tape, memory, h, &bound.att)?.z
    };
    let mut rows_i = Vec::with_capacity(pairs.len());
    let mut rows_j = Vec::with_capacity(pairs.len());
    for e in pairs {
        let (u, v) = e.endpoints();
        let iu = g
            .node_index(u)
            .ok_or_else(|| Error::lookup(format!("unknown node {u}")))?;
        let iv = g
            .node_index(v)
            .ok_or_else(|| Error::lookup(format!("unknown node {v}")))?;
        rows_i.push(iu as usize);
        rows_j.push(iv as usize);
    }
    let zi = tape.gather_rows(z, Arc::new(rows_i))?;
    let zj = tape.gather_rows(z, Arc::new(rows_j))?;

    let short = match (&columns.s_short_norm, &columns.latent_features) {
        (Some(norm), Some(feats)) => Some(ShortTermInputs {
            mlp: &bound.mlp_short,
            latent_features: feats,
            s_short_norm: norm,
        }),
        _ => None,
    };
    
    ensemble::score_pairs(
        tape,
        zi,
        zj,
        &bound.bil,
        &bound.mlp_long,
        short,
        &columns.s_prox_norm,
        cfg.w_p,
    )
}

/// Per-epoch loss values from one training call.
#[derive(Clone, Debug, Default)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub epochs_run: usize,
    pub positives: usize,
}

/// Run the step's self-supervised training loop (all epochs) against the
/// merged graph view, updating the model in place.
pub fn train_step(
    model: &mut PurifierModel,
    g: &TemporalGraph,
    latent: Option<&LatentMatrix>,
    cfg: &TigerConfig,
    master_seed: u64,
    step: usize,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let view = View::Purified;
    let all_positives = g.edges(view);
    if all_positives.is_empty() {
        return Ok(TrainTrace::default());
    }
    let agg = Arc::new(g.normalized_adjacency(view));
    let features = g.features_tensor();

    let mut trace = TrainTrace {
        positives: all_positives.len(),
        ..TrainTrace::default()
    };
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(
            master_seed,
            "train-epoch",
            ((step as u64) << 24) ^ epoch as u64,
        );
        let positives: Vec<Edge> = match cfg.positives_cap {
            Some(cap) if all_positives.len() > cap => {
                rand::seq::index::sample(&mut rng, all_positives.len(), cap)
                    .into_iter()
                    .map(|k| all_positives[k])
                    .collect()
            }
            _ => all_positives.clone(),
        };
        let negatives = sample_negatives(g, positives.len(), view, &mut rng)?;
        debug_assert_eq!(positives.len(), negatives.len());
        let mut pairs = positives.clone();
        pairs.extend_from_slice(&negatives);

        let columns = pair_columns(g, latent, &pairs, view, cfg)?;
        let mut tape = Tape::new();
        let bound = bind_all(&mut tape, &model.params);
        let batch = forward_scores(
            &mut tape,
            &bound,
            &model.memory,
            g,
            &agg,
            &features,
            &pairs,
            &columns,
            cfg,
        )?;

        let scores = tape.value(batch.score).clone();
        let n_pos = positives.len();
        let kept = filter_positive_indices(&positives, &scores.data()[..n_pos], cfg.beta);

        let pos_scores = tape.gather_rows(batch.score, Arc::new(kept))?;
        let neg_idx: Vec<usize> = (n_pos..n_pos + negatives.len()).collect();
        let neg_scores = tape.gather_rows(batch.score, Arc::new(neg_idx))?;

        let pos_clamped = tape.clamp(pos_scores, 1e-7, 1.0 - 1e-7);
        let pos_log = tape.log(pos_clamped);
        let pos_term = tape.mean_all(pos_log);

        let ones = tape.constant(Tensor::filled(
            tape.value(neg_scores).shape(),
            1.0,
        ));
        let neg_flipped = tape.sub(ones, neg_scores)?;
        let neg_clamped = tape.clamp(neg_flipped, 1e-7, 1.0 - 1e-7);
        let neg_log = tape.log(neg_clamped);
        let neg_term = tape.mean_all(neg_log);

        let total = tape.add(pos_term, neg_term)?;
        let loss = tape.scale(total, -1.0);

        let loss_val = tape.value(loss).item()?;
        if !loss_val.is_finite() {
            let smin = scores.data().iter().copied().fold(f64::INFINITY, f64::min);
            let smax = scores
                .data()
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            return Err(Error::training(format!(
                "non-finite loss at step {step} epoch {epoch}: {n_pos} positives, \
                 {} negatives, score range [{smin:.6}, {smax:.6}]",
                negatives.len()
            )));
        }
        trace.losses.push(loss_val);
        trace.epochs_run = epoch + 1;

        tape.backward(loss)?;
        let grads: Vec<Tensor> = [
            bound.enc.w1,
            bound.enc.b1,
            bound.enc.w2,
            bound.enc.b2,
            bound.att.w_q,
            bound.att.w_k,
            bound.att.w_v,
            bound.bil.raw,
            bound.bil.bias,
            bound.mlp_long.w1,
            bound.mlp_long.b1,
            bound.mlp_long.w2,
            bound.mlp_long.b2,
            bound.mlp_short.w1,
            bound.mlp_short.b1,
            bound.mlp_short.w2,
            bound.mlp_short.b2,
        ]
        .iter()
        .map(|&v| tape.grad(v))
        .collect();
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut params = model.params.tensors_mut();
        model.optimizer.step(&mut params, &grad_refs)?;

        // Stop once the loss has stopped moving.
        let e = trace.losses.len();
        if e > cfg.early_stop_patience {
            let before = trace.losses[e - 1 - cfg.early_stop_patience];
            if before - trace.losses[e - 1] < cfg.early_stop_eps {
                break;
            }
        }
    }
    Ok(trace)
}

/// Score candidate edges with frozen parameters; returns one record per
/// candidate, in input order, plus the step's embedding matrix.
pub fn score_candidates(
    params: &PurifierParams,
    memory: &EmbeddingMemory,
    g: &TemporalGraph,
    latent: Option<&LatentMatrix>,
    candidates: &[Edge],
    cfg: &TigerConfig,
) -> Result<Vec<SubScores>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let view = View::Purified;
    let agg = Arc::new(g.normalized_adjacency(view));
    let features = g.features_tensor();
    let columns = pair_columns(g, latent, candidates, view, cfg)?;

    let mut tape = Tape::new();
    let bound = bind_all(&mut tape, params);
    let batch = forward_scores(
        &mut tape, &bound, memory, g, &agg, &features, candidates, &columns, cfg,
    )?;

    let scores = tape.value(batch.score);
    let s_long = tape.value(batch.s_long);
    let weights = tape.value(batch.weights);
    let has_short = batch.has_short;
    let mut out = Vec::with_capacity(candidates.len());
    for (k, &edge) in candidates.iter().enumerate() {
        let wrow = weights.row(k);
        out.push(SubScores {
            edge,
            s_long: s_long.data()[k],
            s_short: columns.s_short_raw.as_ref().map(|v| v[k]),
            s_prox: columns.s_prox_raw[k],
            s_short_norm: columns.s_short_norm.as_ref().map(|v| v[k]),
            s_prox_norm: columns.s_prox_norm[k],
            weight_long: wrow[0],
            weight_short: has_short.then(|| wrow[1]),
            weight_prox: wrow[if has_short { 2 } else { 1 }],
            score: scores.data()[k],
        });
    }
    Ok(out)
}

/// Embedding matrix of the requested view with frozen parameters (what
/// the memory stores after a step's removals).
pub fn embed(params: &PurifierParams, g: &TemporalGraph, view: View) -> Result<Tensor> {
    gcn::forward_values(&params.encoder, g, view)
}
