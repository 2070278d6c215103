//! Sub-score ensemble.
//!
//! Each candidate pair gets up to three sub-scores: the long-term bilinear
//! score (already in (0,1)), the short-term consistency score, and the
//! Adamic-Adar proximity — the latter two min-max normalized over the
//! step's candidate batch. Per-edge weights come from two-layer MLPs over
//! concatenated element-wise mean/max pair features (one MLP fed by fused
//! representations, one by the classifier's latent vectors), joined by a
//! shared scalar logit for the proximity score; a softmax puts the three
//! on the simplex and the final score is their weighted sum.
//!
//! Normalization extrema are computed in value land and enter the tape as
//! constants, so no gradient flows through the batch min/max.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Edge;
use crate::longterm::{score_long_pairs, BilinearVars};
use crate::tensor::Tensor;

/// Span below which a batch counts as constant and normalizes to 0.5.
pub const MINMAX_EPS: f64 = 1e-12;

/// Two-layer perceptron producing one weight logit per pair.
#[derive(Clone, Debug)]
pub struct WeightMlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl WeightMlpParams {
    pub fn init(in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        WeightMlpParams {
            w1: Tensor::glorot(in_dim, hidden, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::glorot(hidden, 1, rng),
            b2: Tensor::zeros(&[1]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Copy, Clone)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn bind_mlp(tape: &mut Tape, p: &WeightMlpParams) -> MlpVars {
    MlpVars {
        w1: tape.leaf(p.w1.clone()),
        b1: tape.leaf(p.b1.clone()),
        w2: tape.leaf(p.w2.clone()),
        b2: tape.leaf(p.b2.clone()),
    }
}

pub fn bind_mlp_frozen(tape: &mut Tape, p: &WeightMlpParams) -> MlpVars {
    MlpVars {
        w1: tape.constant(p.w1.clone()),
        b1: tape.constant(p.b1.clone()),
        w2: tape.constant(p.w2.clone()),
        b2: tape.constant(p.b2.clone()),
    }
}

/// `[P x in] -> [P x 1]` weight logits.
pub fn mlp_forward(tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
    let h = tape.matmul(x, vars.w1)?;
    let h = tape.add_row_broadcast(h, vars.b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, vars.w2)?;
    tape.add_row_broadcast(o, vars.b2)
}

/// `[elementMean(a, b) || elementMax(a, b)]`, symmetric in its arguments.
pub fn pair_features(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let sum = tape.add(a, b)?;
    let mean = tape.scale(sum, 0.5);
    let max = tape.emax(a, b)?;
    tape.concat_cols(mean, max)
}

/// Value-domain pair features for constant inputs.
pub fn pair_features_rows(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * a.len());
    for (x, y) in a.iter().zip(b) {
        out.push(0.5 * (x + y));
    }
    for (x, y) in a.iter().zip(b) {
        out.push(x.max(*y));
    }
    out
}

/// Min-max normalization into [0, 1]; a (near-)constant batch maps to the
/// neutral 0.5 so removal decisions rest on the other sub-scores.
pub fn minmax_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::contract("min-max normalization of an empty batch"));
    }
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::numerical(format!(
            "non-finite value {bad} in normalization batch"
        )));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if span < MINMAX_EPS {
        return Ok(alloc::vec![0.5; scores.len()]);
    }
    Ok(scores.iter().map(|v| (v - min) / span).collect())
}

/// The scalar proximity-weight logit shared by all edges.
#[derive(Clone, Debug)]
pub struct EnsembleConfig {
    pub w_p: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { w_p: 5.0 }
    }
}

/// Tape handles for one scored batch.
pub struct ScoredBatch {
    /// Final scores, `[P]`, each in [0, 1].
    pub score: Var,
    /// Long-term sub-scores, `[P]`.
    pub s_long: Var,
    /// Ensemble weights on the simplex, `[P x 3]` (or `[P x 2]` without
    /// the short-term column).
    pub weights: Var,
    pub has_short: bool,
}

/// Short-term inputs to [`score_pairs`]: the weight MLP, the constant
/// latent pair features `[P x 2C]`, and the normalized sub-scores.
pub struct ShortTermInputs<'a> {
    pub mlp: &'a MlpVars,
    pub latent_features: &'a Tensor,
    pub s_short_norm: &'a [f64],
}

/// Assemble final purification scores for a non-empty pair batch.
///
/// `zi`/`zj` are `[P x d]` fused endpoint representations; `s_prox_norm`
/// is the min-max-normalized proximity column. The short-term column is
/// optional: before a surrogate classifier exists (and under the ablation
/// that drops the short-term module) the softmax runs over the remaining
/// two logits.
pub fn score_pairs(
    tape: &mut Tape,
    zi: Var,
    zj: Var,
    bilinear: &BilinearVars,
    mlp_long: &MlpVars,
    short: Option<ShortTermInputs<'_>>,
    s_prox_norm: &[f64],
    w_p: f64,
) -> Result<ScoredBatch> {
    let pairs = tape.value(zi).rows();
    if pairs == 0 {
        return Err(Error::contract("score_pairs on an empty batch"));
    }
    if pairs != s_prox_norm.len() {
        return Err(Error::shape(format!(
            "{pairs} pairs vs {} proximity scores",
            s_prox_norm.len()
        )));
    }

    let s_long = score_long_pairs(tape, zi, zj, bilinear)?;

    let zfeat = pair_features(tape, zi, zj)?;
    let a_long = mlp_forward(tape, mlp_long, zfeat)?;
    let wp_col = tape.constant(Tensor::matrix(pairs, 1, alloc::vec![w_p; pairs])?);

    let s_prox_col = tape.constant(Tensor::matrix(pairs, 1, s_prox_norm.to_vec())?);
    let (logits, subs) = match &short {
        Some(st) => {
            if st.s_short_norm.len() != pairs || st.latent_features.rows() != pairs {
                return Err(Error::shape(
                    "short-term inputs do not cover the pair batch",
                ));
            }
            let lf = tape.constant(st.latent_features.clone());
            let a_short = mlp_forward(tape, st.mlp, lf)?;
            let ls = tape.concat_cols(a_long, a_short)?;
            let logits = tape.concat_cols(ls, wp_col)?;
            let s_short_col = tape.constant(Tensor::matrix(pairs, 1, st.s_short_norm.to_vec())?);
            let ls = tape.concat_cols(s_long, s_short_col)?;
            let subs = tape.concat_cols(ls, s_prox_col)?;
            (logits, subs)
        }
        None => {
            let logits = tape.concat_cols(a_long, wp_col)?;
            let subs = tape.concat_cols(s_long, s_prox_col)?;
            (logits, subs)
        }
    };
    let weights = tape.softmax(logits)?;
    let weighted = tape.mul(weights, subs)?;
    let score = tape.row_sum(weighted);
    Ok(ScoredBatch {
        score,
        s_long,
        weights,
        has_short: short.is_some(),
    })
}

/// Everything reported about one scored candidate edge.
#[derive(Clone, Debug)]
pub struct SubScores {
    pub edge: Edge,
    pub s_long: f64,
    pub s_short: Option<f64>,
    pub s_prox: f64,
    pub s_short_norm: Option<f64>,
    pub s_prox_norm: f64,
    pub weight_long: f64,
    pub weight_short: Option<f64>,
    pub weight_prox: f64,
    pub score: f64,
}
