//! Short-term consistency scorer.
//!
//! Given the surrogate classifier's per-node class distributions, an edge
//! is judged by how unusual each endpoint's view of the other is: collect
//! the KL divergences from a node to its existing neighbors, and Z-score
//! the divergence to the candidate partner against their mean and
//! population standard deviation. The score is the negated average of the
//! two endpoint Z-scores, so it is always <= 0 and an order-free function
//! of the pair.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::softmax_into;
use crate::error::{Error, Result};
use crate::graph::{Edge, TemporalGraph, View};
use crate::mathx;
use crate::tensor::Tensor;

/// Entries below this are lifted before any ratio is formed.
pub const SMOOTH_EPS: f64 = 1e-12;
/// Standard deviations below this count as degenerate.
pub const SIGMA_EPS: f64 = 1e-12;

/// Per-node class distributions (rows), smoothed away from zero.
#[derive(Clone, Debug)]
pub struct LatentMatrix {
    rows: Tensor,
}

impl LatentMatrix {
    /// Row-softmax the classifier logits and lift every entry to at least
    /// `SMOOTH_EPS`. Row sums stay within a few eps of 1.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (n, c) = (logits.rows(), logits.cols());
        if c == 0 {
            return Err(Error::shape("latent matrix needs at least one class"));
        }
        let mut data = alloc::vec![0.0; n * c];
        for i in 0..n {
            softmax_into(logits.row(i), &mut data[i * c..(i + 1) * c]);
        }
        for v in data.iter_mut() {
            if *v < SMOOTH_EPS {
                *v = SMOOTH_EPS;
            }
        }
        Ok(LatentMatrix {
            rows: Tensor::matrix(n, c, data)?,
        })
    }

    /// Wrap pre-normalized rows (tests and oracles).
    pub fn from_rows(rows: Tensor) -> Self {
        LatentMatrix { rows }
    }

    pub fn num_nodes(&self) -> usize {
        self.rows.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, node: usize) -> &[f64] {
        self.rows.row(node)
    }
}

/// KL divergence `sum p ln(p/q)` with both arguments smoothed to at least
/// `SMOOTH_EPS` entrywise. Zero when the inputs are identical.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!(
            "kl: {} vs {} entries",
            p.len(),
            q.len()
        )));
    }
    let mut sum = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let pi = pi.max(SMOOTH_EPS);
        let qi = qi.max(SMOOTH_EPS);
        sum += pi * mathx::ln(pi / qi);
    }
    Ok(sum)
}

#[derive(Clone, Debug)]
pub struct ShortTermConfig {
    /// Leave the candidate partner out of the endpoint's reference
    /// neighborhood when forming the KL statistics.
    pub exclude_candidate: bool,
}

impl Default for ShortTermConfig {
    fn default() -> Self {
        ShortTermConfig {
            exclude_candidate: true,
        }
    }
}

/// Z-score of the candidate KL against the endpoint's neighbor KLs;
/// 0 when there are no reference neighbors or their spread is degenerate.
fn endpoint_z(
    g: &TemporalGraph,
    latent: &LatentMatrix,
    view: View,
    node: u32,
    partner: u32,
    cfg: &ShortTermConfig,
) -> f64 {
    let own = latent.row(node as usize);
    let mut kls: Vec<f64> = Vec::new();
    for &k in g.neighbors_internal(node, view) {
        if cfg.exclude_candidate && k == partner {
            continue;
        }
        kls.push(kl(own, latent.row(k as usize)).expect("latent rows share a width"));
    }
    if kls.is_empty() {
        return 0.0;
    }
    let mean = kls.iter().sum::<f64>() / kls.len() as f64;
    let var = kls.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / kls.len() as f64;
    let sigma = mathx::sqrt(var);
    if sigma < SIGMA_EPS {
        return 0.0;
    }
    let cand = kl(own, latent.row(partner as usize)).expect("latent rows share a width");
    let z = (cand - mean) / sigma;
    z.abs()
}

/// Consistency score of a candidate pair: `-(Z_i + Z_j) / 2`, always <= 0.
/// The pair need not be an edge (negative pseudo-labels are non-edges).
pub fn consistency_score(
    g: &TemporalGraph,
    edge: &Edge,
    latent: &LatentMatrix,
    view: View,
    cfg: &ShortTermConfig,
) -> Result<f64> {
    let (u, v) = edge.endpoints();
    let iu = g
        .node_index(u)
        .ok_or_else(|| Error::lookup(format!("unknown node {u}")))?;
    let iv = g
        .node_index(v)
        .ok_or_else(|| Error::lookup(format!("unknown node {v}")))?;
    if (iu as usize) >= latent.num_nodes() || (iv as usize) >= latent.num_nodes() {
        return Err(Error::shape(format!(
            "latent matrix covers {} nodes, edge {edge} reaches past it",
            latent.num_nodes()
        )));
    }
    let zi = endpoint_z(g, latent, view, iu, iv, cfg);
    let zj = endpoint_z(g, latent, view, iv, iu, cfg);
    Ok(-(zi + zj) / 2.0)
}

/// Score a candidate batch; scores are independent across edges.
pub fn score_short_batch(
    g: &TemporalGraph,
    candidates: &[Edge],
    latent: &LatentMatrix,
    view: View,
    cfg: &ShortTermConfig,
) -> Result<Vec<f64>> {
    candidates
        .iter()
        .map(|e| consistency_score(g, e, latent, view, cfg))
        .collect()
}
