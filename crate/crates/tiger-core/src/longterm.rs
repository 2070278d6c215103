//! Long-term scorer: per-node embedding memory, single-head self-attention
//! fusion, and a symmetric bilinear edge score.
//!
//! Each node keeps the embeddings it had at every step since it first
//! appeared. At scoring time the current embedding is the attention query
//! over that history (itself included):
//!
//! ```text
//! z_i = sum_tau alpha_tau (m_tau W_V),   alpha = softmax_tau(<h_i W_Q, m_tau W_K>)
//! ```
//!
//! exactly this form, with no scaling factor. Stored history entries are
//! detached constants; only the current step's embedding carries gradient
//! back into the encoder. Edge score:
//!
//! ```text
//! S_L(i, j) = sigmoid(z_i W_L z_j^T + b),   W_L = (B + B^T) / 2
//! ```
//!
//! evaluated as the mean of the two argument orders so the symmetry holds
//! bit-for-bit, not just algebraically.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Segments, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-node history of detached embedding rows, oldest first, optionally
/// capped to the most recent `cap` entries.
#[derive(Clone, Debug)]
pub struct EmbeddingMemory {
    cap: Option<usize>,
    entries: Vec<VecDeque<Vec<f64>>>,
}

impl EmbeddingMemory {
    pub fn new(cap: Option<usize>) -> Self {
        EmbeddingMemory {
            cap,
            entries: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.entries.len()
    }

    pub fn len(&self, node: usize) -> usize {
        self.entries.get(node).map(|e| e.len()).unwrap_or(0)
    }

    pub fn entries(&self, node: usize) -> impl Iterator<Item = &[f64]> {
        self.entries
            .get(node)
            .into_iter()
            .flat_map(|dq| dq.iter().map(|v| v.as_slice()))
    }

    /// Append one row per node from an embedding matrix; nodes beyond the
    /// current memory size join with this as their first entry.
    pub fn push_matrix(&mut self, h: &Tensor) {
        let n = h.rows();
        if self.entries.len() < n {
            self.entries.resize_with(n, VecDeque::new);
        }
        for i in 0..n {
            let dq = &mut self.entries[i];
            dq.push_back(h.row(i).to_vec());
            if let Some(cap) = self.cap {
                while dq.len() > cap {
                    dq.pop_front();
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl AttentionParams {
    pub fn init(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            w_q: Tensor::glorot(dim, dim, rng),
            w_k: Tensor::glorot(dim, dim, rng),
            w_v: Tensor::glorot(dim, dim, rng),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_q, &self.w_k, &self.w_v]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v]
    }
}

#[derive(Copy, Clone)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

pub fn bind_attention(tape: &mut Tape, p: &AttentionParams) -> AttentionVars {
    AttentionVars {
        w_q: tape.leaf(p.w_q.clone()),
        w_k: tape.leaf(p.w_k.clone()),
        w_v: tape.leaf(p.w_v.clone()),
    }
}

pub fn bind_attention_frozen(tape: &mut Tape, p: &AttentionParams) -> AttentionVars {
    AttentionVars {
        w_q: tape.constant(p.w_q.clone()),
        w_k: tape.constant(p.w_k.clone()),
        w_v: tape.constant(p.w_v.clone()),
    }
}

/// Bilinear edge scorer; the effective matrix `(B + B^T)/2` is symmetric
/// by construction, so argument order cannot matter.
#[derive(Clone, Debug)]
pub struct BilinearParams {
    pub raw: Tensor,
    pub bias: Tensor,
}

impl BilinearParams {
    pub fn init(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        BilinearParams {
            raw: Tensor::glorot(dim, dim, rng),
            bias: Tensor::zeros(&[1]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.raw, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.raw, &mut self.bias]
    }
}

#[derive(Copy, Clone)]
pub struct BilinearVars {
    pub raw: Var,
    pub bias: Var,
}

pub fn bind_bilinear(tape: &mut Tape, p: &BilinearParams) -> BilinearVars {
    BilinearVars {
        raw: tape.leaf(p.raw.clone()),
        bias: tape.leaf(p.bias.clone()),
    }
}

pub fn bind_bilinear_frozen(tape: &mut Tape, p: &BilinearParams) -> BilinearVars {
    BilinearVars {
        raw: tape.constant(p.raw.clone()),
        bias: tape.constant(p.bias.clone()),
    }
}

/// Fused representation plus its attention weights.
pub struct Fused {
    pub z: Var,
    pub alpha: Var,
    pub segments: Arc<Segments>,
}

/// Fuse one node's memory with its current embedding as the query.
/// `past` holds the stored (detached) history; `h_current` is a `[1 x d]`
/// var and also participates as the newest memory entry.
pub fn fuse(
    tape: &mut Tape,
    past: &[&[f64]],
    h_current: Var,
    av: &AttentionVars,
) -> Result<Fused> {
    let d = tape.value(h_current).cols();
    if tape.value(h_current).rows() != 1 {
        return Err(Error::contract("fuse expects a single-row query"));
    }
    let entries = if past.is_empty() {
        h_current
    } else {
        let mut flat = Vec::with_capacity(past.len() * d);
        for row in past {
            if row.len() != d {
                return Err(Error::shape(format!(
                    "memory row width {} vs embedding width {d}",
                    row.len()
                )));
            }
            flat.extend_from_slice(row);
        }
        let consts = tape.constant(Tensor::matrix(past.len(), d, flat)?);
        tape.concat_rows(&[consts, h_current])?
    };
    let seg = Arc::new(Segments::new(
        alloc::vec![0; tape.value(entries).rows()],
        1,
    )?);
    let keys = tape.matmul(entries, av.w_k)?;
    let values = tape.matmul(entries, av.w_v)?;
    let query = tape.matmul(h_current, av.w_q)?;
    let scores = tape.segment_row_dot(keys, query, seg.clone())?;
    let alpha = tape.segment_softmax(scores, seg.clone())?;
    let z = tape.segment_weighted_sum(alpha, values, seg.clone())?;
    Ok(Fused {
        z,
        alpha,
        segments: seg,
    })
}

/// Fuse every node at once. `h` is the `[n x d]` current embedding matrix;
/// node `i`'s attention set is its stored history plus row `i` of `h`.
/// Row layout: all stored entries (node by node), then the n current rows.
pub fn fuse_all(
    tape: &mut Tape,
    memory: &EmbeddingMemory,
    h: Var,
    av: &AttentionVars,
) -> Result<Fused> {
    let n = tape.value(h).rows();
    let d = tape.value(h).cols();
    let mut flat = Vec::new();
    let mut of_row = Vec::new();
    for i in 0..n {
        for row in memory.entries(i) {
            if row.len() != d {
                return Err(Error::shape(format!(
                    "memory row width {} vs embedding width {d}",
                    row.len()
                )));
            }
            flat.extend_from_slice(row);
            of_row.push(i as u32);
        }
    }
    let num_past = of_row.len();
    of_row.extend(0..n as u32);
    let seg = Arc::new(Segments::new(of_row, n)?);

    let entries = if num_past == 0 {
        h
    } else {
        let consts = tape.constant(Tensor::matrix(num_past, d, flat)?);
        tape.concat_rows(&[consts, h])?
    };
    let keys = tape.matmul(entries, av.w_k)?;
    let values = tape.matmul(entries, av.w_v)?;
    let queries = tape.matmul(h, av.w_q)?;
    let scores = tape.segment_row_dot(keys, queries, seg.clone())?;
    let alpha = tape.segment_softmax(scores, seg.clone())?;
    let z = tape.segment_weighted_sum(alpha, values, seg.clone())?;
    Ok(Fused {
        z,
        alpha,
        segments: seg,
    })
}

/// Batched bilinear scores for endpoint representation rows `zi`/`zj`
/// (`[P x d]` each): `sigmoid(((zi B) . zj + (zj B) . zi) / 2 + b)`.
pub fn score_long_pairs(tape: &mut Tape, zi: Var, zj: Var, bv: &BilinearVars) -> Result<Var> {
    let zib = tape.matmul(zi, bv.raw)?;
    let u = tape.mul(zib, zj)?;
    let u = tape.row_sum(u);
    let zjb = tape.matmul(zj, bv.raw)?;
    let v = tape.mul(zjb, zi)?;
    let v = tape.row_sum(v);
    let sum = tape.add(u, v)?;
    let half = tape.scale(sum, 0.5);
    let biased = tape.add_row_broadcast(half, bv.bias)?;
    Ok(tape.sigmoid(biased))
}

/// Single-pair convenience wrapper; `z_i`/`z_j` are `[1 x d]` rows.
pub fn score_long(tape: &mut Tape, z_i: Var, z_j: Var, bv: &BilinearVars) -> Result<Var> {
    let s = score_long_pairs(tape, z_i, z_j, bv)?;
    if tape.value(s).numel() != 1 {
        return Err(Error::contract("score_long expects single-row inputs"));
    }
    Ok(s)
}
