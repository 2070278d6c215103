//! Proximity scores and the standalone baseline purifiers.
//!
//! Adamic-Adar doubles as the ensemble's proximity sub-score; Jaccard and
//! a truncated-SVD reconstruction join it as baseline purifiers, plus a
//! uniform-random floor.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Edge, NodeId, TemporalGraph, View};
use crate::mathx;
use crate::seed;

fn indices_of(g: &TemporalGraph, u: NodeId, v: NodeId) -> Result<(u32, u32)> {
    let iu = g
        .node_index(u)
        .ok_or_else(|| Error::lookup(format!("unknown node {u}")))?;
    let iv = g
        .node_index(v)
        .ok_or_else(|| Error::lookup(format!("unknown node {v}")))?;
    Ok((iu, iv))
}

/// `sum over common neighbors w of 1 / ln(deg(w))`; common neighbors have
/// degree >= 2, so every term is positive and finite.
pub fn adamic_adar(g: &TemporalGraph, u: NodeId, v: NodeId, view: View) -> Result<f64> {
    let (iu, iv) = indices_of(g, u, v)?;
    let nu = g.neighbors_internal(iu, view);
    let nv = g.neighbors_internal(iv, view);
    let mut sum = 0.0;
    for w in nu.intersection(nv) {
        let deg = g.neighbors_internal(*w, view).len();
        sum += 1.0 / mathx::ln(deg as f64);
    }
    Ok(sum)
}

/// `|N(u) cap N(v)| / |N(u) cup N(v)|` with the endpoints themselves left
/// out of both neighborhoods; 0 when the union is empty.
pub fn jaccard(g: &TemporalGraph, u: NodeId, v: NodeId, view: View) -> Result<f64> {
    let (iu, iv) = indices_of(g, u, v)?;
    let nu = g.neighbors_internal(iu, view);
    let nv = g.neighbors_internal(iv, view);
    let skip = |w: u32| w == iu || w == iv;
    let inter = nu.intersection(nv).filter(|&&w| !skip(w)).count();
    let union = nu.union(nv).filter(|&&w| !skip(w)).count();
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Rank-`rank` reconstruction values of the view's adjacency matrix at the
/// candidate pairs, by orthogonal subspace iteration with Rayleigh-Ritz
/// extraction (tolerance 1e-8, at most 500 iterations).
pub fn svd_scores(
    g: &TemporalGraph,
    candidates: &[Edge],
    rank: usize,
    view: View,
) -> Result<Vec<f64>> {
    let n = g.num_nodes();
    if rank == 0 || rank > n {
        return Err(Error::config(format!(
            "svd rank {rank} out of range for {n} nodes"
        )));
    }
    if g.num_edges(view) == 0 {
        return Ok(vec![0.0; candidates.len()]);
    }

    let mut adj = vec![0.0; n * n];
    for i in 0..n {
        for &j in g.neighbors_internal(i as u32, view) {
            adj[i * n + j as usize] = 1.0;
        }
    }

    let (theta, u) = top_eigenpairs(&adj, n, rank)?;

    let mut out = Vec::with_capacity(candidates.len());
    for e in candidates {
        let (a, b) = e.endpoints();
        let (ia, ib) = indices_of(g, a, b)?;
        let (ia, ib) = (ia as usize, ib as usize);
        let mut s = 0.0;
        for (k, &th) in theta.iter().enumerate() {
            s += th * u[ia * theta.len() + k] * u[ib * theta.len() + k];
        }
        out.push(s);
    }
    Ok(out)
}

const SVD_TOL: f64 = 1e-8;
const SVD_MAX_ITERS: usize = 500;

/// Top-`rank` eigenpairs of the dense symmetric matrix `a` by magnitude.
/// Returns eigenvalues and the `[n x rank]` eigenvector matrix.
fn top_eigenpairs(a: &[f64], n: usize, rank: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = (rank + 5).min(n);
    let mut rng = seed::rng(0x51D5_EED5, "svd-init", n as u64);
    let mut q = vec![0.0; n * s];
    for v in q.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    orthonormalize(&mut q, n, s, &mut rng);

    let mut last_residual = f64::INFINITY;
    for _ in 0..SVD_MAX_ITERS {
        // Power step: Y = A Q, re-orthonormalized.
        let mut y = vec![0.0; n * s];
        mat_mul_tall(a, &q, &mut y, n, s);
        orthonormalize(&mut y, n, s, &mut rng);
        q = y;

        // Rayleigh-Ritz on the subspace.
        let mut aq = vec![0.0; n * s];
        mat_mul_tall(a, &q, &mut aq, n, s);
        let mut small = vec![0.0; s * s];
        for i in 0..s {
            for j in 0..s {
                let mut acc = 0.0;
                for r in 0..n {
                    acc += q[r * s + i] * aq[r * s + j];
                }
                small[i * s + j] = acc;
            }
        }
        let (evals, evecs) = jacobi_eigen(&small, s);

        // Ritz pairs, largest magnitude first; ties by value then index.
        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by(|&x, &y| {
            evals[y]
                .abs()
                .partial_cmp(&evals[x].abs())
                .expect("finite eigenvalues")
                .then(
                    evals[y]
                        .partial_cmp(&evals[x])
                        .expect("finite eigenvalues"),
                )
                .then(x.cmp(&y))
        });
        let kept: Vec<usize> = order.into_iter().take(rank).collect();

        let mut u = vec![0.0; n * rank];
        let mut theta = vec![0.0; rank];
        for (k, &col) in kept.iter().enumerate() {
            theta[k] = evals[col];
            for r in 0..n {
                let mut acc = 0.0;
                for i in 0..s {
                    acc += q[r * s + i] * evecs[i * s + col];
                }
                u[r * rank + k] = acc;
            }
        }

        // Residual ||A u - theta u|| per kept pair.
        let mut worst = 0.0f64;
        for (k, &th) in theta.iter().enumerate() {
            let mut res = 0.0;
            for r in 0..n {
                let mut av = 0.0;
                for c in 0..n {
                    av += a[r * n + c] * u[c * rank + k];
                }
                let d = av - th * u[r * rank + k];
                res += d * d;
            }
            worst = worst.max(mathx::sqrt(res) / th.abs().max(1.0));
        }
        if worst <= SVD_TOL {
            return Ok((theta, u));
        }
        last_residual = worst;
    }
    Err(Error::numerical(format!(
        "subspace iteration did not converge in {SVD_MAX_ITERS} iterations (residual {last_residual:.3e})"
    )))
}

/// y = a . q for a dense symmetric `[n x n]` and tall `[n x s]`.
fn mat_mul_tall(a: &[f64], q: &[f64], y: &mut [f64], n: usize, s: usize) {
    for r in 0..n {
        let arow = &a[r * n..(r + 1) * n];
        let yrow = &mut y[r * s..(r + 1) * s];
        for (c, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let qrow = &q[c * s..(c + 1) * s];
            for (yv, qv) in yrow.iter_mut().zip(qrow) {
                *yv += av * qv;
            }
        }
    }
}

/// Modified Gram-Schmidt with one re-orthogonalization pass; near-zero
/// columns are replaced by fresh random directions.
fn orthonormalize(q: &mut [f64], n: usize, s: usize, rng: &mut rand_chacha::ChaCha8Rng) {
    for col in 0..s {
        loop {
            for _pass in 0..2 {
                for prev in 0..col {
                    let mut dot = 0.0;
                    for r in 0..n {
                        dot += q[r * s + col] * q[r * s + prev];
                    }
                    for r in 0..n {
                        q[r * s + col] -= dot * q[r * s + prev];
                    }
                }
            }
            let mut norm = 0.0;
            for r in 0..n {
                norm += q[r * s + col] * q[r * s + col];
            }
            let norm = mathx::sqrt(norm);
            if norm > 1e-10 {
                for r in 0..n {
                    q[r * s + col] /= norm;
                }
                break;
            }
            for r in 0..n {
                q[r * s + col] = rng.random_range(-1.0..1.0);
            }
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a dense symmetric `[s x s]` matrix.
/// Returns eigenvalues and eigenvectors (columns of the second matrix).
fn jacobi_eigen(m: &[f64], s: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = m.to_vec();
    let mut v = vec![0.0; s * s];
    for i in 0..s {
        v[i * s + i] = 1.0;
    }
    let frob: f64 = mathx::sqrt(a.iter().map(|x| x * x).sum());
    let tol = 1e-13 * frob.max(1.0);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..s {
            for q in (p + 1)..s {
                off += a[p * s + q] * a[p * s + q];
            }
        }
        if mathx::sqrt(2.0 * off) <= tol {
            break;
        }
        for p in 0..s {
            for q in (p + 1)..s {
                let apq = a[p * s + q];
                if apq.abs() <= tol / (s as f64) {
                    continue;
                }
                let (app, aqq) = (a[p * s + p], a[q * s + q]);
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + mathx::sqrt(1.0 + tau * tau))
                } else {
                    -1.0 / (-tau + mathx::sqrt(1.0 + tau * tau))
                };
                let c = 1.0 / mathx::sqrt(1.0 + t * t);
                let sn = t * c;
                for k in 0..s {
                    let akp = a[k * s + p];
                    let akq = a[k * s + q];
                    a[k * s + p] = c * akp - sn * akq;
                    a[k * s + q] = sn * akp + c * akq;
                }
                for k in 0..s {
                    let apk = a[p * s + k];
                    let aqk = a[q * s + k];
                    a[p * s + k] = c * apk - sn * aqk;
                    a[q * s + k] = sn * apk + c * aqk;
                }
                for k in 0..s {
                    let vkp = v[k * s + p];
                    let vkq = v[k * s + q];
                    v[k * s + p] = c * vkp - sn * vkq;
                    v[k * s + q] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let evals = (0..s).map(|i| a[i * s + i]).collect();
    (evals, v)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BaselineMethod {
    Jaccard,
    AdamicAdar,
    Svd { rank: usize },
    /// Uniform-random scores: the floor every purifier must beat.
    Random,
}

/// Remove exactly `budget` candidates: the lowest-scoring under the
/// method, ties broken by canonical edge order. Returns the removed edges
/// in canonical order; the caller applies them to the graph.
pub fn baseline_purify(
    g: &TemporalGraph,
    candidates: &[Edge],
    budget: usize,
    method: BaselineMethod,
    view: View,
    master_seed: u64,
) -> Result<Vec<Edge>> {
    if budget > candidates.len() {
        return Err(Error::config(format!(
            "budget {budget} exceeds {} candidates",
            candidates.len()
        )));
    }
    let scores: Vec<f64> = match method {
        BaselineMethod::Jaccard => {
            let mut out = Vec::with_capacity(candidates.len());
            for e in candidates {
                let (u, v) = e.endpoints();
                out.push(jaccard(g, u, v, view)?);
            }
            out
        }
        BaselineMethod::AdamicAdar => {
            let mut out = Vec::with_capacity(candidates.len());
            for e in candidates {
                let (u, v) = e.endpoints();
                out.push(adamic_adar(g, u, v, view)?);
            }
            out
        }
        BaselineMethod::Svd { rank } => svd_scores(g, candidates, rank, view)?,
        BaselineMethod::Random => {
            // Keyed by the edge, not the list position, so the draw is
            // independent of candidate ordering.
            candidates
                .iter()
                .map(|e| {
                    let (u, v) = e.endpoints();
                    let mut r = seed::rng(master_seed, "random-baseline", u ^ (v << 32));
                    r.random_range(0.0..1.0)
                })
                .collect()
        }
    };
    Ok(bottom_k(candidates, &scores, budget))
}

/// The `k` lowest-scoring edges, ties by canonical edge order, returned in
/// canonical order.
pub fn bottom_k(candidates: &[Edge], scores: &[f64], k: usize) -> Vec<Edge> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&x, &y| {
        scores[x]
            .partial_cmp(&scores[y])
            .expect("scores must be finite")
            .then(candidates[x].cmp(&candidates[y]))
    });
    let mut picked: Vec<Edge> = order.into_iter().take(k).map(|i| candidates[i]).collect();
    picked.sort_unstable();
    picked
}
