//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records operations during the forward pass; [`Tape::backward`]
//! replays them in reverse, accumulating gradients by the chain rule.
//! Graphs are acyclic by construction (an op can only reference vars that
//! already exist). Dense only: graph sparsity enters through the
//! [`Op::Aggregate`] edge loop, not through a sparse tensor type.
//!
//! Clamping conventions, applied uniformly:
//! * logarithms read `max(x, 1e-12)`,
//! * probabilities entering a cross-entropy are clamped to `[1e-7, 1-1e-7]`.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mathx;
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

/// Floor for logarithm arguments.
pub const LOG_EPS: f64 = 1e-12;
/// Clamp band for probabilities entering a cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Row-to-segment assignment for the segment ops (variable-length
/// attention batches). `of_row[r]` is the segment that row `r` belongs to;
/// rows of one segment need not be contiguous.
#[derive(Clone, Debug)]
pub struct Segments {
    pub of_row: Vec<u32>,
    pub num_segments: usize,
}

impl Segments {
    pub fn new(of_row: Vec<u32>, num_segments: usize) -> Result<Self> {
        if let Some(&bad) = of_row.iter().find(|&&s| (s as usize) >= num_segments) {
            return Err(Error::contract(format!(
                "segment id {bad} out of range (num_segments = {num_segments})"
            )));
        }
        Ok(Segments {
            of_row,
            num_segments,
        })
    }
}

/// Sparse aggregation weights: `out[i, :] += w * x[j, :]` per `(i, j, w)`.
#[derive(Clone, Debug)]
pub struct AggregationWeights {
    pub num_nodes: usize,
    pub triples: Vec<(u32, u32, f64)>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    EMax(Var, Var),
    AddRowBroadcast(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    LogClamped(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    RowSum(Var),
    SumAll(Var),
    MeanAll(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    Aggregate(Var, Arc<AggregationWeights>),
    SegmentSoftmax(Var, Arc<Segments>),
    SegmentWeightedSum(Var, Var, Arc<Segments>),
    SegmentRowDot(Var, Var, Arc<Segments>),
}

/// Recording tape. One forward graph per instance; single-threaded.
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            values: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires: bool) -> Var {
        let id = self.ops.len();
        self.ops.push(op);
        self.values.push(value);
        self.requires.push(requires);
        self.grads.push(None);
        Var(id)
    }

    /// Trainable leaf: gradients flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Constant leaf: no gradient is computed for it or propagated past it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` target w.r.t. `v` (zeros if none
    /// reached it).
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_vec(self.values[v.0].shape(), g.clone())
                .expect("grad shape matches value shape"),
            None => Tensor::zeros(self.values[v.0].shape()),
        }
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    // ── Binary elementwise ──────────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.values[a.0].shape(), data)?;
        let req = self.req(&[a, b]);
        Ok(self.push(Op::Add(a, b), t, req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::from_vec(self.values[a.0].shape(), data)?;
        let req = self.req(&[a, b]);
        Ok(self.push(Op::Sub(a, b), t, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.values[a.0].shape(), data)?;
        let req = self.req(&[a, b]);
        Ok(self.push(Op::Mul(a, b), t, req))
    }

    /// Elementwise maximum. Ties route the gradient to the first argument.
    pub fn emax(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "emax")?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x.max(*y))
            .collect();
        let t = Tensor::from_vec(self.values[a.0].shape(), data)?;
        let req = self.req(&[a, b]);
        Ok(self.push(Op::EMax(a, b), t, req))
    }

    /// `a[m x n] + b[n]` broadcast over rows (bias add).
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = (self.values[a.0].rows(), self.values[a.0].cols());
        if self.values[b.0].numel() != cols {
            return Err(Error::shape(format!(
                "row broadcast: {} columns vs {} bias entries",
                cols,
                self.values[b.0].numel()
            )));
        }
        let mut data = self.values[a.0].data().to_vec();
        let bias = self.values[b.0].data();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bias[c];
            }
        }
        let t = Tensor::from_vec(self.values[a.0].shape(), data)?;
        let req = self.req(&[a, b]);
        Ok(self.push(Op::AddRowBroadcast(a, b), t, req))
    }

    // ── Unary ───────────────────────────────────────────────────────────

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.values[a.0].data().iter().map(|x| x * c).collect();
        let t = Tensor::from_vec(self.values[a.0].shape(), data).unwrap();
        let req = self.requires[a.0];
        self.push(Op::Scale(a, c), t, req)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.values[a.0].data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::from_vec(self.values[a.0].shape(), data).unwrap();
        let req = self.requires[a.0];
        self.push(Op::Relu(a), t, req)
    }

    /// Elementwise logistic function; outputs lie in (0, 1).
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.values[a.0]
            .data()
            .iter()
            .map(|&x| mathx::sigmoid(x))
            .collect();
        let t = Tensor::from_vec(self.values[a.0].shape(), data).unwrap();
        let req = self.requires[a.0];
        self.push(Op::Sigmoid(a), t, req)
    }

    /// `ln(max(x, 1e-12))` elementwise.
    pub fn log(&mut self, a: Var) -> Var {
        let data = self.values[a.0]
            .data()
            .iter()
            .map(|&x| mathx::ln(x.max(LOG_EPS)))
            .collect();
        let t = Tensor::from_vec(self.values[a.0].shape(), data).unwrap();
        let req = self.requires[a.0];
        self.push(Op::LogClamped(a), t, req)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where no clamping bit.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let data = self.values[a.0]
            .data()
            .iter()
            .map(|x| x.clamp(lo, hi))
            .collect();
        let t = Tensor::from_vec(self.values[a.0].shape(), data).unwrap();
        let req = self.requires[a.0];
        self.push(Op::Clamp(a, lo, hi), t, req)
    }

    /// Softmax along the last dimension (the whole tensor when rank 1),
    /// computed with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.values[a.0].numel() == 0 {
            return Err(Error::shape("softmax of an empty tensor"));
        }
        let (rows, cols) = lastdim_rows_cols(&self.values[a.0]);
        let x = self.values[a.0].data();
        let mut data = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            softmax_into(row, out);
        }
        let t = Tensor::from_vec(self.values[a.0].shape(), data)?;
        let req = self.requires[a.0];
        Ok(self.push(Op::Softmax(a), t, req))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    /// `[m x n] -> [m]`, summing each row.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (rows, cols) = (self.values[a.0].rows(), self.values[a.0].cols());
        let x = self.values[a.0].data();
        let data = (0..rows)
            .map(|r| x[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let t = Tensor::vector(data);
        let req = self.requires[a.0];
        self.push(Op::RowSum(a), t, req)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().sum();
        let req = self.requires[a.0];
        self.push(Op::SumAll(a), Tensor::scalar(s), req)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].numel().max(1) as f64;
        let s: f64 = self.values[a.0].data().iter().sum();
        let req = self.requires[a.0];
        self.push(Op::MeanAll(a), Tensor::scalar(s / n), req)
    }

    // ── Structure ───────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.values[a.0].shape(), self.values[b.0].shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::shape(format!(
                "matmul: incompatible shapes {ash:?} x {bsh:?}"
            )));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut data = vec![0.0; m * n];
        matmul_acc(
            m,
            k,
            n,
            self.values[a.0].data(),
            self.values[b.0].data(),
            &mut data,
        );
        let t = Tensor::matrix(m, n, data)?;
        let req = self.req(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), t, req))
    }

    /// Select rows of `a` (elements when `a` is rank 1) by index, with
    /// repetition allowed; gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let rows = self.values[a.0].rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range ({rows} rows)"
            )));
        }
        let cols = self.values[a.0].cols();
        let x = self.values[a.0].data();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            data.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let t = if self.values[a.0].shape().len() == 1 {
            Tensor::vector(data)
        } else {
            Tensor::matrix(idx.len(), cols, data)?
        };
        let req = self.requires[a.0];
        Ok(self.push(Op::GatherRows(a, idx), t, req))
    }

    /// Horizontal concatenation; rank-1 inputs count as single columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, rb) = (self.values[a.0].rows(), self.values[b.0].rows());
        if ra != rb {
            return Err(Error::shape(format!(
                "concat_cols: {ra} rows vs {rb} rows"
            )));
        }
        let (ca, cb) = (self.values[a.0].cols(), self.values[b.0].cols());
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(self.values[a.0].row(r));
            data.extend_from_slice(self.values[b.0].row(r));
        }
        let t = Tensor::matrix(ra, ca + cb, data)?;
        let req = self.req(&[a, b]);
        Ok(self.push(Op::ConcatCols(a, b), t, req))
    }

    /// Vertical concatenation of equal-width pieces.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows of zero parts"));
        };
        let cols = self.values[first.0].cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            if self.values[p.0].cols() != cols {
                return Err(Error::shape(format!(
                    "concat_rows: width {} vs {}",
                    self.values[p.0].cols(),
                    cols
                )));
            }
            rows += self.values[p.0].rows();
            data.extend_from_slice(self.values[p.0].data());
        }
        let t = Tensor::matrix(rows, cols, data)?;
        let req = self.req(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), t, req))
    }

    /// Sparse aggregation `out[i, :] += w * x[j, :]` over the weight triples.
    pub fn aggregate(&mut self, x: Var, w: Arc<AggregationWeights>) -> Result<Var> {
        let rows = self.values[x.0].rows();
        if rows != w.num_nodes {
            return Err(Error::shape(format!(
                "aggregate: {} rows vs {} nodes",
                rows, w.num_nodes
            )));
        }
        let cols = self.values[x.0].cols();
        let xd = self.values[x.0].data();
        let mut data = vec![0.0; rows * cols];
        for &(i, j, wt) in &w.triples {
            let (i, j) = (i as usize, j as usize);
            let src = &xd[j * cols..(j + 1) * cols];
            let dst = &mut data[i * cols..(i + 1) * cols];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wt * s;
            }
        }
        let t = Tensor::matrix(rows, cols, data)?;
        let req = self.requires[x.0];
        Ok(self.push(Op::Aggregate(x, w), t, req))
    }

    /// Softmax within each segment of a rank-1 score vector.
    pub fn segment_softmax(&mut self, scores: Var, seg: Arc<Segments>) -> Result<Var> {
        let x = self.values[scores.0].data();
        if x.len() != seg.of_row.len() {
            return Err(Error::shape(format!(
                "segment_softmax: {} scores vs {} assignments",
                x.len(),
                seg.of_row.len()
            )));
        }
        let mut maxes = vec![f64::NEG_INFINITY; seg.num_segments];
        for (r, &s) in seg.of_row.iter().enumerate() {
            maxes[s as usize] = maxes[s as usize].max(x[r]);
        }
        let mut sums = vec![0.0; seg.num_segments];
        let mut data = vec![0.0; x.len()];
        for (r, &s) in seg.of_row.iter().enumerate() {
            let e = mathx::exp(x[r] - maxes[s as usize]);
            data[r] = e;
            sums[s as usize] += e;
        }
        for (r, &s) in seg.of_row.iter().enumerate() {
            data[r] /= sums[s as usize];
        }
        let t = Tensor::vector(data);
        let req = self.requires[scores.0];
        Ok(self.push(Op::SegmentSoftmax(scores, seg), t, req))
    }

    /// `out[seg[r], :] += weights[r] * values[r, :]`.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        values: Var,
        seg: Arc<Segments>,
    ) -> Result<Var> {
        let wlen = self.values[weights.0].numel();
        let vrows = self.values[values.0].rows();
        if wlen != seg.of_row.len() || vrows != seg.of_row.len() {
            return Err(Error::shape(format!(
                "segment_weighted_sum: {} weights, {} value rows, {} assignments",
                wlen,
                vrows,
                seg.of_row.len()
            )));
        }
        let cols = self.values[values.0].cols();
        let wd = self.values[weights.0].data();
        let vd = self.values[values.0].data();
        let mut data = vec![0.0; seg.num_segments * cols];
        for (r, &s) in seg.of_row.iter().enumerate() {
            let dst = &mut data[s as usize * cols..(s as usize + 1) * cols];
            let src = &vd[r * cols..(r + 1) * cols];
            for (d, x) in dst.iter_mut().zip(src) {
                *d += wd[r] * x;
            }
        }
        let t = Tensor::matrix(seg.num_segments, cols, data)?;
        let req = self.req(&[weights, values]);
        Ok(self.push(Op::SegmentWeightedSum(weights, values, seg), t, req))
    }

    /// `out[r] = dot(rows[r, :], queries[seg[r], :])`.
    pub fn segment_row_dot(&mut self, rows: Var, queries: Var, seg: Arc<Segments>) -> Result<Var> {
        let nr = self.values[rows.0].rows();
        if nr != seg.of_row.len() || self.values[queries.0].rows() != seg.num_segments {
            return Err(Error::shape(format!(
                "segment_row_dot: {} rows, {} assignments, {} queries for {} segments",
                nr,
                seg.of_row.len(),
                self.values[queries.0].rows(),
                seg.num_segments
            )));
        }
        if self.values[rows.0].cols() != self.values[queries.0].cols() {
            return Err(Error::shape("segment_row_dot: width mismatch"));
        }
        let cols = self.values[rows.0].cols();
        let rd = self.values[rows.0].data();
        let qd = self.values[queries.0].data();
        let mut data = vec![0.0; nr];
        for (r, &s) in seg.of_row.iter().enumerate() {
            let rrow = &rd[r * cols..(r + 1) * cols];
            let qrow = &qd[s as usize * cols..(s as usize + 1) * cols];
            data[r] = rrow.iter().zip(qrow).map(|(x, y)| x * y).sum();
        }
        let t = Tensor::vector(data);
        let req = self.req(&[rows, queries]);
        Ok(self.push(Op::SegmentRowDot(rows, queries, seg), t, req))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Backpropagate from a scalar loss; gradients of all reachable
    /// trainable leaves become available through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.values[loss.0].is_scalar() {
            return Err(Error::contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads = core::mem::take(&mut self.grads);
        for g in grads.iter_mut() {
            *g = None;
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.requires[idx] {
                continue;
            }
            let (head, tail) = grads.split_at_mut(idx);
            let g = tail[0].as_ref().expect("checked above");
            self.propagate(idx, g, head);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, n: usize| -> Option<()> {
            if !self.requires[v.0] {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; n]);
            }
            Some(())
        };
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in &[*a, *b] {
                    if acc(grads, v, g.len()).is_some() {
                        let dst = grads[v.0].as_mut().unwrap();
                        for (d, x) in dst.iter_mut().zip(g) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if acc(grads, *a, g.len()).is_some() {
                    let dst = grads[a.0].as_mut().unwrap();
                    for (d, x) in dst.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if acc(grads, *b, g.len()).is_some() {
                    let dst = grads[b.0].as_mut().unwrap();
                    for (d, x) in dst.iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if acc(grads, *a, g.len()).is_some() {
                    let bv = self.values[b.0].data();
                    let dst = grads[a.0].as_mut().unwrap();
                    for ((d, x), y) in dst.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if acc(grads, *b, g.len()).is_some() {
                    let av = self.values[a.0].data();
                    let dst = grads[b.0].as_mut().unwrap();
                    for ((d, x), y) in dst.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::EMax(a, b) => {
                let (av, bv) = (self.values[a.0].data(), self.values[b.0].data());
                if acc(grads, *a, g.len()).is_some() {
                    let dst = grads[a.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        if av[i] >= bv[i] {
                            dst[i] += g[i];
                        }
                    }
                }
                if acc(grads, *b, g.len()).is_some() {
                    let dst = grads[b.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        if av[i] < bv[i] {
                            dst[i] += g[i];
                        }
                    }
                }
            }
            Op::AddRowBroadcast(a, b) => {
                if acc(grads, *a, g.len()).is_some() {
                    let dst = grads[a.0].as_mut().unwrap();
                    for (d, x) in dst.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                let cols = self.values[b.0].numel();
                if acc(grads, *b, cols).is_some() {
                    let dst = grads[b.0].as_mut().unwrap();
                    for (i, x) in g.iter().enumerate() {
                        dst[i % cols] += x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if acc(grads, *a, g.len()).is_some() {
                    let dst = grads[a.0].as_mut().unwrap();
                    for (d, x) in dst.iter_mut().zip(g) {
                        *d += c * x;
                    }
                }
            }
            Op::Relu(a) => {
                if acc(grads, *a, g.len()).is_some() {
                    let av = self.values[a.0].data();
                    let dst = grads[a.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            dst[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if acc(grads, *a, g.len()).is_some() {
                    let y = self.values[idx].data();
                    let dst = grads[a.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        dst[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::LogClamped(a) => {
                if acc(grads, *a, g.len()).is_some() {
                    let av = self.values[a.0].data();
                    let dst = grads[a.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        if av[i] > LOG_EPS {
                            dst[i] += g[i] / av[i];
                        }
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                if acc(grads, *a, g.len()).is_some() {
                    let av = self.values[a.0].data();
                    let dst = grads[a.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        if av[i] >= *lo && av[i] <= *hi {
                            dst[i] += g[i];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if acc(grads, *a, g.len()).is_some() {
                    let y = self.values[idx].data();
                    let (rows, cols) = lastdim_rows_cols(&self.values[idx]);
                    let dst = grads[a.0].as_mut().unwrap();
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        let dr = &mut dst[r * cols..(r + 1) * cols];
                        for i in 0..cols {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                }
            }
            Op::RowSum(a) => {
                if acc(grads, *a, self.values[a.0].numel()).is_some() {
                    let cols = self.values[a.0].cols();
                    let dst = grads[a.0].as_mut().unwrap();
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d += g[i / cols];
                    }
                }
            }
            Op::SumAll(a) => {
                if acc(grads, *a, self.values[a.0].numel()).is_some() {
                    let dst = grads[a.0].as_mut().unwrap();
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll(a) => {
                let n = self.values[a.0].numel().max(1) as f64;
                if acc(grads, *a, self.values[a.0].numel()).is_some() {
                    let dst = grads[a.0].as_mut().unwrap();
                    for d in dst.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.values[a.0].rows(), self.values[a.0].cols());
                let n = self.values[b.0].cols();
                if acc(grads, *a, m * k).is_some() {
                    let bv = self.values[b.0].data();
                    matmul_bt_acc(m, k, n, g, bv, grads[a.0].as_mut().unwrap());
                }
                if acc(grads, *b, k * n).is_some() {
                    let av = self.values[a.0].data();
                    matmul_at_acc(m, k, n, av, g, grads[b.0].as_mut().unwrap());
                }
            }
            Op::GatherRows(a, idx_list) => {
                if acc(grads, *a, self.values[a.0].numel()).is_some() {
                    let cols = self.values[a.0].cols();
                    let dst = grads[a.0].as_mut().unwrap();
                    for (r, &i) in idx_list.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        let d = &mut dst[i * cols..(i + 1) * cols];
                        for (dv, sv) in d.iter_mut().zip(src) {
                            *dv += sv;
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.values[a.0].cols(), self.values[b.0].cols());
                let rows = self.values[a.0].rows();
                if acc(grads, *a, rows * ca).is_some() {
                    let dst = grads[a.0].as_mut().unwrap();
                    for r in 0..rows {
                        for c in 0..ca {
                            dst[r * ca + c] += g[r * (ca + cb) + c];
                        }
                    }
                }
                if acc(grads, *b, rows * cb).is_some() {
                    let dst = grads[b.0].as_mut().unwrap();
                    for r in 0..rows {
                        for c in 0..cb {
                            dst[r * cb + c] += g[r * (ca + cb) + ca + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.values[p.0].numel();
                    if acc(grads, p, n).is_some() {
                        let dst = grads[p.0].as_mut().unwrap();
                        for (d, x) in dst.iter_mut().zip(&g[offset..offset + n]) {
                            *d += x;
                        }
                    }
                    offset += n;
                }
            }
            Op::Aggregate(x, w) => {
                if acc(grads, *x, self.values[x.0].numel()).is_some() {
                    let cols = self.values[x.0].cols();
                    let dst = grads[x.0].as_mut().unwrap();
                    for &(i, j, wt) in &w.triples {
                        let (i, j) = (i as usize, j as usize);
                        let src = &g[i * cols..(i + 1) * cols];
                        let d = &mut dst[j * cols..(j + 1) * cols];
                        for (dv, sv) in d.iter_mut().zip(src) {
                            *dv += wt * sv;
                        }
                    }
                }
            }
            Op::SegmentSoftmax(a, seg) => {
                if acc(grads, *a, g.len()).is_some() {
                    let y = self.values[idx].data();
                    let mut dots = vec![0.0; seg.num_segments];
                    for (r, &s) in seg.of_row.iter().enumerate() {
                        dots[s as usize] += g[r] * y[r];
                    }
                    let dst = grads[a.0].as_mut().unwrap();
                    for (r, &s) in seg.of_row.iter().enumerate() {
                        dst[r] += y[r] * (g[r] - dots[s as usize]);
                    }
                }
            }
            Op::SegmentWeightedSum(wv, vv, seg) => {
                let cols = self.values[vv.0].cols();
                if acc(grads, *wv, seg.of_row.len()).is_some() {
                    let vd = self.values[vv.0].data();
                    let dst = grads[wv.0].as_mut().unwrap();
                    for (r, &s) in seg.of_row.iter().enumerate() {
                        let grow = &g[s as usize * cols..(s as usize + 1) * cols];
                        let vrow = &vd[r * cols..(r + 1) * cols];
                        dst[r] += grow.iter().zip(vrow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                if acc(grads, *vv, self.values[vv.0].numel()).is_some() {
                    let wd = self.values[wv.0].data();
                    let dst = grads[vv.0].as_mut().unwrap();
                    for (r, &s) in seg.of_row.iter().enumerate() {
                        let grow = &g[s as usize * cols..(s as usize + 1) * cols];
                        let d = &mut dst[r * cols..(r + 1) * cols];
                        for (dv, gv) in d.iter_mut().zip(grow) {
                            *dv += wd[r] * gv;
                        }
                    }
                }
            }
            Op::SegmentRowDot(rows_v, queries_v, seg) => {
                let cols = self.values[rows_v.0].cols();
                if acc(grads, *rows_v, self.values[rows_v.0].numel()).is_some() {
                    let qd = self.values[queries_v.0].data();
                    let dst = grads[rows_v.0].as_mut().unwrap();
                    for (r, &s) in seg.of_row.iter().enumerate() {
                        let qrow = &qd[s as usize * cols..(s as usize + 1) * cols];
                        let d = &mut dst[r * cols..(r + 1) * cols];
                        for (dv, qv) in d.iter_mut().zip(qrow) {
                            *dv += g[r] * qv;
                        }
                    }
                }
                if acc(grads, *queries_v, self.values[queries_v.0].numel()).is_some() {
                    let rd = self.values[rows_v.0].data();
                    let dst = grads[queries_v.0].as_mut().unwrap();
                    for (r, &s) in seg.of_row.iter().enumerate() {
                        let rrow = &rd[r * cols..(r + 1) * cols];
                        let d = &mut dst[s as usize * cols..(s as usize + 1) * cols];
                        for (dv, rv) in d.iter_mut().zip(rrow) {
                            *dv += g[r] * rv;
                        }
                    }
                }
            }
        }
    }
}

/// Softmax acts along the last dimension: a rank-1 tensor is one row.
fn lastdim_rows_cols(t: &Tensor) -> (usize, usize) {
    if t.shape().len() == 1 {
        (1, t.numel())
    } else {
        (t.rows(), t.cols())
    }
}

/// Stable softmax of one row into a preallocated slice.
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = mathx::exp(x - max);
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Mean binary cross-entropy `-mean(y ln p + (1-y) ln(1-p))` with the
/// predictions clamped to `[1e-7, 1-1e-7]` first.
pub fn bce_loss(tape: &mut Tape, pred: Var, labels: &Tensor) -> Result<Var> {
    if tape.value(pred).shape() != labels.shape() {
        return Err(Error::shape(format!(
            "bce: prediction shape {:?} vs label shape {:?}",
            tape.value(pred).shape(),
            labels.shape()
        )));
    }
    if labels.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::contract("bce labels must be 0 or 1"));
    }
    let shape = labels.shape().to_vec();
    let y = tape.constant(labels.clone());
    let flip: Vec<f64> = labels.data().iter().map(|&v| 1.0 - v).collect();
    let y_flip = tape.constant(Tensor::from_vec(&shape, flip)?);
    let ones = tape.constant(Tensor::filled(&shape, 1.0));

    let p = tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = tape.log(p);
    let q = tape.sub(ones, p)?;
    let log_q = tape.log(q);
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(y_flip, log_q)?;
    let total = tape.add(pos, neg)?;
    let mean = tape.mean_all(total);
    Ok(tape.scale(mean, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product_and_zeros() {
        let mut tape = Tape::new();
        let eye = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(t2(2, 2, &[3.0, -1.0, 0.5, 2.0]));
        let ix = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(ix), tape.value(x));

        let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t2(2, 1, &[1.0, 1.0]));
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[3.0, 7.0]);

        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let c = tape.constant(t2(3, 4, &[0.25; 12]));
        let zc = tape.matmul(z, c).unwrap();
        assert!(tape.value(zc).data().iter().all(|&v| v == 0.0));

        // Inner-dimension mismatch is a shape error.
        assert!(matches!(tape.matmul(b, a), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_symmetry_stability_and_closed_form() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(alloc::vec![0.0, 0.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let big = tape.constant(Tensor::vector(alloc::vec![1000.0, 0.0]));
        let s = tape.softmax(big).unwrap();
        let out = tape.value(s).data();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12 && out[1] < 1e-12);

        let logs = tape.constant(Tensor::vector(alloc::vec![
            1.0f64.ln(),
            2.0f64.ln(),
            3.0f64.ln(),
        ]));
        let s = tape.softmax(logs).unwrap();
        let out = tape.value(s).data();
        for (got, want) in out.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-12);
        }

        let empty = tape.constant(Tensor::vector(alloc::vec![]));
        assert!(matches!(tape.softmax(empty), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let mut tape = Tape::new();
        let vals = alloc::vec![0.3, -1.7, 2.2, 0.0, 5.5];
        let x = tape.constant(Tensor::vector(vals.clone()));
        let s = tape.softmax(x).unwrap();
        let sum: f64 = tape.value(s).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        let shifted = tape.constant(Tensor::vector(vals.iter().map(|v| v + 123.0).collect()));
        let s2 = tape.softmax(shifted).unwrap();
        for (a, b) in tape.value(s).data().iter().zip(tape.value(s2).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(alloc::vec![0.0, 40.0, 1.7, -1.7]));
        let s = tape.sigmoid(x);
        let out = tape.value(s).data();
        assert_eq!(out[0], 0.5);
        assert!((out[1] - 1.0).abs() < 1e-12);
        // sigma(-x) == 1 - sigma(x)
        assert!((out[3] - (1.0 - out[2])).abs() < 1e-15);
        assert!(out[2] > 0.0 && out[2] < 1.0);
    }

    #[test]
    fn bce_closed_forms() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(alloc::vec![0.5]));
        let loss = bce_loss(&mut tape, p, &Tensor::vector(alloc::vec![1.0])).unwrap();
        assert!((tape.value(loss).item().unwrap() - core::f64::consts::LN_2).abs() < 1e-12);

        let p = tape.constant(Tensor::vector(alloc::vec![1.0 - PROB_EPS]));
        let loss = bce_loss(&mut tape, p, &Tensor::vector(alloc::vec![1.0])).unwrap();
        assert!(tape.value(loss).item().unwrap().abs() < 1e-6);

        let p = tape.constant(Tensor::vector(alloc::vec![0.9, 0.1]));
        let loss = bce_loss(&mut tape, p, &Tensor::vector(alloc::vec![1.0, 0.0])).unwrap();
        let want = -(0.9f64.ln());
        assert!((tape.value(loss).item().unwrap() - want).abs() < 1e-12);

        let p = tape.constant(Tensor::vector(alloc::vec![0.9]));
        assert!(bce_loss(&mut tape, p, &Tensor::vector(alloc::vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(alloc::vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_grad_is_one_and_constant_params_get_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(alloc::vec![2.0, -1.0]));
        let unused = tape.leaf(Tensor::vector(alloc::vec![5.0]));
        let s = tape.sum_all(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(s).data(), &[1.0]);
        assert_eq!(tape.grad(w).data(), &[1.0, 1.0]);
        // Parameter the loss never touches: gradient zero.
        assert_eq!(tape.grad(unused).data(), &[0.0]);
    }

    #[test]
    fn matmul_backward_rule() {
        // loss = sum(W . x): grad_W = x broadcast per row.
        let mut tape = Tape::new();
        let w = tape.leaf(t2(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let x = tape.constant(t2(3, 1, &[1.0, 2.0, 3.0]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn shared_subexpression_gradients_accumulate() {
        // loss = sum(v * v) + sum(v): dv = 2v + 1, the same value obtained
        // from an oracle graph where v enters through duplicated leaves.
        let data = alloc::vec![0.7, -1.3, 2.1];
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(data.clone()));
        let sq = tape.mul(v, v).unwrap();
        let s1 = tape.sum_all(sq);
        let s2 = tape.sum_all(v);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        let shared = tape.grad(v);

        let mut oracle = Tape::new();
        let va = oracle.leaf(Tensor::vector(data.clone()));
        let vb = oracle.leaf(Tensor::vector(data.clone()));
        let vc = oracle.leaf(Tensor::vector(data.clone()));
        let sq = oracle.mul(va, vb).unwrap();
        let s1 = oracle.sum_all(sq);
        let s2 = oracle.sum_all(vc);
        let loss = oracle.add(s1, s2).unwrap();
        oracle.backward(loss).unwrap();
        for i in 0..data.len() {
            let total = oracle.grad(va).data()[i] + oracle.grad(vb).data()[i]
                + oracle.grad(vc).data()[i];
            assert!((shared.data()[i] - total).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_values_stay_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(alloc::vec![-800.0, 0.0, 800.0]));
        let s = tape.sigmoid(x);
        let l = tape.log(s);
        let sm = tape.softmax(x).unwrap();
        for v in [s, l, sm] {
            assert!(tape.value(v).all_finite());
        }
    }
}
