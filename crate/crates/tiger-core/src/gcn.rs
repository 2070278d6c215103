//! Two-layer graph convolutional encoder.
//!
//! Used twice: as the trainable encoder inside the long-term scorer, and
//! as the surrogate node classifier whose class distributions feed the
//! short-term scorer. Forward pass:
//!
//! ```text
//! H = A_hat . relu(A_hat . X . W1 + b1) . W2 + b2
//! ```
//!
//! with `A_hat` the symmetrically normalized adjacency (self-loops added
//! virtually by the graph module).

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AggregationWeights, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{NodeId, NodeSplit, TemporalGraph, View};
use crate::optim::Adam;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GcnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GcnParams {
    pub fn init(d_in: usize, hidden: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        GcnParams {
            w1: Tensor::glorot(d_in, hidden, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::glorot(hidden, d_out, rng),
            b2: Tensor::zeros(&[d_out]),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Tape bindings for one forward pass.
#[derive(Copy, Clone)]
pub struct GcnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Bind parameters as trainable leaves.
pub fn bind(tape: &mut Tape, p: &GcnParams) -> GcnVars {
    GcnVars {
        w1: tape.leaf(p.w1.clone()),
        b1: tape.leaf(p.b1.clone()),
        w2: tape.leaf(p.w2.clone()),
        b2: tape.leaf(p.b2.clone()),
    }
}

/// Bind parameters as constants (frozen inference).
pub fn bind_frozen(tape: &mut Tape, p: &GcnParams) -> GcnVars {
    GcnVars {
        w1: tape.constant(p.w1.clone()),
        b1: tape.constant(p.b1.clone()),
        w2: tape.constant(p.w2.clone()),
        b2: tape.constant(p.b2.clone()),
    }
}

/// Embedding matrix for all appeared nodes, differentiable w.r.t. the
/// bound parameters.
pub fn forward(
    tape: &mut Tape,
    vars: &GcnVars,
    agg: &Arc<AggregationWeights>,
    x: Var,
) -> Result<Var> {
    if tape.value(x).rows() != agg.num_nodes {
        return Err(Error::shape(format!(
            "feature rows {} vs {} nodes",
            tape.value(x).rows(),
            agg.num_nodes
        )));
    }
    let ax = tape.aggregate(x, agg.clone())?;
    let pre = tape.matmul(ax, vars.w1)?;
    let pre = tape.add_row_broadcast(pre, vars.b1)?;
    let h1 = tape.relu(pre);
    let h1w = tape.matmul(h1, vars.w2)?;
    let ah = tape.aggregate(h1w, agg.clone())?;
    tape.add_row_broadcast(ah, vars.b2)
}

/// Frozen forward over a graph view, returning plain values.
pub fn forward_values(params: &GcnParams, g: &TemporalGraph, view: View) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bind_frozen(&mut tape, params);
    let agg = Arc::new(g.normalized_adjacency(view));
    let x = tape.constant(g.features_tensor());
    let h = forward(&mut tape, &vars, &agg, x)?;
    Ok(tape.value(h).clone())
}

#[derive(Clone, Debug)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 64,
            epochs: 200,
            lr: 0.01,
            patience: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierReport {
    pub train_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub epochs_run: usize,
    /// Per-epoch training loss.
    pub losses: Vec<f64>,
    /// True when the training split held fewer than two distinct classes.
    pub degenerate: bool,
}

/// Accuracy of `params` over the given nodes (active + labeled only);
/// `None` when no such node exists.
pub fn evaluate_accuracy(
    params: &GcnParams,
    g: &TemporalGraph,
    view: View,
    nodes: &BTreeSet<NodeId>,
) -> Result<Option<f64>> {
    let logits = forward_values(params, g, view)?;
    Ok(accuracy_from_logits(&logits, g, nodes))
}

fn accuracy_from_logits(
    logits: &Tensor,
    g: &TemporalGraph,
    nodes: &BTreeSet<NodeId>,
) -> Option<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for &id in nodes {
        let Some(idx) = g.node_index(id) else {
            continue;
        };
        let Some(label) = g.label_of(idx) else {
            continue;
        };
        let row = logits.row(idx as usize);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i as u32)
            .expect("non-empty logit row");
        if pred == label {
            hit += 1;
        }
        total += 1;
    }
    if total == 0 {
        None
    } else {
        Some(hit as f64 / total as f64)
    }
}

/// Train the surrogate node classifier on the purified view with
/// full-batch cross-entropy, early-stopping on validation accuracy.
pub fn train_classifier(
    g: &TemporalGraph,
    split: &NodeSplit,
    cfg: &ClassifierConfig,
    master_seed: u64,
) -> Result<(GcnParams, ClassifierReport)> {
    let classes = g.num_classes();
    if classes == 0 {
        return Err(Error::config("classifier needs labeled nodes"));
    }
    let n = g.num_nodes();
    let mut train_rows: Vec<(usize, u32)> = Vec::new();
    for &id in &split.train {
        if let Some(idx) = g.node_index(id) {
            if let Some(label) = g.label_of(idx) {
                train_rows.push((idx as usize, label));
            }
        }
    }
    if train_rows.is_empty() {
        return Err(Error::config("empty training split"));
    }
    let distinct: BTreeSet<u32> = train_rows.iter().map(|&(_, l)| l).collect();
    let degenerate = distinct.len() < 2;

    // Per-row loss weights: 1/|train| at the label column of each train row.
    let mut mask = Tensor::zeros(&[n, classes]);
    let w = 1.0 / train_rows.len() as f64;
    for &(row, label) in &train_rows {
        mask.data_mut()[row * classes + label as usize] = w;
    }

    let mut rng = seed::rng(master_seed, "classifier-init", g.current_step() as u64);
    let mut params = GcnParams::init(g.feature_dim(), cfg.hidden, classes, &mut rng);
    let mut adam = Adam::new(cfg.lr);
    let agg = Arc::new(g.normalized_adjacency(View::Purified));
    let features = g.features_tensor();

    let mut best: Option<(f64, GcnParams)> = None;
    let mut since_best = 0usize;
    let mut epochs_run = 0usize;
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        epochs_run += 1;
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &params);
        let x = tape.constant(features.clone());
        let logits = forward(&mut tape, &vars, &agg, x)?;
        let probs = tape.softmax(logits)?;
        let logp = tape.log(probs);
        let maskv = tape.constant(mask.clone());
        let picked = tape.mul(logp, maskv)?;
        let total = tape.sum_all(picked);
        let loss = tape.scale(total, -1.0);
        if !tape.value(loss).all_finite() {
            return Err(Error::training("non-finite classifier loss"));
        }
        losses.push(tape.value(loss).item()?);
        tape.backward(loss)?;

        let grads = [
            tape.grad(vars.w1),
            tape.grad(vars.b1),
            tape.grad(vars.w2),
            tape.grad(vars.b2),
        ];
        let mut tensors = params.tensors_mut();
        adam.step(&mut tensors, &[&grads[0], &grads[1], &grads[2], &grads[3]])?;

        let val_acc = evaluate_accuracy(&params, g, View::Purified, &split.val)?;
        if let Some(acc) = val_acc {
            let improved = best.as_ref().map(|(b, _)| acc > *b).unwrap_or(true);
            if improved {
                best = Some((acc, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, best_params)) = best {
        params = best_params;
    }

    let logits = forward_values(&params, g, View::Purified)?;
    let report = ClassifierReport {
        train_accuracy: accuracy_from_logits(&logits, g, &split.train),
        val_accuracy: accuracy_from_logits(&logits, g, &split.val),
        test_accuracy: accuracy_from_logits(&logits, g, &split.test),
        epochs_run,
        losses,
        degenerate,
    };
    Ok((params, report))
}
