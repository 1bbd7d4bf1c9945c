//! First-order Taylor importance of attention heads and FFN neurons, and the
//! permutation that moves the most important ones leftmost.
//!
//! The permutation only reorders head blocks and neuron slots, so the
//! full-width network computes the same function before and after.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{forward_on, AdaptiveModel, Batch, ForwardOptions, SubNetSpec};
use crate::numerics::{Graph, ParamId, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    /// `[layer][head]`, non-negative.
    pub head_scores: Vec<Vec<f64>>,
    /// `[layer][neuron]`, non-negative.
    pub neuron_scores: Vec<Vec<f64>>,
    pub dev_examples_used: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewirePermutation {
    /// `head_order[l][j]` is the old index of the head placed at slot `j`.
    pub head_order: Vec<Vec<usize>>,
    pub neuron_order: Vec<Vec<usize>>,
}

/// Scores heads and neurons on `dev` with the task cross-entropy. Each dev
/// batch contributes one absolute value per unit; contributions are summed.
pub fn importance(model: &AdaptiveModel, dev: &[Batch]) -> Result<ImportanceReport> {
    if dev.is_empty() || dev.iter().all(|b| b.batch_size == 0) {
        return Err(Error::Data("importance needs a non-empty development set".into()));
    }
    let cfg = model.config();
    let (d, f) = (cfg.hidden, cfg.ffn_dim);
    let mut scratch = model.clone();
    scratch.set_trainable(true);
    let mut head_scores = vec![vec![0.0; cfg.num_heads]; cfg.num_layers];
    let mut neuron_scores = vec![vec![0.0; f]; cfg.num_layers];
    let mut used = 0;

    for batch in dev {
        if batch.labels.len() != batch.batch_size {
            return Err(Error::Data("development batch without labels".into()));
        }
        scratch.store_mut().zero_grad();
        let mut g = Graph::new();
        let t = forward_on(&mut g, &scratch, SubNetSpec::FULL, batch, &ForwardOptions::eval())?;
        let loss = g.cross_entropy(t.logits, &batch.labels)?;
        g.backward(loss, scratch.store_mut())?;
        used += batch.batch_size;

        for (l, heads) in t.head_outputs.iter().enumerate() {
            for (h, &out) in heads.iter().enumerate() {
                let grad = g.grad(out).unwrap_or(&[]);
                let dot: f64 = grad.iter().zip(g.value(out)).map(|(a, b)| a * b).sum();
                head_scores[l][h] += dot.abs();
            }
        }
        let store = scratch.store();
        for (l, p) in scratch.layers().iter().enumerate() {
            let w1 = store.get(p.w1);
            let w2 = store.get(p.w2);
            let (g1, g2) = (w1.grad().expect("trainable"), w2.grad().expect("trainable"));
            for (i, score) in neuron_scores[l].iter_mut().enumerate() {
                let mut dot = 0.0;
                for r in 0..d {
                    dot += g1[r * f + i] * w1.data()[r * f + i];
                }
                for c in 0..d {
                    dot += g2[i * d + c] * w2.data()[i * d + c];
                }
                *score += dot.abs();
            }
        }
    }
    Ok(ImportanceReport {
        head_scores,
        neuron_scores,
        dev_examples_used: used,
    })
}

pub fn head_importance(model: &AdaptiveModel, dev: &[Batch]) -> Result<Vec<Vec<f64>>> {
    importance(model, dev).map(|r| r.head_scores)
}

pub fn neuron_importance(model: &AdaptiveModel, dev: &[Batch]) -> Result<Vec<Vec<f64>>> {
    importance(model, dev).map(|r| r.neuron_scores)
}

/// Indices sorted by descending score; ties keep ascending index order.
pub fn build_permutation(scores: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("importance score {i} is NaN")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order)
}

impl ImportanceReport {
    pub fn permutation(&self) -> Result<RewirePermutation> {
        Ok(RewirePermutation {
            head_order: self
                .head_scores
                .iter()
                .map(|s| build_permutation(s))
                .collect::<Result<_>>()?,
            neuron_order: self
                .neuron_scores
                .iter()
                .map(|s| build_permutation(s))
                .collect::<Result<_>>()?,
        })
    }

    /// `layer,kind,index,score` rows; `layer` is 1-based, `index` 0-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,index,score\n");
        for (l, s) in self.head_scores.iter().enumerate() {
            for (i, v) in s.iter().enumerate() {
                let _ = writeln!(out, "{},head,{},{:e}", l + 1, i, v);
            }
        }
        for (l, s) in self.neuron_scores.iter().enumerate() {
            for (i, v) in s.iter().enumerate() {
                let _ = writeln!(out, "{},neuron,{},{:e}", l + 1, i, v);
            }
        }
        out
    }
}

impl RewirePermutation {
    pub fn identity(num_layers: usize, num_heads: usize, ffn_dim: usize) -> Self {
        Self {
            head_order: vec![(0..num_heads).collect(); num_layers],
            neuron_order: vec![(0..ffn_dim).collect(); num_layers],
        }
    }

    pub fn is_identity(&self) -> bool {
        let id = |o: &Vec<usize>| o.iter().enumerate().all(|(i, &v)| i == v);
        self.head_order.iter().all(id) && self.neuron_order.iter().all(id)
    }
}

fn check_permutation(order: &[usize], n: usize, what: &str) -> Result<()> {
    if order.len() != n {
        return Err(Error::Config(format!(
            "{what} permutation has {} entries, expected {n}",
            order.len()
        )));
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Config(format!("{what} permutation is malformed: {order:?}")));
        }
    }
    Ok(())
}

/// New column block `j` (width `block`) is old block `order[j]`.
fn permute_col_blocks(t: &mut Tensor, order: &[usize], block: usize) {
    let cols = *t.shape().last().expect("2-D");
    let rows = t.numel() / cols;
    let old = t.data().to_vec();
    let data = t.data_mut();
    for r in 0..rows {
        for (j, &src) in order.iter().enumerate() {
            let dst = r * cols + j * block;
            let from = r * cols + src * block;
            data[dst..dst + block].copy_from_slice(&old[from..from + block]);
        }
    }
}

/// New row block `j` (height `block`) is old block `order[j]`.
fn permute_row_blocks(t: &mut Tensor, order: &[usize], block: usize) {
    let cols = *t.shape().last().expect("2-D");
    let old = t.data().to_vec();
    let data = t.data_mut();
    let span = block * cols;
    for (j, &src) in order.iter().enumerate() {
        data[j * span..(j + 1) * span].copy_from_slice(&old[src * span..(src + 1) * span]);
    }
}

/// Reorders heads and neurons in place. Gradient buffers are cleared.
pub fn apply_rewiring(model: &mut AdaptiveModel, perm: &RewirePermutation) -> Result<()> {
    let cfg = model.config().clone();
    if perm.head_order.len() != cfg.num_layers || perm.neuron_order.len() != cfg.num_layers {
        return Err(Error::Config(format!(
            "permutation covers {}/{} layers, model has {}",
            perm.head_order.len(),
            perm.neuron_order.len(),
            cfg.num_layers
        )));
    }
    for l in 0..cfg.num_layers {
        check_permutation(&perm.head_order[l], cfg.num_heads, "head")?;
        check_permutation(&perm.neuron_order[l], cfg.ffn_dim, "neuron")?;
    }
    let dh = cfg.head_dim;
    let layers = model.layers().to_vec();
    let store = model.store_mut();
    let cols = |store: &mut crate::numerics::ParamStore, id: ParamId, order: &[usize], block: usize| {
        permute_col_blocks(store.get_mut(id), order, block)
    };
    for (l, p) in layers.iter().enumerate() {
        let heads = &perm.head_order[l];
        let neurons = &perm.neuron_order[l];
        for id in [p.wq, p.bq, p.wk, p.bk, p.wv, p.bv] {
            cols(store, id, heads, dh);
        }
        permute_row_blocks(store.get_mut(p.wo), heads, dh);
        cols(store, p.w1, neurons, 1);
        cols(store, p.b1, neurons, 1);
        permute_row_blocks(store.get_mut(p.w2), neurons, 1);
    }
    store.clear_grads();
    Ok(())
}

/// Scores on `dev`, permutes, and returns the report used.
pub fn rewire(model: &mut AdaptiveModel, dev: &[Batch]) -> Result<ImportanceReport> {
    let report = importance(model, dev)?;
    apply_rewiring(model, &report.permutation()?)?;
    Ok(report)
}
