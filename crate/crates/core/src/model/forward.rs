use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{kept_heads, kept_neurons, layer_keep_sets, AdaptiveModel, SubNetSpec};
use crate::numerics::{Graph, Tensor, Var};

const MASK_VALUE: f64 = -1e9;
pub const PAD_TOKEN: usize = 0;

/// Token ids laid out `batch_size × seq_len`, with a validity mask for padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub valid: Vec<bool>,
    pub labels: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    /// Pads every sequence to the longest one with [`PAD_TOKEN`].
    pub fn from_sequences(sequences: &[Vec<usize>], labels: Vec<usize>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if sequences.iter().any(Vec::is_empty) {
            return Err(Error::Data("empty sequence in batch".into()));
        }
        if !labels.is_empty() && labels.len() != sequences.len() {
            return Err(Error::Data(format!(
                "{} labels for {} sequences",
                labels.len(),
                sequences.len()
            )));
        }
        let seq_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(sequences.len() * seq_len);
        let mut valid = Vec::with_capacity(tokens.capacity());
        for s in sequences {
            tokens.extend_from_slice(s);
            valid.extend(std::iter::repeat_n(true, s.len()));
            tokens.extend(std::iter::repeat_n(PAD_TOKEN, seq_len - s.len()));
            valid.extend(std::iter::repeat_n(false, seq_len - s.len()));
        }
        Ok(Self {
            tokens,
            valid,
            labels,
            batch_size: sequences.len(),
            seq_len,
        })
    }

    pub fn has_padding(&self) -> bool {
        self.valid.iter().any(|v| !v)
    }
}

/// Multiplies one head's output by `factor` (used for ablations).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadGate {
    /// 0-based physical layer index.
    pub layer: usize,
    pub head: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardOptions {
    /// `Some(seed)` enables dropout (training mode).
    pub dropout_seed: Option<u64>,
    pub head_gates: Vec<HeadGate>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(seed: u64) -> Self {
        Self {
            dropout_seed: Some(seed),
            head_gates: Vec::new(),
        }
    }
}

/// Graph handles for everything a distillation loss or importance score needs.
#[derive(Debug, Clone)]
pub struct TracedForward {
    pub logits: Var,
    pub embedding: Var,
    /// One `(B·n)×d` output per executed layer.
    pub hidden: Vec<Var>,
    /// Per executed layer, per kept head, `(B·n)×n` attention probabilities.
    pub attention: Vec<Vec<Var>>,
    /// Per executed layer, per kept head, the head's `(B·n)×d` summand
    /// before the output bias, residual and layer norm.
    pub head_outputs: Vec<Vec<Var>>,
    /// 1-based physical indices of the executed layers.
    pub layers: Vec<usize>,
}

/// Detached values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `B × num_classes`.
    pub logits: Tensor,
    /// `B × n × d`.
    pub embedding: Tensor,
    pub hidden: Vec<Tensor>,
    /// Per executed layer, per kept head, `B × n × n`.
    pub attention_maps: Vec<Vec<Tensor>>,
    pub layers: Vec<usize>,
}

impl ForwardTrace {
    pub fn from_graph(g: &Graph, t: &TracedForward, batch: &Batch) -> Result<Self> {
        let (b, n) = (batch.batch_size, batch.seq_len);
        let to3 = |v: Var| -> Result<Tensor> {
            let t = g.tensor(v);
            let c = t.numel() / (b * n);
            t.reshape(vec![b, n, c])
        };
        Ok(Self {
            logits: g.tensor(t.logits),
            embedding: to3(t.embedding)?,
            hidden: t.hidden.iter().map(|&v| to3(v)).collect::<Result<_>>()?,
            attention_maps: t
                .attention
                .iter()
                .map(|heads| heads.iter().map(|&v| to3(v)).collect::<Result<_>>())
                .collect::<Result<_>>()?,
            layers: t.layers.clone(),
        })
    }

    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(self.logits.data(), *self.logits.shape().last().unwrap_or(&1))
    }
}

pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

struct Dropout {
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    fn apply(&mut self, g: &mut Graph, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..g.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        g.mul_const(x, mask)
    }
}

/// Detached forward pass; `train_mode` enables dropout with seed 0.
pub fn forward(model: &AdaptiveModel, spec: SubNetSpec, batch: &Batch, train_mode: bool) -> Result<ForwardTrace> {
    let opts = if train_mode {
        ForwardOptions::train(0)
    } else {
        ForwardOptions::eval()
    };
    forward_with(model, spec, batch, &opts)
}

pub fn forward_with(
    model: &AdaptiveModel,
    spec: SubNetSpec,
    batch: &Batch,
    opts: &ForwardOptions,
) -> Result<ForwardTrace> {
    let mut g = Graph::new();
    let t = forward_on(&mut g, model, spec, batch, opts)?;
    ForwardTrace::from_graph(&g, &t, batch)
}

/// Records a sub-network forward pass on `g`.
pub fn forward_on(
    g: &mut Graph,
    model: &AdaptiveModel,
    spec: SubNetSpec,
    batch: &Batch,
    opts: &ForwardOptions,
) -> Result<TracedForward> {
    let cfg = model.config();
    let heads = kept_heads(cfg, spec.width)?;
    let neurons = kept_neurons(cfg, spec.width)?;
    let keep = layer_keep_sets(cfg.num_layers, spec.depth)?;
    let (bsz, n) = (batch.batch_size, batch.seq_len);
    if n > cfg.max_seq_len {
        return Err(Error::Data(format!(
            "sequence length {n} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if batch.tokens.len() != bsz * n || batch.valid.len() != bsz * n || bsz == 0 {
        return Err(Error::Data("batch layout is inconsistent".into()));
    }
    if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "token id {bad} out of range for vocab {}",
            cfg.vocab_size
        )));
    }
    let mut dropout = Dropout {
        rng: opts.dropout_seed.map(ChaCha8Rng::seed_from_u64),
    };
    let store = model.store();
    let d = cfg.hidden;

    let emb = model.embedding();
    let table = g.param(store, emb.token);
    let tok = g.gather_rows(table, &batch.tokens)?;
    let pos_table = g.param_block(store, emb.position, 0..n, 0..d)?;
    let pos_rows: Vec<usize> = (0..bsz * n).map(|i| i % n).collect();
    let pos = g.gather_rows(pos_table, &pos_rows)?;
    let summed = g.add(tok, pos)?;
    let gain = g.param(store, emb.ln_gain);
    let bias = g.param(store, emb.ln_bias);
    let normed = g.layer_norm(summed, gain, bias)?;
    let embedding = dropout.apply(g, normed, cfg.dropout)?;

    let mask = if batch.has_padding() {
        let mut m = vec![0.0; bsz * n * n];
        for b in 0..bsz {
            for i in 0..n {
                for j in 0..n {
                    if !batch.valid[b * n + j] {
                        m[(b * n + i) * n + j] = MASK_VALUE;
                    }
                }
            }
        }
        Some(m)
    } else {
        None
    };

    let mut x = embedding;
    let mut hidden = Vec::with_capacity(keep.kept.len());
    let mut attention = Vec::with_capacity(keep.kept.len());
    let mut head_outputs = Vec::with_capacity(keep.kept.len());
    for &layer in &keep.kept {
        let l = layer - 1;
        let attn = mha_block(g, model, l, x, bsz, heads, mask.as_deref(), opts, &mut dropout)?;
        let out = ffn_block(g, model, l, attn.out, neurons, &mut dropout)?;
        hidden.push(out);
        attention.push(attn.maps);
        head_outputs.push(attn.head_outputs);
        x = out;
    }

    let cls_rows: Vec<usize> = (0..bsz).map(|b| b * n).collect();
    let cls = g.gather_rows(x, &cls_rows)?;
    let wc = g.param(store, model.classifier().weight);
    let bc = g.param(store, model.classifier().bias);
    let projected = g.matmul(cls, wc)?;
    let logits = g.add_row(projected, bc)?;

    Ok(TracedForward {
        logits,
        embedding,
        hidden,
        attention,
        head_outputs,
        layers: keep.kept,
    })
}

pub(crate) struct MhaOut {
    pub out: Var,
    pub maps: Vec<Var>,
    pub head_outputs: Vec<Var>,
}

/// Sum over the leftmost `heads` heads of
/// `softmax(scale · Q_h K_hᵀ + mask) V_h W^O_h`, plus the output bias, then
/// dropout, residual and post layer norm.
#[allow(clippy::too_many_arguments)]
fn mha_block(
    g: &mut Graph,
    model: &AdaptiveModel,
    l: usize,
    x: Var,
    bsz: usize,
    heads: usize,
    mask: Option<&[f64]>,
    opts: &ForwardOptions,
    dropout: &mut Dropout,
) -> Result<MhaOut> {
    let cfg = model.config();
    if heads == 0 || heads > cfg.num_heads {
        return Err(Error::Config(format!(
            "{heads} kept heads out of range 1..={}",
            cfg.num_heads
        )));
    }
    let (d, dh) = (cfg.hidden, cfg.head_dim);
    let p = model.layer(l);
    let store = model.store();
    let width = heads * dh;
    let project = |g: &mut Graph, w, b| -> Result<Var> {
        let w = g.param_block(store, w, 0..d, 0..width)?;
        let b = g.param_range(store, b, 0..width)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    };
    let q = project(g, p.wq, p.bq)?;
    let k = project(g, p.wk, p.bk)?;
    let v = project(g, p.wv, p.bv)?;

    let scale = cfg.score_scale_value();
    let mut maps = Vec::with_capacity(heads);
    let mut head_outputs = Vec::with_capacity(heads);
    let mut sum: Option<Var> = None;
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = g.slice_cols(q, cols.clone())?;
        let kh = g.slice_cols(k, cols.clone())?;
        let vh = g.slice_cols(v, cols.clone())?;
        let raw = g.grouped_scores(qh, kh, bsz)?;
        let mut scores = g.scale(raw, scale);
        if let Some(m) = mask {
            scores = g.add_const(scores, m)?;
        }
        let probs = g.softmax_rows(scores);
        maps.push(probs);
        let dropped = dropout.apply(g, probs, cfg.attention_dropout)?;
        let ctx = g.grouped_apply(dropped, vh, bsz)?;
        let wo_h = g.param_block(store, p.wo, cols, 0..d)?;
        let mut out_h = g.matmul(ctx, wo_h)?;
        for gate in opts.head_gates.iter().filter(|gt| gt.layer == l && gt.head == h) {
            out_h = g.scale(out_h, gate.factor);
        }
        head_outputs.push(out_h);
        sum = Some(match sum {
            None => out_h,
            Some(s) => g.add(s, out_h)?,
        });
    }
    let bo = g.param(store, p.bo);
    let attn = g.add_row(sum.expect("heads >= 1"), bo)?;
    let attn = dropout.apply(g, attn, cfg.dropout)?;
    let res = g.add(x, attn)?;
    let gain = g.param(store, p.attn_ln_gain);
    let bias = g.param(store, p.attn_ln_bias);
    let out = g.layer_norm(res, gain, bias)?;
    Ok(MhaOut {
        out,
        maps,
        head_outputs,
    })
}

/// `GeLU(A W¹[:, :k] + b¹[:k]) W²[:k, :] + b²`, then dropout, residual and
/// post layer norm.
fn ffn_block(
    g: &mut Graph,
    model: &AdaptiveModel,
    l: usize,
    a: Var,
    neurons: usize,
    dropout: &mut Dropout,
) -> Result<Var> {
    let cfg = model.config();
    if neurons == 0 || neurons > cfg.ffn_dim {
        return Err(Error::Config(format!(
            "{neurons} kept neurons out of range 1..={}",
            cfg.ffn_dim
        )));
    }
    let d = cfg.hidden;
    let p = model.layer(l);
    let store = model.store();
    let w1 = g.param_block(store, p.w1, 0..d, 0..neurons)?;
    let b1 = g.param_range(store, p.b1, 0..neurons)?;
    let pre = g.matmul(a, w1)?;
    let pre = g.add_row(pre, b1)?;
    let act = g.gelu(pre);
    let w2 = g.param_block(store, p.w2, 0..neurons, 0..d)?;
    let b2 = g.param(store, p.b2);
    let out = g.matmul(act, w2)?;
    let out = g.add_row(out, b2)?;
    let out = dropout.apply(g, out, cfg.dropout)?;
    let res = g.add(a, out)?;
    let gain = g.param(store, p.ffn_ln_gain);
    let bias = g.param(store, p.ffn_ln_bias);
    g.layer_norm(res, gain, bias)
}

/// One attention sublayer on its own, for decomposition checks.
pub fn mha_forward(
    g: &mut Graph,
    model: &AdaptiveModel,
    layer: usize,
    x: Var,
    batch_size: usize,
    kept_heads: usize,
    padding_mask: Option<&[f64]>,
) -> Result<(Var, Vec<Var>)> {
    let mut dropout = Dropout { rng: None };
    let out = mha_block(
        g,
        model,
        layer,
        x,
        batch_size,
        kept_heads,
        padding_mask,
        &ForwardOptions::eval(),
        &mut dropout,
    )?;
    Ok((out.out, out.maps))
}

/// One feed-forward sublayer on its own, for decomposition checks.
pub fn ffn_forward(g: &mut Graph, model: &AdaptiveModel, layer: usize, a: Var, kept_neurons: usize) -> Result<Var> {
    let mut dropout = Dropout { rng: None };
    ffn_block(g, model, layer, a, kept_neurons, &mut dropout)
}
