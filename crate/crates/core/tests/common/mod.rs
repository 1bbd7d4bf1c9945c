//! Helpers shared by the integration tests: small configurations, random
//! inputs, a plain reference forward pass and rank statistics.
#![allow(dead_code)]

use adaptive_transformer::model::{AdaptiveModel, Batch, ModelConfig};
use adaptive_transformer::numerics::kernels::{gelu_scalar, layer_norm_slice, softmax_rows_slice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden: 8,
        num_heads: 2,
        head_dim: 4,
        ffn_dim: 8,
        max_seq_len: 8,
        width_list: vec![1.0, 0.5],
        depth_list: vec![1.0, 0.5],
        ..ModelConfig::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Batch of `b` sequences with lengths in `min_len..=max_len` and random labels.
pub fn random_batch(cfg: &ModelConfig, b: usize, min_len: usize, max_len: usize, r: &mut ChaCha8Rng) -> Batch {
    let seqs: Vec<Vec<usize>> = (0..b)
        .map(|_| {
            let n = r.random_range(min_len..=max_len);
            (0..n).map(|_| r.random_range(0..cfg.vocab_size)).collect()
        })
        .collect();
    let labels = (0..b).map(|_| r.random_range(0..cfg.num_classes)).collect();
    Batch::from_sequences(&seqs, labels).unwrap()
}

/// Model whose every parameter is perturbed by uniform noise of size `amp`,
/// so biases and gains are not at their initial values.
pub fn perturbed_model(cfg: &ModelConfig, seed: u64, amp: f64) -> AdaptiveModel {
    let mut m = AdaptiveModel::new(cfg.clone(), seed).unwrap();
    let mut r = rng(seed ^ 0xABCD);
    let ids: Vec<_> = m.store().iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in m.store_mut().get_mut(id).data_mut() {
            *v += amp * (2.0 * r.random::<f64>() - 1.0);
        }
    }
    m
}

/// Trainable copy of `m` with uniform noise of size `amp` on every parameter.
pub fn jitter(m: &AdaptiveModel, seed: u64, amp: f64) -> AdaptiveModel {
    let mut m = m.clone();
    m.set_trainable(true);
    let mut r = rng(seed);
    let ids: Vec<_> = m.store().iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in m.store_mut().get_mut(id).data_mut() {
            *v += amp * (2.0 * r.random::<f64>() - 1.0);
        }
    }
    m
}

fn param<'a>(m: &'a AdaptiveModel, name: &str) -> &'a [f64] {
    let id = m.store().find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    m.store().get(id).data()
}

/// Full-width, full-depth, dropout-free forward written with explicit loops
/// over whole parameter arrays. Returns logits, `B × C` row-major.
pub fn reference_logits(m: &AdaptiveModel, batch: &Batch) -> Vec<f64> {
    let cfg = m.config();
    let (bsz, n, d, dh, nh, f, c) = (
        batch.batch_size,
        batch.seq_len,
        cfg.hidden,
        cfg.head_dim,
        cfg.num_heads,
        cfg.ffn_dim,
        cfg.num_classes,
    );
    let rows = bsz * n;
    let scale = cfg.score_scale_value();

    let tok = param(m, "embeddings.token");
    let pos = param(m, "embeddings.position");
    let mut x = vec![0.0; rows * d];
    for r in 0..rows {
        let t = batch.tokens[r];
        for j in 0..d {
            x[r * d + j] = tok[t * d + j] + pos[(r % n) * d + j];
        }
    }
    x = layer_norm_slice(&x, d, param(m, "embeddings.ln.gain"), param(m, "embeddings.ln.bias")).out;

    let linear = |input: &[f64], w: &[f64], b: Option<&[f64]>, k: usize, out: usize| {
        let mut y = vec![0.0; input.len() / k * out];
        for r in 0..input.len() / k {
            for o in 0..out {
                let mut s = 0.0;
                for i in 0..k {
                    s += input[r * k + i] * w[i * out + o];
                }
                y[r * out + o] = s;
            }
            if let Some(b) = b {
                for o in 0..out {
                    y[r * out + o] += b[o];
                }
            }
        }
        y
    };

    for l in 0..cfg.num_layers {
        let p = |s: &str| param(m, &format!("layers.{l}.{s}"));
        let q = linear(&x, p("attn.wq"), Some(p("attn.bq")), d, d);
        let k = linear(&x, p("attn.wk"), Some(p("attn.bk")), d, d);
        let v = linear(&x, p("attn.wv"), Some(p("attn.bv")), d, d);
        let wo = p("attn.wo");
        let mut attn: Option<Vec<f64>> = None;
        for h in 0..nh {
            let mut scores = vec![0.0; rows * n];
            for b in 0..bsz {
                for i in 0..n {
                    for j in 0..n {
                        let mut s = 0.0;
                        for e in 0..dh {
                            s += q[(b * n + i) * d + h * dh + e] * k[(b * n + j) * d + h * dh + e];
                        }
                        let mut s = s * scale;
                        if batch.has_padding() {
                            s += if batch.valid[b * n + j] { 0.0 } else { -1e9 };
                        }
                        scores[(b * n + i) * n + j] = s;
                    }
                }
            }
            let probs = softmax_rows_slice(&scores, n);
            let mut ctx = vec![0.0; rows * dh];
            for b in 0..bsz {
                for i in 0..n {
                    for e in 0..dh {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += probs[(b * n + i) * n + j] * v[(b * n + j) * d + h * dh + e];
                        }
                        ctx[(b * n + i) * dh + e] = s;
                    }
                }
            }
            let out_h = linear(&ctx, &wo[h * dh * d..(h + 1) * dh * d], None, dh, d);
            attn = Some(match attn {
                None => out_h,
                Some(a) => a.iter().zip(&out_h).map(|(a, b)| a + b).collect(),
            });
        }
        let bo = p("attn.bo");
        let res: Vec<f64> = attn
            .unwrap()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bo).map(|(a, b)| a + b).collect::<Vec<_>>())
            .zip(&x)
            .map(|(a, xv)| xv + a)
            .collect();
        let a = layer_norm_slice(&res, d, p("attn.ln.gain"), p("attn.ln.bias")).out;
        let pre = linear(&a, p("ffn.w1"), Some(p("ffn.b1")), d, f);
        let act: Vec<f64> = pre.iter().map(|&v| gelu_scalar(v)).collect();
        let out = linear(&act, p("ffn.w2"), Some(p("ffn.b2")), f, d);
        let res: Vec<f64> = a.iter().zip(&out).map(|(a, o)| a + o).collect();
        x = layer_norm_slice(&res, d, p("ffn.ln.gain"), p("ffn.ln.bias")).out;
    }

    let cls: Vec<f64> = (0..bsz).flat_map(|b| x[b * n * d..b * n * d + d].to_vec()).collect();
    linear(&cls, param(m, "classifier.weight"), Some(param(m, "classifier.bias")), d, c)
}

/// Average ranks (1-based), ties sharing the mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// `|a − b| / max(|a|, |b|)`, zero when both are zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let den = a.abs().max(b.abs());
    if den == 0.0 {
        0.0
    } else {
        (a - b).abs() / den
    }
}
