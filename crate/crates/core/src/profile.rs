//! Parameter and FLOPs accounting for sub-networks, grid enumeration and the
//! cost/accuracy Pareto frontier.
//!
//! FLOPs count 2 per multiply-accumulate in the matrix products only: the
//! Q/K/V and output projections, the per-head score and value products, both
//! FFN products and the classifier. Embedding lookups and elementwise or
//! normalization work are excluded unless the all-ops variant is requested.

use std::fmt::Write as _;

use crate::distill::EvalTable;
use crate::error::{Error, Result};
use crate::model::{kept_heads, kept_neurons, layer_keep_sets, ModelConfig, SubNetSpec};

pub const FLOPS_PER_MAC: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// Kept layers plus the classifier.
    pub transformer: u64,
    /// Token and position tables plus the embedding layer norm.
    pub embedding: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.transformer + self.embedding
    }
}

/// Parameters one layer touches when keeping `heads` heads and `neurons`
/// FFN neurons.
pub fn layer_param_count(cfg: &ModelConfig, heads: usize, neurons: usize) -> u64 {
    let d = cfg.hidden as u64;
    let a = (heads * cfg.head_dim) as u64;
    let f = neurons as u64;
    let qkv = 3 * (d * a + a);
    let out = a * d + d;
    let norms = 4 * d;
    let ffn = (d * f + f) + (f * d + d);
    qkv + out + norms + ffn
}

pub fn param_count(cfg: &ModelConfig, spec: SubNetSpec) -> Result<ParamCount> {
    let heads = kept_heads(cfg, spec.width)?;
    let neurons = kept_neurons(cfg, spec.width)?;
    let layers = layer_keep_sets(cfg.num_layers, spec.depth)?.kept.len() as u64;
    let d = cfg.hidden as u64;
    let c = cfg.num_classes as u64;
    Ok(ParamCount {
        transformer: layers * layer_param_count(cfg, heads, neurons) + d * c + c,
        embedding: (cfg.vocab_size + cfg.max_seq_len) as u64 * d + 2 * d,
    })
}

fn check_seq_len(cfg: &ModelConfig, seq_len: usize) -> Result<()> {
    if seq_len == 0 || seq_len > cfg.max_seq_len {
        return Err(Error::Config(format!(
            "sequence length {seq_len} outside 1..={}",
            cfg.max_seq_len
        )));
    }
    Ok(())
}

/// Multiply-accumulates of one batch-1 forward pass at length `seq_len`.
pub fn mac_count(cfg: &ModelConfig, spec: SubNetSpec, seq_len: usize) -> Result<u64> {
    check_seq_len(cfg, seq_len)?;
    let heads = kept_heads(cfg, spec.width)? as u64;
    let f = kept_neurons(cfg, spec.width)? as u64;
    let layers = layer_keep_sets(cfg.num_layers, spec.depth)?.kept.len() as u64;
    let (n, d, dh) = (seq_len as u64, cfg.hidden as u64, cfg.head_dim as u64);
    let a = heads * dh;
    let per_layer = 3 * n * d * a + 2 * heads * n * n * dh + n * a * d + 2 * n * d * f;
    Ok(layers * per_layer + d * cfg.num_classes as u64)
}

pub fn flops_count(cfg: &ModelConfig, spec: SubNetSpec, seq_len: usize) -> Result<u64> {
    Ok(FLOPS_PER_MAC * mac_count(cfg, spec, seq_len)?)
}

/// FLOPs including elementwise work, one FLOP per output element for bias
/// adds, residual adds and score scaling and masking, 3 per softmax entry,
/// 5 per layer-norm entry and 8 per GeLU entry.
pub fn flops_count_all_ops(cfg: &ModelConfig, spec: SubNetSpec, seq_len: usize) -> Result<u64> {
    let matmul = flops_count(cfg, spec, seq_len)?;
    let heads = kept_heads(cfg, spec.width)? as u64;
    let f = kept_neurons(cfg, spec.width)? as u64;
    let layers = layer_keep_sets(cfg.num_layers, spec.depth)?.kept.len() as u64;
    let (n, d, dh) = (seq_len as u64, cfg.hidden as u64, cfg.head_dim as u64);
    let scores = heads * n * n;
    let per_layer = 3 * n * heads * dh
        + 2 * scores
        + 3 * scores
        + n * d
        + n * d
        + 5 * n * d
        + n * f
        + 8 * n * f
        + n * d
        + n * d
        + 5 * n * d;
    let embedding = n * d + 5 * n * d;
    Ok(matmul + layers * per_layer + embedding + cfg.num_classes as u64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostRow {
    pub spec: SubNetSpec,
    pub params_transformer: u64,
    pub params_total: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub seq_len: usize,
    pub rows: Vec<CostRow>,
}

pub fn enumerate_grid(cfg: &ModelConfig, seq_len: usize) -> Result<CostReport> {
    check_seq_len(cfg, seq_len)?;
    let rows = cfg
        .grid()
        .into_iter()
        .map(|spec| {
            let p = param_count(cfg, spec)?;
            Ok(CostRow {
                spec,
                params_transformer: p.transformer,
                params_total: p.total(),
                flops: flops_count(cfg, spec, seq_len)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CostReport { seq_len, rows })
}

impl CostReport {
    /// CSV with a leading comment stating the counting convention. The
    /// accuracy column is included when a table is given.
    pub fn to_csv(&self, accuracy: Option<&EvalTable>) -> Result<String> {
        let mut out = format!(
            "# flops = {FLOPS_PER_MAC} per multiply-accumulate, matmul only, batch 1, seq_len {}\n",
            self.seq_len
        );
        out.push_str("spec,params_transformer,params_total,flops");
        out.push_str(if accuracy.is_some() { ",accuracy\n" } else { "\n" });
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{}",
                r.spec, r.params_transformer, r.params_total, r.flops
            );
            if let Some(t) = accuracy {
                let a = t.get(r.spec).ok_or_else(|| missing(r.spec))?;
                let _ = write!(out, ",{a:?}");
            }
            out.push('\n');
        }
        Ok(out)
    }
}

fn missing(spec: SubNetSpec) -> Error {
    Error::Data(format!("no accuracy for configuration {spec}"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParetoPoint {
    pub spec: SubNetSpec,
    pub flops: u64,
    pub accuracy: f64,
}

/// Configurations not dominated in (FLOPs lower, accuracy higher), in
/// ascending FLOPs order.
pub fn pareto(report: &CostReport, accuracy: &EvalTable) -> Result<Vec<ParetoPoint>> {
    let points = report
        .rows
        .iter()
        .map(|r| {
            Ok(ParetoPoint {
                spec: r.spec,
                flops: r.flops,
                accuracy: accuracy.get(r.spec).ok_or_else(|| missing(r.spec))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dominated = |p: &ParetoPoint| {
        points.iter().any(|q| {
            q.flops <= p.flops
                && q.accuracy >= p.accuracy
                && (q.flops < p.flops || q.accuracy > p.accuracy)
        })
    };
    let mut front: Vec<ParetoPoint> = points.iter().filter(|p| !dominated(p)).copied().collect();
    front.sort_by(|a, b| a.flops.cmp(&b.flops).then(b.accuracy.total_cmp(&a.accuracy)));
    Ok(front)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::EvalRow;

    fn toy() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden: 4,
            num_heads: 2,
            head_dim: 2,
            ffn_dim: 8,
            max_seq_len: 2,
            num_classes: 2,
            width_list: vec![1.0, 0.5],
            depth_list: vec![1.0],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn toy_layer_counts() {
        let cfg = toy();
        assert_eq!(layer_param_count(&cfg, 2, 8), 172);
        assert_eq!(layer_param_count(&cfg, 1, 4), 98);
        assert_eq!(flops_count(&cfg, SubNetSpec::FULL, 2).unwrap(), 592);
        let half = flops_count(&cfg, SubNetSpec::new(0.5, 1.0), 2).unwrap();
        assert_eq!(half, (592 - 16) / 2 + 16);
    }

    #[test]
    fn full_spec_matches_store_enumeration() {
        let cfg = ModelConfig::default();
        let m = crate::model::AdaptiveModel::new(cfg.clone(), 1).unwrap();
        let embedding: usize = m
            .store()
            .iter()
            .filter(|(_, name, _)| name.starts_with("embeddings."))
            .map(|(_, _, t)| t.numel())
            .sum();
        let p = param_count(&cfg, SubNetSpec::FULL).unwrap();
        assert_eq!(p.total() as usize, m.store().num_scalars());
        assert_eq!(p.embedding as usize, embedding);
    }

    #[test]
    fn costs_fall_with_either_multiplier() {
        let cfg = ModelConfig::default();
        let r = enumerate_grid(&cfg, 16).unwrap();
        assert_eq!(r.rows.len(), 12);
        let get = |w: f64, d: f64| *r.rows.iter().find(|x| x.spec == SubNetSpec::new(w, d)).unwrap();
        for &d in &cfg.depth_list {
            for pair in cfg.width_list.windows(2) {
                let (a, b) = (get(pair[0], d), get(pair[1], d));
                assert!(b.flops < a.flops && b.params_transformer < a.params_transformer);
            }
        }
        for &w in &cfg.width_list {
            for pair in cfg.depth_list.windows(2) {
                assert!(get(w, pair[1]).flops < get(w, pair[0]).flops);
            }
        }
        assert!(enumerate_grid(&cfg, 17).is_err());
        let csv = r.to_csv(None).unwrap();
        assert!(csv.starts_with("# flops = 2 per multiply-accumulate"));
        assert!(flops_count_all_ops(&cfg, SubNetSpec::FULL, 16).unwrap() > get(1.0, 1.0).flops);
    }

    #[test]
    fn pareto_dominance() {
        let report = CostReport {
            seq_len: 1,
            rows: vec![
                CostRow { spec: SubNetSpec::new(1.0, 1.0), params_transformer: 3, params_total: 3, flops: 30 },
                CostRow { spec: SubNetSpec::new(0.5, 1.0), params_transformer: 2, params_total: 2, flops: 20 },
                CostRow { spec: SubNetSpec::new(0.25, 1.0), params_transformer: 1, params_total: 1, flops: 10 },
            ],
        };
        let acc = |v: [f64; 3]| EvalTable {
            rows: report
                .rows
                .iter()
                .zip(v)
                .map(|(r, accuracy)| EvalRow { spec: r.spec, accuracy })
                .collect(),
        };
        let front = pareto(&report, &acc([0.9, 0.95, 0.5])).unwrap();
        let specs: Vec<_> = front.iter().map(|p| p.spec.width).collect();
        assert_eq!(specs, vec![0.25, 0.5]);
        let single = CostReport { seq_len: 1, rows: report.rows[..1].to_vec() };
        assert_eq!(pareto(&single, &acc([0.1, 0.0, 0.0])).unwrap().len(), 1);
        assert!(pareto(&report, &EvalTable::default()).is_err());
    }
}
