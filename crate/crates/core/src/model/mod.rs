//! The weight-sharing transformer: one full-size parameter store from which
//! every (width, depth) sub-network is read as a leftmost slice.

mod config;
mod forward;

pub use config::{
    kept_heads, kept_neurons, layer_keep_sets, LayerKeepSets, ModelConfig, ScoreScale,
    SubNetSpec,
};
pub use forward::{
    argmax_rows, ffn_forward, forward, forward_on, forward_with, mha_forward, Batch,
    ForwardOptions, ForwardTrace, HeadGate, TracedForward, PAD_TOKEN,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingParams {
    pub token: ParamId,
    pub position: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

/// Per-layer arrays. Head `h` owns columns `[h·d_h, (h+1)·d_h)` of the query,
/// key and value projections and the same rows of `wo`; neuron `i` owns
/// column `i` of `w1`, entry `i` of `b1` and row `i` of `w2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub attn_ln_gain: ParamId,
    pub attn_ln_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ffn_ln_gain: ParamId,
    pub ffn_ln_bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveModel {
    config: ModelConfig,
    store: ParamStore,
    embedding: EmbeddingParams,
    layers: Vec<LayerParams>,
    classifier: ClassifierParams,
}

/// Names and shapes of every array, in storage order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.hidden, cfg.ffn_dim);
    let mut out = vec![
        ("embeddings.token".to_string(), vec![cfg.vocab_size, d]),
        ("embeddings.position".to_string(), vec![cfg.max_seq_len, d]),
        ("embeddings.ln.gain".to_string(), vec![d]),
        ("embeddings.ln.bias".to_string(), vec![d]),
    ];
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("attn.wq"), vec![d, d]),
            (p("attn.bq"), vec![d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.bk"), vec![d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.bv"), vec![d]),
            (p("attn.wo"), vec![d, d]),
            (p("attn.bo"), vec![d]),
            (p("attn.ln.gain"), vec![d]),
            (p("attn.ln.bias"), vec![d]),
            (p("ffn.w1"), vec![d, f]),
            (p("ffn.b1"), vec![f]),
            (p("ffn.w2"), vec![f, d]),
            (p("ffn.b2"), vec![d]),
            (p("ffn.ln.gain"), vec![d]),
            (p("ffn.ln.bias"), vec![d]),
        ]);
    }
    out.push(("classifier.weight".to_string(), vec![d, cfg.num_classes]));
    out.push(("classifier.bias".to_string(), vec![cfg.num_classes]));
    out
}

impl AdaptiveModel {
    /// Fresh model: weight matrices and embeddings ~ N(0, init_std²), biases 0,
    /// layer-norm gains 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| Error::Config(format!("init_std: {e}")))?;
        let mut store = ParamStore::new();
        for (name, shape) in param_layout(&config) {
            let t = if name.ends_with(".gain") {
                Tensor::full(shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                Tensor::from_fn(shape, |_| normal.sample(&mut rng))
            };
            store.add(name, t.with_requires_grad(true));
        }
        Self::from_store(config, store)
    }

    /// Wraps an existing store, checking names and shapes against the layout.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != store.len() {
            return Err(Error::Config(format!(
                "expected {} parameter arrays, found {}",
                layout.len(),
                store.len()
            )));
        }
        for ((name, shape), (_, got_name, t)) in layout.iter().zip(store.iter()) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let id = |name: &str| store.find(name).expect("layout checked");
        let embedding = EmbeddingParams {
            token: id("embeddings.token"),
            position: id("embeddings.position"),
            ln_gain: id("embeddings.ln.gain"),
            ln_bias: id("embeddings.ln.bias"),
        };
        let layers = (0..config.num_layers)
            .map(|l| {
                let p = |s: &str| id(&format!("layers.{l}.{s}"));
                LayerParams {
                    wq: p("attn.wq"),
                    bq: p("attn.bq"),
                    wk: p("attn.wk"),
                    bk: p("attn.bk"),
                    wv: p("attn.wv"),
                    bv: p("attn.bv"),
                    wo: p("attn.wo"),
                    bo: p("attn.bo"),
                    attn_ln_gain: p("attn.ln.gain"),
                    attn_ln_bias: p("attn.ln.bias"),
                    w1: p("ffn.w1"),
                    b1: p("ffn.b1"),
                    w2: p("ffn.w2"),
                    b2: p("ffn.b2"),
                    ffn_ln_gain: p("ffn.ln.gain"),
                    ffn_ln_bias: p("ffn.ln.bias"),
                }
            })
            .collect();
        let classifier = ClassifierParams {
            weight: id("classifier.weight"),
            bias: id("classifier.bias"),
        };
        Ok(Self {
            config,
            store,
            embedding,
            layers,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn embedding(&self) -> &EmbeddingParams {
        &self.embedding
    }

    pub fn layer(&self, l: usize) -> &LayerParams {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn classifier(&self) -> &ClassifierParams {
        &self.classifier
    }

    /// Frozen copy for use as a distillation teacher.
    pub fn frozen(&self) -> Self {
        let mut m = self.clone();
        m.store.set_requires_grad(false);
        m.store.clear_grads();
        m
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.store.set_requires_grad(flag);
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }
}
