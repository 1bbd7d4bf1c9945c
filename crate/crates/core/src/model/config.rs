use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale applied to attention scores before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    /// `1/sqrt(head_dim)`, the BERT convention.
    #[default]
    HeadDim,
    /// `1/sqrt(hidden)`.
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    /// Descending width multipliers; must contain 1.0.
    pub width_list: Vec<f64>,
    /// Descending depth multipliers; must contain 1.0.
    pub depth_list: Vec<f64>,
    #[serde(default)]
    pub score_scale: ScoreScale,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for ModelConfig {
    /// The desk-scale configuration.
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden: 64,
            num_heads: 4,
            head_dim: 16,
            ffn_dim: 128,
            vocab_size: 32,
            max_seq_len: 16,
            num_classes: 2,
            dropout: 0.1,
            attention_dropout: 0.1,
            width_list: vec![1.0, 0.75, 0.5, 0.25],
            depth_list: vec![1.0, 0.75, 0.5],
            score_scale: ScoreScale::HeadDim,
            init_std: default_init_std(),
        }
    }
}

// Tolerance for floor() of products like 0.29 * 100.
const FLOOR_SLACK: f64 = 1e-9;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 || self.ffn_dim == 0 {
            return cfg_err("layer, head, head_dim and ffn sizes must be positive".into());
        }
        if self.hidden != self.num_heads * self.head_dim {
            return cfg_err(format!(
                "hidden {} != num_heads {} x head_dim {}",
                self.hidden, self.num_heads, self.head_dim
            ));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.num_classes < 2 {
            return cfg_err("vocab, max_seq_len must be positive and num_classes >= 2".into());
        }
        for (name, p) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return cfg_err(format!("{name} {p} outside [0, 1)"));
            }
        }
        check_list("width_list", &self.width_list)?;
        check_list("depth_list", &self.depth_list)?;
        for &w in &self.width_list {
            kept_heads(self, w)?;
            kept_neurons(self, w)?;
        }
        for &m in &self.depth_list {
            layer_keep_sets(self.num_layers, m)?;
        }
        Ok(())
    }

    pub fn score_scale_value(&self) -> f64 {
        match self.score_scale {
            ScoreScale::HeadDim => 1.0 / (self.head_dim as f64).sqrt(),
            ScoreScale::Hidden => 1.0 / (self.hidden as f64).sqrt(),
        }
    }

    /// Every (width, depth) pair of the configured grid, depth-major.
    pub fn grid(&self) -> Vec<SubNetSpec> {
        self.depth_list
            .iter()
            .flat_map(|&d| self.width_list.iter().map(move |&w| SubNetSpec::new(w, d)))
            .collect()
    }
}

fn check_list(name: &str, list: &[f64]) -> Result<()> {
    if !list.contains(&1.0) {
        return Err(Error::Config(format!("{name} must contain 1.0")));
    }
    if list.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Config(format!("{name} must be strictly descending: {list:?}")));
    }
    if list.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::Config(format!("{name} entries must lie in (0, 1]: {list:?}")));
    }
    Ok(())
}

/// A (width multiplier, depth multiplier) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubNetSpec {
    pub width: f64,
    pub depth: f64,
}

impl SubNetSpec {
    pub const FULL: SubNetSpec = SubNetSpec {
        width: 1.0,
        depth: 1.0,
    };

    pub fn new(width: f64, depth: f64) -> Self {
        Self { width, depth }
    }
}

impl fmt::Display for SubNetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.width, self.depth)
    }
}

fn kept(count: usize, m_w: f64, what: &str) -> Result<usize> {
    if !(m_w > 0.0 && m_w <= 1.0) {
        return Err(Error::Config(format!("width multiplier {m_w} outside (0, 1]")));
    }
    let k = (m_w * count as f64 + FLOOR_SLACK).floor() as usize;
    if k == 0 {
        return Err(Error::Config(format!(
            "width multiplier {m_w} keeps no {what} out of {count}"
        )));
    }
    Ok(k.min(count))
}

/// Number of leftmost attention heads a width multiplier keeps.
pub fn kept_heads(cfg: &ModelConfig, m_w: f64) -> Result<usize> {
    kept(cfg.num_heads, m_w, "heads")
}

/// Number of leftmost FFN neurons a width multiplier keeps.
pub fn kept_neurons(cfg: &ModelConfig, m_w: f64) -> Result<usize> {
    kept(cfg.ffn_dim, m_w, "neurons")
}

/// Student layers kept under a depth multiplier and the teacher layers they
/// are matched to, both 1-based and ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerKeepSets {
    pub kept: Vec<usize>,
    pub teacher_match: Vec<usize>,
}

/// Every-other layer dropping: with period `p = 1/(1 − m_d)`, drop depth `d`
/// when `d mod p == 0`; match survivors to teacher depths with
/// `(d + 1) mod p != 0`, so the teacher's last layer is always matched.
pub fn layer_keep_sets(num_layers: usize, m_d: f64) -> Result<LayerKeepSets> {
    if !(m_d > 0.0 && m_d <= 1.0) {
        return Err(Error::Config(format!("depth multiplier {m_d} outside (0, 1]")));
    }
    if m_d == 1.0 {
        let all: Vec<usize> = (1..=num_layers).collect();
        return Ok(LayerKeepSets {
            kept: all.clone(),
            teacher_match: all,
        });
    }
    let ratio = 1.0 / (1.0 - m_d);
    let period = ratio.round();
    if (ratio - period).abs() > 1e-9 || period < 2.0 {
        return Err(Error::Config(format!(
            "depth multiplier {m_d}: 1/(1 - m_d) = {ratio} is not an integer >= 2"
        )));
    }
    let period = period as usize;
    if !num_layers.is_multiple_of(period) {
        return Err(Error::Config(format!(
            "depth multiplier {m_d} needs a layer count divisible by {period}, got {num_layers}"
        )));
    }
    let kept = (1..=num_layers).filter(|d| d % period != 0).collect();
    let teacher_match = (1..=num_layers).filter(|d| (d + 1) % period != 0).collect();
    Ok(LayerKeepSets {
        kept,
        teacher_match,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(heads: usize, ffn: usize) -> ModelConfig {
        ModelConfig {
            num_heads: heads,
            head_dim: 1,
            hidden: heads,
            ffn_dim: ffn,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn kept_counts_floor() {
        let c = cfg(12, 3072);
        assert_eq!(kept_heads(&c, 0.75).unwrap(), 9);
        assert_eq!(kept_neurons(&c, 0.75).unwrap(), 2304);
        assert_eq!(kept_heads(&c, 1.0).unwrap(), 12);
        assert_eq!(kept_neurons(&c, 1.0).unwrap(), 3072);
        assert_eq!(kept_heads(&cfg(4, 8), 0.25).unwrap(), 1);
    }

    #[test]
    fn zero_kept_is_config_error() {
        assert!(matches!(kept_heads(&cfg(4, 8), 0.2), Err(Error::Config(_))));
        assert!(kept_heads(&cfg(4, 8), 0.0).is_err());
    }

    #[test]
    fn layer_tables() {
        let s = layer_keep_sets(12, 1.0).unwrap();
        assert_eq!(s.kept, (1..=12).collect::<Vec<_>>());
        assert_eq!(s.teacher_match, s.kept);

        let s = layer_keep_sets(12, 0.75).unwrap();
        assert_eq!(s.kept, vec![1, 2, 3, 5, 6, 7, 9, 10, 11]);
        assert_eq!(s.teacher_match, vec![1, 2, 4, 5, 6, 8, 9, 10, 12]);

        let s = layer_keep_sets(12, 0.5).unwrap();
        assert_eq!(s.kept, vec![1, 3, 5, 7, 9, 11]);
        assert_eq!(s.teacher_match, vec![2, 4, 6, 8, 10, 12]);

        let s = layer_keep_sets(8, 0.5).unwrap();
        assert_eq!(s.kept, vec![1, 3, 5, 7]);
        assert_eq!(s.teacher_match, vec![2, 4, 6, 8]);
    }

    #[test]
    fn non_integral_period_rejected() {
        assert!(matches!(layer_keep_sets(12, 0.6), Err(Error::Config(_))));
        assert!(layer_keep_sets(6, 0.75).is_err());
    }

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().grid().len(), 12);
    }

    #[test]
    fn config_rejects_bad_lists() {
        let bad = [
            ModelConfig { width_list: vec![0.5, 1.0], ..ModelConfig::default() },
            ModelConfig { depth_list: vec![0.75], ..ModelConfig::default() },
            ModelConfig { hidden: 63, ..ModelConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }
}
