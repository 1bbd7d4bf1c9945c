//! Labelled token sequences: the tab-separated dataset format, batching and
//! the synthetic classification tasks.

mod synthetic;

pub use synthetic::{generate_task, label_of, Splits, SyntheticTask, TaskKind, BIGRAM};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Batch, ModelConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Parses `label<TAB>id id id` lines. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut examples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Data(format!("line {}: {m}", i + 1));
            let (label, toks) = line.split_once('\t').ok_or_else(|| bad("missing TAB"))?;
            let label = label.trim().parse().map_err(|_| bad("label is not an integer"))?;
            let tokens = toks
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("token id is not an integer")))
                .collect::<Result<Vec<usize>>>()?;
            if tokens.is_empty() {
                return Err(bad("no tokens"));
            }
            examples.push(Example { tokens, label });
        }
        Ok(Self { examples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            let toks: Vec<String> = ex.tokens.iter().map(ToString::to_string).collect();
            let _ = writeln!(out, "{}\t{}", ex.label, toks.join(" "));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    /// Checks token ids, labels and lengths against a model configuration.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.label >= cfg.num_classes {
                return Err(Error::Data(format!(
                    "example {i}: label {} >= num_classes {}",
                    ex.label, cfg.num_classes
                )));
            }
            if let Some(t) = ex.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::Data(format!(
                    "example {i}: token {t} >= vocab_size {}",
                    cfg.vocab_size
                )));
            }
            if ex.tokens.len() > cfg.max_seq_len {
                return Err(Error::Data(format!(
                    "example {i}: length {} > max_seq_len {}",
                    ex.tokens.len(),
                    cfg.max_seq_len
                )));
            }
        }
        Ok(())
    }

    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut examples = self.examples.clone();
        examples.extend(other.examples.iter().cloned());
        Dataset { examples }
    }

    /// Consecutive batches in file order.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<Batch>> {
        let order: Vec<usize> = (0..self.len()).collect();
        self.batches_in_order(batch_size, &order)
    }

    /// Batches in a seeded shuffled order.
    pub fn shuffled_batches(&self, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.batches_in_order(batch_size, &order)
    }

    fn batches_in_order(&self, batch_size: usize, order: &[usize]) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        order
            .chunks(batch_size)
            .map(|idx| {
                let seqs: Vec<Vec<usize>> =
                    idx.iter().map(|&i| self.examples[i].tokens.clone()).collect();
                let labels = idx.iter().map(|&i| self.examples[i].label).collect();
                Batch::from_sequences(&seqs, labels)
            })
            .collect()
    }

    /// Fraction of examples with label 1.
    pub fn positive_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.examples.iter().filter(|e| e.label == 1).count() as f64 / self.len() as f64
    }
}
