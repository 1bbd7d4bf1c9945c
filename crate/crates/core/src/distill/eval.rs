use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, AdaptiveModel, Batch, SubNetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub spec: SubNetSpec,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn get(&self, spec: SubNetSpec) -> Option<f64> {
        self.rows.iter().find(|r| r.spec == spec).map(|r| r.accuracy)
    }

    pub fn mean(&self) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().map(|r| r.accuracy).sum::<f64>() / self.rows.len() as f64
    }

    /// `m_w,m_d,accuracy` rows in table order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m_w,m_d,accuracy\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:?}", r.spec.width, r.spec.depth, r.accuracy);
        }
        out
    }

    /// Mean accuracy over `grid`, failing on the first configuration missing
    /// from the table.
    pub fn mean_over(&self, grid: &[SubNetSpec]) -> Result<f64> {
        let mut sum = 0.0;
        for &spec in grid {
            sum += self.get(spec).ok_or_else(|| {
                Error::Data(format!("no accuracy recorded for configuration {spec}"))
            })?;
        }
        Ok(sum / grid.len() as f64)
    }
}

/// Fraction of correctly classified examples over `batches`.
pub fn evaluate_spec(model: &AdaptiveModel, spec: SubNetSpec, batches: &[Batch]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for b in batches {
        if b.labels.len() != b.batch_size {
            return Err(Error::Data("evaluation needs labelled data".into()));
        }
        let trace = forward(model, spec, b, false)?;
        correct += trace
            .predictions()
            .iter()
            .zip(&b.labels)
            .filter(|(p, l)| p == l)
            .count();
        total += b.batch_size;
    }
    if total == 0 {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Accuracy of every configuration in `specs`; configurations are evaluated
/// in parallel and reported in the given order.
pub fn evaluate_all(
    model: &AdaptiveModel,
    data: &Dataset,
    specs: &[SubNetSpec],
    batch_size: usize,
) -> Result<EvalTable> {
    let batches = data.batches(batch_size)?;
    let rows = specs
        .par_iter()
        .map(|&spec| {
            evaluate_spec(model, spec, &batches).map(|accuracy| EvalRow { spec, accuracy })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalTable { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selected {
    Before,
    After,
}

impl Selected {
    pub fn pick<T>(self, before: T, after: T) -> T {
        match self {
            Selected::Before => before,
            Selected::After => after,
        }
    }
}

/// Chooses the model with the higher mean accuracy over `grid`; a tie goes
/// to `after`.
pub fn select_model(before: &EvalTable, after: &EvalTable, grid: &[SubNetSpec]) -> Result<Selected> {
    if grid.is_empty() {
        return Err(Error::Data("selection grid is empty".into()));
    }
    let b = before.mean_over(grid)?;
    let a = after.mean_over(grid)?;
    Ok(if a >= b { Selected::After } else { Selected::Before })
}
