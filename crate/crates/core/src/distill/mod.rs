//! Two-stage knowledge distillation into a width- and depth-adaptive
//! student, label fine-tuning, and grid evaluation.

mod eval;
mod loss;
mod train;

pub use eval::{evaluate_all, evaluate_spec, select_model, EvalRow, EvalTable, Selected};
pub use loss::{
    distill_loss, loss_stage1, loss_stage2, LossValues, LossVars, TeacherTargets,
};
pub use train::{
    accumulate_batch, dropout_seed, finetune, train_stage, MetricRow, MetricsLog, TrainReport,
    TrainedPair, METRICS_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStage {
    /// Width-adaptive student from a fixed full teacher.
    Width,
    /// Width- and depth-adaptive student from the width-adaptive teacher.
    WidthDepth,
    /// Label cross-entropy only, no teacher.
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Conventional,
    /// Widths below 1.0 distill from the student's own full sub-network.
    Inplace,
    /// Each batch trains on the width endpoints plus random widths.
    UniversallySlimmable,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(Self::Conventional),
            "inplace" => Ok(Self::Inplace),
            "us" | "universally_slimmable" => Ok(Self::UniversallySlimmable),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Which teacher sub-network supplies targets for a student at width `m_w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherWidth {
    /// Teacher at `(m_w, 1.0)`.
    Matched,
    /// Teacher at `(1.0, 1.0)`.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillPlan {
    pub stage: PlanStage,
    pub mode: Mode,
    pub lambda1: f64,
    pub lambda2: f64,
    pub width_list: Vec<f64>,
    pub depth_list: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub teacher_width: TeacherWidth,
    /// Random widths drawn per batch in universally-slimmable mode.
    pub random_widths: usize,
    pub clip_norm: f64,
}

impl DistillPlan {
    fn base(stage: PlanStage, cfg: &ModelConfig) -> Self {
        Self {
            stage,
            mode: Mode::Conventional,
            lambda1: 1.0,
            lambda2: 1.0,
            width_list: cfg.width_list.clone(),
            depth_list: cfg.depth_list.clone(),
            epochs: 3,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            teacher_width: TeacherWidth::Matched,
            random_widths: 2,
            clip_norm: 1.0,
        }
    }

    /// Stage W defaults: λ = (1, 0.1), depth fixed at 1.0, full-size teacher.
    pub fn width(cfg: &ModelConfig) -> Self {
        Self {
            lambda2: 0.1,
            depth_list: vec![1.0],
            teacher_width: TeacherWidth::Full,
            ..Self::base(PlanStage::Width, cfg)
        }
    }

    /// Stage WD defaults: λ = (1, 1), teacher at the student's width.
    pub fn width_depth(cfg: &ModelConfig) -> Self {
        Self::base(PlanStage::WidthDepth, cfg)
    }

    pub fn finetune(cfg: &ModelConfig) -> Self {
        Self::base(PlanStage::Finetune, cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate {} is invalid", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip norm must be positive".into());
        }
        for (name, list) in [("width_list", &self.width_list), ("depth_list", &self.depth_list)] {
            if list.is_empty() || list.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
                return bad(format!("{name} entries must lie in (0, 1]: {list:?}"));
            }
        }
        if self.stage == PlanStage::Width && self.depth_list != [1.0] {
            return bad(format!(
                "the width stage trains depth 1.0 only, got depth_list {:?}",
                self.depth_list
            ));
        }
        if self.stage == PlanStage::Width && self.teacher_width != TeacherWidth::Full {
            return bad("the width stage distills from the full-width teacher".into());
        }
        if self.mode == Mode::UniversallySlimmable && !self.width_list.contains(&1.0) {
            return bad("universally-slimmable mode needs 1.0 in width_list".into());
        }
        if self.mode == Mode::Inplace && self.stage == PlanStage::Finetune {
            return bad("inplace mode needs a distillation stage".into());
        }
        Ok(())
    }

    /// Configurations trained on every batch, depth-major.
    pub fn grid(&self) -> Vec<crate::model::SubNetSpec> {
        self.depth_list
            .iter()
            .flat_map(|&d| {
                self.width_list
                    .iter()
                    .map(move |&w| crate::model::SubNetSpec::new(w, d))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_defaults() {
        let cfg = ModelConfig::default();
        let w = DistillPlan::width(&cfg);
        assert_eq!((w.lambda1, w.lambda2), (1.0, 0.1));
        assert_eq!(w.depth_list, vec![1.0]);
        let wd = DistillPlan::width_depth(&cfg);
        assert_eq!((wd.lambda1, wd.lambda2), (1.0, 1.0));
        assert_eq!(wd.grid().len(), 12);
        assert!(w.validate().is_ok() && wd.validate().is_ok());
    }

    #[test]
    fn invalid_plans() {
        let cfg = ModelConfig::default();
        let mut w = DistillPlan::width(&cfg);
        w.depth_list = vec![1.0, 0.5];
        assert!(w.validate().is_err());
        let mut wd = DistillPlan::width_depth(&cfg);
        wd.lambda2 = -1.0;
        assert!(wd.validate().is_err());
        assert_eq!("us".parse::<Mode>().unwrap(), Mode::UniversallySlimmable);
        assert!("other".parse::<Mode>().is_err());
    }
}
