use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::eval::{evaluate_all, EvalTable};
use super::loss::{distill_loss, LossValues, LossVars, TeacherTargets};
use super::{DistillPlan, Mode, PlanStage, TeacherWidth};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    forward_on, forward_with, kept_heads, kept_neurons, layer_keep_sets, AdaptiveModel, Batch,
    ForwardOptions, SubNetSpec,
};
use crate::numerics::{AdamConfig, AdamState, Graph};

/// A frozen teacher and the student trained against it.
#[derive(Debug, Clone)]
pub struct TrainedPair {
    teacher: AdaptiveModel,
    pub student: AdaptiveModel,
}

impl TrainedPair {
    /// Student starts as a copy of the teacher.
    pub fn new(teacher: &AdaptiveModel) -> Self {
        let mut student = teacher.clone();
        student.set_trainable(true);
        Self {
            teacher: teacher.frozen(),
            student,
        }
    }

    pub fn with_student(teacher: &AdaptiveModel, student: AdaptiveModel) -> Result<Self> {
        if teacher.config() != student.config() {
            return Err(Error::Config("teacher and student configurations differ".into()));
        }
        Ok(Self {
            teacher: teacher.frozen(),
            student,
        })
    }

    pub fn teacher(&self) -> &AdaptiveModel {
        &self.teacher
    }

    pub fn into_student(self) -> AdaptiveModel {
        self.student
    }
}

pub const METRICS_HEADER: &str =
    "epoch,step,m_w,m_d,loss_pred,loss_emb,loss_hidn,loss_total,dev_accuracy";

/// One metrics line: either the losses of one configuration on one batch, or
/// the end-of-epoch dev accuracy of one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: u64,
    pub spec: SubNetSpec,
    pub losses: Option<LossValues>,
    pub dev_accuracy: Option<f64>,
}

impl MetricRow {
    pub fn to_csv_line(&self) -> String {
        let mut s = format!(
            "{},{},{},{}",
            self.epoch, self.step, self.spec.width, self.spec.depth
        );
        match self.losses {
            Some(l) => {
                let _ = write!(s, ",{:?},{:?},{:?},{:?}", l.pred, l.emb, l.hidn, l.total);
            }
            None => s.push_str(",,,,"),
        }
        match self.dev_accuracy {
            Some(a) => {
                let _ = write!(s, ",{a:?}");
            }
            None => s.push(','),
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            out.push_str(&r.to_csv_line());
            out.push('\n');
        }
        out
    }

    /// Appends rows to `path`, writing the header if the file is new.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        use std::io::Write as _;
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        let mut text = String::new();
        if fresh {
            text.push_str(METRICS_HEADER);
            text.push('\n');
        }
        for r in &self.rows {
            text.push_str(&r.to_csv_line());
            text.push('\n');
        }
        f.write_all(text.as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub metrics: MetricsLog,
    pub batches: u64,
    pub optimizer_steps: u64,
    /// Every teacher sub-network evaluated, in call order.
    pub teacher_calls: Vec<SubNetSpec>,
    /// Dev accuracy after the last epoch, if dev data was given.
    pub final_dev: Option<EvalTable>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0, |h, &p| splitmix(h ^ p))
}

/// Dropout seed of the student pass for depth slot `di` and width slot `wi`
/// on optimizer step `step`.
pub fn dropout_seed(seed: u64, step: u64, di: usize, wi: usize) -> u64 {
    mix(&[seed, step, di as u64, wi as u64])
}

fn teacher_targets(model: &AdaptiveModel, spec: SubNetSpec, batch: &Batch) -> Result<TeacherTargets> {
    TeacherTargets::from_trace(&forward_with(model, spec, batch, &ForwardOptions::eval())?)
}

/// Clears the student's gradients, then runs the depth-outer, width-inner
/// loop on one batch, accumulating every configuration's gradient. No
/// optimizer step is taken. Returns the per-configuration losses.
pub fn accumulate_batch(
    student: &mut AdaptiveModel,
    teacher: Option<&AdaptiveModel>,
    plan: &DistillPlan,
    batch: &Batch,
    widths: &[f64],
    step: u64,
    teacher_calls: &mut Vec<SubNetSpec>,
) -> Result<Vec<(SubNetSpec, LossValues)>> {
    if plan.stage != PlanStage::Finetune && teacher.is_none() {
        return Err(Error::Config("distillation stages need a teacher".into()));
    }
    if batch.labels.len() != batch.batch_size {
        return Err(Error::Data("training batch without labels".into()));
    }
    student.store_mut().zero_grad();
    let num_layers = student.config().num_layers;
    let mut cache: Vec<(u64, TeacherTargets)> = Vec::new();
    let mut own_full: Option<TeacherTargets> = None;
    let mut out = Vec::with_capacity(plan.depth_list.len() * widths.len());

    for (di, &m_d) in plan.depth_list.iter().enumerate() {
        let keep = layer_keep_sets(num_layers, m_d)?;
        for (wi, &m_w) in widths.iter().enumerate() {
            let spec = SubNetSpec::new(m_w, m_d);
            let mut g = Graph::new();
            let opts = ForwardOptions::train(dropout_seed(plan.seed, step, di, wi));
            let st = forward_on(&mut g, student, spec, batch, &opts)?;
            let vars = if plan.stage == PlanStage::Finetune {
                let ce = g.cross_entropy(st.logits, &batch.labels)?;
                let zero = g.input_raw(vec![], vec![0.0])?;
                LossVars {
                    pred: ce,
                    emb: zero,
                    hidn: zero,
                    total: ce,
                }
            } else {
                let targets = if plan.mode == Mode::Inplace && m_w < 1.0 {
                    if own_full.is_none() {
                        own_full = Some(teacher_targets(student, SubNetSpec::FULL, batch)?);
                    }
                    own_full.as_ref().expect("just filled")
                } else {
                    let tw = match plan.teacher_width {
                        TeacherWidth::Full => 1.0,
                        TeacherWidth::Matched => m_w,
                    };
                    let key = tw.to_bits();
                    let idx = match cache.iter().position(|(k, _)| *k == key) {
                        Some(i) => i,
                        None => {
                            let tspec = SubNetSpec::new(tw, 1.0);
                            let teacher = teacher.expect("checked above");
                            cache.push((key, teacher_targets(teacher, tspec, batch)?));
                            teacher_calls.push(tspec);
                            cache.len() - 1
                        }
                    };
                    &cache[idx].1
                };
                distill_loss(
                    &mut g,
                    &st,
                    targets,
                    &keep.teacher_match,
                    plan.lambda1,
                    plan.lambda2,
                )?
            };
            let values = vars.values(&g);
            if !values.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {step}, configuration {spec}: pred {} emb {} hidn {}",
                    values.pred, values.emb, values.hidn
                )));
            }
            g.backward(vars.total, student.store_mut())?;
            out.push((spec, values));
        }
    }
    Ok(out)
}

fn batch_widths(plan: &DistillPlan, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if plan.mode != Mode::UniversallySlimmable {
        return plan.width_list.clone();
    }
    let lo = plan.width_list.iter().cloned().fold(1.0, f64::min);
    let mut widths = vec![1.0];
    for _ in 0..plan.random_widths {
        // Uniform on (lo, 1].
        widths.push(1.0 - rng.random::<f64>() * (1.0 - lo));
    }
    if lo < 1.0 {
        widths.push(lo);
    }
    widths
}

fn check_plan_against(model: &AdaptiveModel, plan: &DistillPlan) -> Result<()> {
    let cfg = model.config();
    for &w in &plan.width_list {
        kept_heads(cfg, w)?;
        kept_neurons(cfg, w)?;
    }
    for &d in &plan.depth_list {
        layer_keep_sets(cfg.num_layers, d)?;
    }
    Ok(())
}

fn run(
    student: &mut AdaptiveModel,
    teacher: Option<&AdaptiveModel>,
    plan: &DistillPlan,
    train: &Dataset,
    dev: Option<&Dataset>,
) -> Result<TrainReport> {
    plan.validate()?;
    check_plan_against(student, plan)?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    train.validate(student.config())?;
    if let Some(dev) = dev {
        dev.validate(student.config())?;
    }
    student.set_trainable(true);
    let per_epoch = train.len().div_ceil(plan.batch_size) as u64;
    let total = per_epoch * plan.epochs as u64;
    let mut adam = AdamState::new(
        student.store(),
        AdamConfig {
            lr: plan.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[plan.seed, 0x7769_6474_6873]));
    let mut report = TrainReport {
        metrics: MetricsLog::default(),
        batches: 0,
        optimizer_steps: 0,
        teacher_calls: Vec::new(),
        final_dev: None,
    };
    let mut step = 0u64;
    for epoch in 0..plan.epochs {
        let batches = train.shuffled_batches(plan.batch_size, mix(&[plan.seed, epoch as u64]))?;
        for batch in &batches {
            let widths = batch_widths(plan, &mut rng);
            let losses = accumulate_batch(
                student,
                teacher,
                plan,
                batch,
                &widths,
                step,
                &mut report.teacher_calls,
            )?;
            student.store_mut().clip_global_norm(plan.clip_norm)?;
            adam.step(student.store_mut(), step as f64 / total as f64)?;
            report.optimizer_steps += 1;
            report.batches += 1;
            for (spec, l) in losses {
                report.metrics.rows.push(MetricRow {
                    epoch,
                    step,
                    spec,
                    losses: Some(l),
                    dev_accuracy: None,
                });
            }
            step += 1;
        }
        if let Some(dev) = dev {
            let table = evaluate_all(student, dev, &plan.grid(), plan.batch_size)?;
            for r in &table.rows {
                report.metrics.rows.push(MetricRow {
                    epoch,
                    step,
                    spec: r.spec,
                    losses: None,
                    dev_accuracy: Some(r.accuracy),
                });
            }
            report.final_dev = Some(table);
        }
    }
    student.store_mut().clear_grads();
    Ok(report)
}

/// Distillation stage W or WD: trains `pair.student` against the frozen
/// teacher with one clipped Adam step per batch.
pub fn train_stage(
    pair: &mut TrainedPair,
    plan: &DistillPlan,
    train: &Dataset,
    dev: Option<&Dataset>,
) -> Result<TrainReport> {
    if plan.stage == PlanStage::Finetune {
        return Err(Error::Config("use finetune for the label-only stage".into()));
    }
    let TrainedPair { teacher, student } = pair;
    run(student, Some(teacher), plan, train, dev)
}

/// Label cross-entropy over the same configuration loop, no teacher.
pub fn finetune(
    model: &mut AdaptiveModel,
    plan: &DistillPlan,
    train: &Dataset,
    dev: Option<&Dataset>,
) -> Result<TrainReport> {
    if plan.stage != PlanStage::Finetune {
        return Err(Error::Config("finetune needs a fine-tuning plan".into()));
    }
    run(model, None, plan, train, dev)
}
