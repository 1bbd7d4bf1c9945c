use crate::error::{Error, Result};
use crate::model::{layer_keep_sets, ForwardTrace, TracedForward};
use crate::numerics::{Graph, Tensor, Var};

/// Detached teacher outputs used as distillation targets, flattened to 2-D:
/// logits `B×C`, embedding and hidden states `(B·n)×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    pub logits: Tensor,
    pub embedding: Tensor,
    /// One entry per teacher layer, in order.
    pub hidden: Vec<Tensor>,
}

impl TeacherTargets {
    pub fn from_trace(trace: &ForwardTrace) -> Result<Self> {
        let flat = |t: &Tensor| {
            let s = t.shape();
            t.clone().reshape(vec![s[0] * s[1], s[2]])
        };
        Ok(Self {
            logits: trace.logits.clone(),
            embedding: flat(&trace.embedding)?,
            hidden: trace.hidden.iter().map(flat).collect::<Result<_>>()?,
        })
    }

    /// Values read directly off a recorded forward pass.
    pub fn from_graph(g: &Graph, t: &TracedForward) -> Self {
        Self {
            logits: g.tensor(t.logits),
            embedding: g.tensor(t.embedding),
            hidden: t.hidden.iter().map(|&v| g.tensor(v)).collect(),
        }
    }
}

/// Graph handles of the loss terms. `total = λ1·pred + λ2·(emb + hidn)`.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub pred: Var,
    pub emb: Var,
    pub hidn: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub pred: f64,
    pub emb: f64,
    pub hidn: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            pred: g.scalar(self.pred),
            emb: g.scalar(self.emb),
            hidn: g.scalar(self.hidn),
            total: g.scalar(self.total),
        }
    }
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        [self.pred, self.emb, self.hidn, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Soft cross-entropy on logits plus MSE on the embedding output and on each
/// student hidden state against teacher layer `teacher_match[i]` (1-based).
pub fn distill_loss(
    g: &mut Graph,
    student: &TracedForward,
    targets: &TeacherTargets,
    teacher_match: &[usize],
    lambda1: f64,
    lambda2: f64,
) -> Result<LossVars> {
    if student.hidden.len() != teacher_match.len() {
        return Err(Error::Shape(format!(
            "student has {} layers but {} teacher matches",
            student.hidden.len(),
            teacher_match.len()
        )));
    }
    if let Some(&t) = teacher_match
        .iter()
        .find(|&&t| t == 0 || t > targets.hidden.len())
    {
        return Err(Error::Shape(format!(
            "teacher layer {t} outside 1..={}",
            targets.hidden.len()
        )));
    }
    let t_logits = g.input(&targets.logits);
    let pred = g.soft_cross_entropy(student.logits, t_logits)?;
    let t_emb = g.input(&targets.embedding);
    let emb = g.mse(student.embedding, t_emb)?;
    let mut hidn: Option<Var> = None;
    for (&h, &t) in student.hidden.iter().zip(teacher_match) {
        let target = g.input(&targets.hidden[t - 1]);
        let term = g.mse(h, target)?;
        hidn = Some(match hidn {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let hidn = match hidn {
        Some(v) => v,
        None => g.input_raw(vec![], vec![0.0])?,
    };
    let inner = g.add(emb, hidn)?;
    let a = g.scale(pred, lambda1);
    let b = g.scale(inner, lambda2);
    let total = g.add(a, b)?;
    Ok(LossVars {
        pred,
        emb,
        hidn,
        total,
    })
}

/// Width-stage loss: every student layer is matched to the teacher layer of
/// the same index.
pub fn loss_stage1(
    g: &mut Graph,
    student: &TracedForward,
    targets: &TeacherTargets,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossVars> {
    let matches: Vec<usize> = (1..=targets.hidden.len()).collect();
    distill_loss(g, student, targets, &matches, lambda1, lambda2)
}

/// Width-and-depth loss: student layers kept under `m_d` are matched to
/// teacher layers by the every-other dropping rule.
pub fn loss_stage2(
    g: &mut Graph,
    student: &TracedForward,
    targets: &TeacherTargets,
    lambda1: f64,
    lambda2: f64,
    num_layers: usize,
    m_d: f64,
) -> Result<LossVars> {
    let keep = layer_keep_sets(num_layers, m_d)?;
    distill_loss(g, student, targets, &keep.teacher_match, lambda1, lambda2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_on, AdaptiveModel, Batch, ForwardOptions, ModelConfig, SubNetSpec};

    fn setup() -> (AdaptiveModel, Batch) {
        let cfg = ModelConfig {
            num_layers: 2,
            hidden: 8,
            num_heads: 2,
            head_dim: 4,
            ffn_dim: 8,
            width_list: vec![1.0, 0.5],
            depth_list: vec![1.0, 0.5],
            ..ModelConfig::default()
        };
        let m = AdaptiveModel::new(cfg, 5).unwrap();
        let b = Batch::from_sequences(&[vec![1, 2, 3], vec![4, 5, 6]], vec![0, 1]).unwrap();
        (m, b)
    }

    #[test]
    fn self_distillation_is_teacher_entropy() {
        let (m, b) = setup();
        let mut g = Graph::new();
        let t = forward_on(&mut g, &m, SubNetSpec::FULL, &b, &ForwardOptions::eval()).unwrap();
        let targets = TeacherTargets::from_graph(&g, &t);
        let l = loss_stage1(&mut g, &t, &targets, 1.0, 0.1).unwrap().values(&g);
        let c = 2;
        let entropy: f64 = targets
            .logits
            .data()
            .chunks(c)
            .map(|row| {
                let mx = row.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                -row.iter()
                    .map(|v| {
                        let p = (v - mx).exp() / z;
                        p * p.ln()
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 2.0;
        assert!((l.total - entropy).abs() < 1e-10, "{} vs {entropy}", l.total);
        assert_eq!(l.emb, 0.0);
        assert_eq!(l.hidn, 0.0);
    }

    #[test]
    fn layer_count_mismatch_is_error() {
        let (m, b) = setup();
        let mut g = Graph::new();
        let full = forward_on(&mut g, &m, SubNetSpec::FULL, &b, &ForwardOptions::eval()).unwrap();
        let targets = TeacherTargets::from_graph(&g, &full);
        let half = forward_on(&mut g, &m, SubNetSpec::new(1.0, 0.5), &b, &ForwardOptions::eval())
            .unwrap();
        assert!(loss_stage1(&mut g, &half, &targets, 1.0, 1.0).is_err());
        let l = loss_stage2(&mut g, &half, &targets, 1.0, 1.0, 2, 0.5).unwrap();
        assert!(g.scalar(l.total).is_finite());
    }

    #[test]
    fn targets_from_trace_match_graph() {
        let (m, b) = setup();
        let trace = crate::model::forward(&m, SubNetSpec::FULL, &b, false).unwrap();
        let mut g = Graph::new();
        let t = forward_on(&mut g, &m, SubNetSpec::FULL, &b, &ForwardOptions::eval()).unwrap();
        assert_eq!(TeacherTargets::from_trace(&trace).unwrap(), TeacherTargets::from_graph(&g, &t));
    }
}
