mod common;

use adaptive_transformer::data::{Dataset, Example};
use adaptive_transformer::distill::{
    accumulate_batch, dropout_seed, loss_stage2, select_model, train_stage, DistillPlan, EvalRow, EvalTable,
    Mode, Selected, TeacherTargets, TrainedPair,
};
use adaptive_transformer::model::{forward, forward_on, layer_keep_sets, ForwardOptions, SubNetSpec};
use adaptive_transformer::numerics::Graph;
use adaptive_transformer::Error;

use common::{jitter, perturbed_model, random_batch, rng, tiny_config};

fn soft_ce(student: &[f64], teacher: &[f64], c: usize) -> f64 {
    let rows = student.len() / c;
    let mut total = 0.0;
    for r in 0..rows {
        let (s, t) = (&student[r * c..(r + 1) * c], &teacher[r * c..(r + 1) * c]);
        let tz: f64 = t.iter().map(|v| v.exp()).sum();
        let sz: f64 = s.iter().map(|v| v.exp()).sum();
        total -= (0..c).map(|i| t[i].exp() / tz * (s[i].exp() / sz).ln()).sum::<f64>();
    }
    total / rows as f64
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[test]
fn stage_two_loss_matches_hand_composition() {
    let cfg = tiny_config();
    let teacher = perturbed_model(&cfg, 1, 0.2);
    let student = jitter(&teacher, 2, 0.1);
    let batch = random_batch(&cfg, 3, 2, cfg.max_seq_len, &mut rng(3));
    let (l1, l2) = (0.7, 1.3);
    for spec in cfg.grid() {
        let t = forward(&teacher, SubNetSpec::new(spec.width, 1.0), &batch, false).unwrap();
        let s = forward(&student, spec, &batch, false).unwrap();
        let keep = layer_keep_sets(cfg.num_layers, spec.depth).unwrap();
        let c = cfg.num_classes;
        let mut want = l1 * soft_ce(s.logits.data(), t.logits.data(), c);
        let mut rep = mse(s.embedding.data(), t.embedding.data());
        for (k, &tl) in keep.teacher_match.iter().enumerate() {
            rep += mse(s.hidden[k].data(), t.hidden[tl - 1].data());
        }
        want += l2 * rep;

        let targets = TeacherTargets::from_trace(&t).unwrap();
        let mut g = Graph::new();
        let st = forward_on(&mut g, &student, spec, &batch, &ForwardOptions::eval()).unwrap();
        let loss = loss_stage2(&mut g, &st, &targets, l1, l2, cfg.num_layers, spec.depth).unwrap();
        let got = g.scalar(loss.total);
        assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{spec}: {got} vs {want}");
    }
}

#[test]
fn accumulated_gradient_is_sum_of_single_passes() {
    let cfg = tiny_config();
    let teacher = perturbed_model(&cfg, 4, 0.1).frozen();
    let student = jitter(&teacher, 5, 0.05);
    let plan = DistillPlan::width_depth(&cfg);
    let batch = random_batch(&cfg, 2, 2, 6, &mut rng(6));

    let mut acc = student.clone();
    let mut calls = Vec::new();
    let per_spec = accumulate_batch(&mut acc, Some(&teacher), &plan, &batch, &plan.width_list, 0, &mut calls).unwrap();
    assert_eq!(per_spec.len(), plan.grid().len());
    assert!(calls.iter().all(|s| s.depth == 1.0));
    assert_eq!(calls.len(), plan.width_list.len());

    // Each spec on its own, with the dropout stream of its loop position.
    let mut expected: Vec<Vec<f64>> = acc.store().iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
    for (di, &d) in plan.depth_list.iter().enumerate() {
        for (wi, &w) in plan.width_list.iter().enumerate() {
            let mut single = student.clone();
            let seed = dropout_seed(plan.seed, 0, di, wi);
            let t = forward(&teacher, SubNetSpec::new(w, 1.0), &batch, false).unwrap();
            let targets = TeacherTargets::from_trace(&t).unwrap();
            single.set_trainable(true);
            single.store_mut().zero_grad();
            let mut g = Graph::new();
            let st = forward_on(&mut g, &single, SubNetSpec::new(w, d), &batch, &ForwardOptions::train(seed)).unwrap();
            let loss = loss_stage2(&mut g, &st, &targets, plan.lambda1, plan.lambda2, cfg.num_layers, d).unwrap();
            g.backward(loss.total, single.store_mut()).unwrap();
            for (e, (_, _, t)) in expected.iter_mut().zip(single.store().iter()) {
                for (x, y) in e.iter_mut().zip(t.grad().unwrap()) {
                    *x += y;
                }
            }
        }
    }
    for (e, (_, name, t)) in expected.iter().zip(acc.store().iter()) {
        for (x, y) in e.iter().zip(t.grad().unwrap()) {
            assert!((x - y).abs() < 1e-12, "{name}: {x} vs {y}");
        }
    }
}

fn toy_data(n: usize) -> Dataset {
    Dataset::new(
        (0..n)
            .map(|i| Example {
                tokens: vec![i % 16, (i * 3) % 16, 3, 7, i % 5],
                label: i % 2,
            })
            .collect(),
    )
}

#[test]
fn training_is_deterministic_and_steps_once_per_batch() {
    let cfg = tiny_config();
    let teacher = perturbed_model(&cfg, 7, 0.1);
    let data = toy_data(20);
    let mut plan = DistillPlan::width_depth(&cfg);
    plan.epochs = 2;
    plan.batch_size = 8;
    let run = || {
        let mut pair = TrainedPair::new(&teacher);
        let report = train_stage(&mut pair, &plan, &data, Some(&data)).unwrap();
        (pair.into_student(), report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(ra.metrics.to_csv(), rb.metrics.to_csv());
    assert_eq!(ra.batches, 6);
    assert_eq!(ra.optimizer_steps, 6);
    assert_ne!(a.checksum(), teacher.checksum());
    assert_eq!(ra.final_dev.unwrap().rows.len(), plan.grid().len());
}

#[test]
fn universally_slimmable_mode_trains() {
    let cfg = tiny_config();
    let teacher = perturbed_model(&cfg, 8, 0.1);
    let mut plan = DistillPlan::width(&cfg);
    plan.mode = Mode::UniversallySlimmable;
    plan.epochs = 1;
    plan.batch_size = 10;
    let mut pair = TrainedPair::new(&teacher);
    let report = train_stage(&mut pair, &plan, &toy_data(20), None).unwrap();
    assert_eq!(report.optimizer_steps, 2);
    assert!(report.metrics.rows.iter().all(|r| r.losses.is_none_or(|l| l.is_finite())));
}

#[test]
fn nan_parameters_stop_training_with_a_numeric_error() {
    let cfg = tiny_config();
    let teacher = perturbed_model(&cfg, 9, 0.1).frozen();
    let mut student = teacher.clone();
    student.set_trainable(true);
    let id = student.store().find("layers.0.ffn.w1").unwrap();
    student.store_mut().get_mut(id).data_mut()[0] = f64::NAN;
    let plan = DistillPlan::width_depth(&cfg);
    let batch = random_batch(&cfg, 2, 2, 4, &mut rng(1));
    let err = accumulate_batch(&mut student, Some(&teacher), &plan, &batch, &plan.width_list, 0, &mut Vec::new());
    assert!(matches!(err, Err(Error::Numeric(_))), "{err:?}");
}

#[test]
fn selection_prefers_after_on_ties_and_needs_full_tables() {
    let grid = vec![SubNetSpec::FULL, SubNetSpec::new(0.5, 1.0)];
    let table = |a: f64, b: f64| EvalTable {
        rows: vec![
            EvalRow { spec: grid[0], accuracy: a },
            EvalRow { spec: grid[1], accuracy: b },
        ],
    };
    assert_eq!(select_model(&table(0.9, 0.7), &table(0.8, 0.8), &grid).unwrap(), Selected::After);
    assert_eq!(select_model(&table(0.9, 0.8), &table(0.8, 0.8), &grid).unwrap(), Selected::Before);
    let short = EvalTable { rows: vec![EvalRow { spec: grid[0], accuracy: 1.0 }] };
    assert!(select_model(&short, &table(0.5, 0.5), &grid).is_err());
}
