mod common;

use adaptive_transformer::numerics::kernels::{layer_norm_slice, softmax_rows_slice};
use adaptive_transformer::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

use common::{rel_err, rng};

fn store_with(shapes: &[(&str, Vec<usize>)], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .map(|(name, shape)| {
            let t = Tensor::from_fn(shape.clone(), |_| r.random::<f64>() * 2.0 - 1.0);
            s.add(*name, t.with_requires_grad(true))
        })
        .collect();
    (s, ids)
}

/// Compares every parameter gradient of `loss` against central differences.
fn check_gradients(store: &mut ParamStore, loss: impl Fn(&mut Graph, &ParamStore) -> Var, tol: f64) {
    store.zero_grad();
    let mut g = Graph::new();
    let l = loss(&mut g, store);
    g.backward(l, store).unwrap();
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    let h = 1e-5;
    for id in ids {
        let analytic = store.get(id).grad().unwrap().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[i];
            let mut eval = |v: f64| {
                store.get_mut(id).data_mut()[i] = v;
                let mut g = Graph::new();
                let l = loss(&mut g, store);
                g.scalar(l)
            };
            let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            store.get_mut(id).data_mut()[i] = orig;
            let e = rel_err(a, numeric);
            let both_zero = a.abs() < 1e-12 && numeric.abs() < 1e-9;
            assert!(
                e < tol || both_zero,
                "{}[{i}]: analytic {a} numeric {numeric} rel {e}",
                store.name(id)
            );
        }
    }
}

#[test]
fn matmul_gradient() {
    let (mut s, ids) = store_with(&[("a", vec![3, 4]), ("b", vec![4, 2])], 1);
    check_gradients(
        &mut s,
        |g, s| {
            let (a, b) = (g.param(s, ids[0]), g.param(s, ids[1]));
            let c = g.matmul(a, b).unwrap();
            g.sum(c)
        },
        1e-7,
    );
}

#[test]
fn layer_norm_gradient() {
    let (mut s, ids) = store_with(&[("x", vec![3, 5]), ("gain", vec![5]), ("bias", vec![5]), ("w", vec![3, 5])], 2);
    let w = s.get(ids[3]).clone();
    check_gradients(
        &mut s,
        |g, s| {
            let (x, ga, b) = (g.param(s, ids[0]), g.param(s, ids[1]), g.param(s, ids[2]));
            let y = g.layer_norm(x, ga, b).unwrap();
            let wv = g.input(&w);
            g.mse(y, wv).unwrap()
        },
        1e-6,
    );
}

#[test]
fn composite_gradient() {
    let (mut s, ids) = store_with(
        &[("x", vec![4, 6]), ("w", vec![6, 6]), ("b", vec![6]), ("gain", vec![6]), ("bias", vec![6])],
        3,
    );
    let target = Tensor::from_fn(vec![4, 4], |i| ((i * 7) % 5) as f64 * 0.1);
    check_gradients(
        &mut s,
        |g, s| {
            let p: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let h = g.matmul(p[0], p[1]).unwrap();
            let h = g.add_row(h, p[2]).unwrap();
            let h = g.gelu(h);
            let h = g.layer_norm(h, p[3], p[4]).unwrap();
            let q = g.slice_cols(h, 0..4).unwrap();
            let k = g.slice_cols(h, 2..6).unwrap();
            let sc = g.grouped_scores(q, k, 2).unwrap();
            let sc = g.scale(sc, 0.5);
            let pr = g.softmax_rows(sc);
            let v = g.slice_cols(h, 1..5).unwrap();
            let ctx = g.grouped_apply(pr, v, 2).unwrap();
            let both = g.concat_cols(&[ctx, q]).unwrap();
            let t = g.input(&target);
            let tgt8 = g.concat_cols(&[t, ctx]).unwrap();
            let m = g.mse(both, tgt8).unwrap();
            let logits = g.slice_cols(h, 0..3).unwrap();
            let ce = g.cross_entropy(logits, &[0, 2, 1, 2]).unwrap();
            let teacher = g.input(&Tensor::from_fn(vec![4, 3], |i| i as f64 * 0.3));
            let sce = g.soft_cross_entropy(logits, teacher).unwrap();
            let a = g.add(m, ce).unwrap();
            g.add(a, sce).unwrap()
        },
        1e-5,
    );
}

#[test]
fn backward_accumulates_exactly() {
    let (mut s, ids) = store_with(&[("w", vec![3, 3])], 4);
    let grad_of = |s: &mut ParamStore, k: f64| {
        let mut g = Graph::new();
        let w = g.param(s, ids[0]);
        let y = g.gelu(w);
        let y = g.scale(y, k);
        let l = g.sum(y);
        g.backward(l, s).unwrap();
    };
    s.zero_grad();
    grad_of(&mut s, 1.0);
    let g1 = s.get(ids[0]).grad().unwrap().to_vec();
    s.zero_grad();
    grad_of(&mut s, 3.0);
    let g2 = s.get(ids[0]).grad().unwrap().to_vec();
    s.zero_grad();
    grad_of(&mut s, 1.0);
    grad_of(&mut s, 3.0);
    let both = s.get(ids[0]).grad().unwrap();
    for i in 0..9 {
        assert_eq!(both[i], g1[i] + g2[i]);
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..9,
        seed in any::<u64>(),
        spread in 0.1f64..50.0,
    ) {
        let mut r = rng(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| (r.random::<f64>() - 0.5) * spread).collect();
        let p = softmax_rows_slice(&x, cols);
        for row in p.chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes(cols in 2usize..12, seed in any::<u64>(), scale in 0.5f64..20.0) {
        let mut r = rng(seed);
        let x: Vec<f64> = (0..cols).map(|_| (r.random::<f64>() - 0.5) * scale).collect();
        let y = layer_norm_slice(&x, cols, &vec![1.0; cols], &vec![0.0; cols]).out;
        let mean = y.iter().sum::<f64>() / cols as f64;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        prop_assert!(mean.abs() < 1e-10);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }
}
