use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn tight() -> GradCheckConfig {
    GradCheckConfig {
        tol: 1e-6,
        ..GradCheckConfig::default()
    }
}

#[test]
fn affine_zero_case() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[3, 4])).unwrap();
    let w = g.input(Tensor::full(&[4, 2], 0.7)).unwrap();
    let b = g.input(Tensor::zeros(&[2])).unwrap();
    let y = affine(&mut g, x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 6]);
}

#[test]
fn affine_identity_rows_select_weight_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let wt = random_tensor(&mut rng, &[3, 5]);
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let mut g = Graph::new();
    let x = g.input(eye).unwrap();
    let w = g.input(wt.clone()).unwrap();
    let b = g.input(Tensor::zeros(&[5])).unwrap();
    let y = affine(&mut g, x, w, b).unwrap();
    assert_eq!(g.value(y).data(), wt.data());
}

#[test]
fn affine_shape_mismatch_is_structured() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let w = g.input(Tensor::zeros(&[4, 2])).unwrap();
    let b = g.input(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(affine(&mut g, x, w, b), Err(Error::Shape { op: "matmul", .. })));
}

#[test]
fn affine_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    store.insert("x", random_tensor(&mut rng, &[3, 4])).unwrap();
    store.insert("w", random_tensor(&mut rng, &[4, 5])).unwrap();
    store.insert("b", random_tensor(&mut rng, &[5])).unwrap();
    let report = grad_check(
        &store,
        |g, s| {
            let x = g.param_named(s, "x")?;
            let w = g.param_named(s, "w")?;
            let b = g.param_named(s, "b")?;
            let y = affine(g, x, w, b)?;
            let t = g.tanh(y)?;
            g.sum(t)
        },
        &tight(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

fn gru_store(rng: &mut ChaCha8Rng, d_in: usize, d_h: usize, zero: bool) -> ParamStore {
    let mut s = ParamStore::new();
    register_gru(&mut s, rng, "gru", d_in, d_h).unwrap();
    if zero {
        for id in s.ids().collect::<Vec<_>>() {
            s.value_mut(id).fill(0.0);
        }
    }
    s
}

#[test]
fn gru_zero_params_halve_the_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = gru_store(&mut rng, 3, 4, true);
    let mut g = Graph::new();
    let p = GruVars::bind(&mut g, &s, "gru").unwrap();
    let x = g.input(Tensor::row(vec![0.3, -2.0, 5.0])).unwrap();
    let h = g.input(Tensor::row(vec![1.0, -0.5, 0.25, 2.0])).unwrap();
    let h2 = gru_cell(&mut g, x, h, &p).unwrap();
    assert_eq!(g.value(h2).data(), &[0.5, -0.25, 0.125, 1.0]);

    let h0 = g.input(Tensor::row(vec![0.0; 4])).unwrap();
    let h3 = gru_cell(&mut g, x, h0, &p).unwrap();
    assert_eq!(g.value(h3).data(), &[0.0; 4]);
}

#[test]
fn gru_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s = gru_store(&mut rng, 3, 4, false);
    for id in s.ids().collect::<Vec<_>>() {
        let shape = s.value(id).shape().to_vec();
        *s.value_mut(id) = random_tensor(&mut rng, &shape);
    }
    s.insert("x", random_tensor(&mut rng, &[1, 3])).unwrap();
    s.insert("h", random_tensor(&mut rng, &[1, 4])).unwrap();
    let report = grad_check(
        &s,
        |g, s| {
            let p = GruVars::bind(g, s, "gru")?;
            let x = g.param_named(s, "x")?;
            let h = g.param_named(s, "h")?;
            let h1 = gru_cell(g, x, h, &p)?;
            let h2 = gru_cell(g, x, h1, &p)?;
            g.sum(h2)
        },
        &GradCheckConfig {
            tol: 1e-5,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn mlp2_zero_and_passthrough_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::new();
    register_mlp2(&mut s, &mut rng, "m", 3, 4, 4).unwrap();
    for n in ["m.l1.b", "m.l2.b"] {
        let id = s.id(n).unwrap();
        s.value_mut(id).fill(0.0);
    }
    let mut g = Graph::new();
    let p = Mlp2Vars::bind(&mut g, &s, "m").unwrap();
    let x = g.input(Tensor::row(vec![0.0; 3])).unwrap();
    let y = mlp2(&mut g, x, &p).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);

    // zero first layer: the hidden activation is tanh(0) = 0, so only the
    // second-layer bias reaches the output
    let id = s.id("m.l1.w").unwrap();
    s.value_mut(id).fill(0.0);
    let b2 = s.id("m.l2.b").unwrap();
    *s.value_mut(b2) = Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]);
    let mut g = Graph::new();
    let p = Mlp2Vars::bind(&mut g, &s, "m").unwrap();
    let x = g.input(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
    let y = mlp2(&mut g, x, &p).unwrap();
    assert_eq!(g.value(y).data(), &[0.1, -0.2, 0.3, 0.4]);
}

#[test]
fn mlp2_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut s = ParamStore::new();
    register_mlp2(&mut s, &mut rng, "m", 5, 6, 3).unwrap();
    s.insert("x", random_tensor(&mut rng, &[2, 5])).unwrap();
    let report = grad_check(
        &s,
        |g, s| {
            let p = Mlp2Vars::bind(g, s, "m")?;
            let x = g.param_named(s, "x")?;
            let y = mlp2(g, x, &p)?;
            let y = g.sigmoid(y)?;
            g.sum(y)
        },
        &GradCheckConfig {
            tol: 1e-5,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn backward_of_sum_is_ones_and_zero_times_is_zero() {
    let mut s = ParamStore::new();
    let p = s.insert("p", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap()).unwrap();
    let q = s.insert("unused", Tensor::full(&[3], 9.0)).unwrap();
    let mut g = Graph::new();
    let v = g.param(&s, p).unwrap();
    let l = g.sum(v).unwrap();
    g.backward(l, &mut s).unwrap();
    assert_eq!(s.grad(p).data(), &[1.0; 4]);
    assert_eq!(s.grad(q).data(), &[0.0; 3]);

    s.zero_grads();
    let mut g = Graph::new();
    let v = g.param(&s, p).unwrap();
    let t = g.tanh(v).unwrap();
    let l = g.sum(t).unwrap();
    let l = g.scale(l, 0.0).unwrap();
    g.backward(l, &mut s).unwrap();
    assert_eq!(s.grad(p).data(), &[0.0; 4]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut s = ParamStore::new();
    let p = s.insert("p", Tensor::full(&[2], 1.0)).unwrap();
    let mut g = Graph::new();
    let v = g.param(&s, p).unwrap();
    assert!(matches!(g.backward(v, &mut s), Err(Error::NonScalarLoss(_))));
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut s = ParamStore::new();
    register_mlp2(&mut s, &mut rng, "m", 4, 5, 2).unwrap();
    s.insert("x", random_tensor(&mut rng, &[3, 4])).unwrap();
    let losses = |g: &mut Graph, s: &ParamStore| -> crate::error::Result<(Var, Var)> {
        let p = Mlp2Vars::bind(g, s, "m")?;
        let x = g.param_named(s, "x")?;
        let y = mlp2(g, x, &p)?;
        let a = g.sigmoid(y)?;
        let l1 = g.sum(a)?;
        let b = g.mul(y, y)?;
        let l2 = g.sum(b)?;
        Ok((l1, l2))
    };
    let (ka, kb) = (0.7, -1.3);
    let mut g = Graph::new();
    let (l1, l2) = losses(&mut g, &s).unwrap();
    let g1 = g.gradients(l1, &s).unwrap();
    let g2 = g.gradients(l2, &s).unwrap();
    let a1 = g.scale(l1, ka).unwrap();
    let a2 = g.scale(l2, kb).unwrap();
    let comb = g.add(a1, a2).unwrap();
    let gc = g.gradients(comb, &s).unwrap();
    for id in s.ids() {
        for ((c, x), y) in gc.get(id).data().iter().zip(g1.get(id).data()).zip(g2.get(id).data()) {
            assert!((c - (ka * x + kb * y)).abs() < 1e-10);
        }
    }
}

#[test]
fn grad_check_quadratic_is_exact_to_truncation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut s = ParamStore::new();
    s.insert("p", random_tensor(&mut rng, &[10])).unwrap();
    let report = grad_check(
        &s,
        |g, s| {
            let p = g.param_named(s, "p")?;
            let sq = g.mul(p, p)?;
            g.sum(sq)
        },
        &GradCheckConfig {
            tol: 1e-8,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn grad_check_flags_a_corrupted_backward_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut s = ParamStore::new();
    s.insert("good", random_tensor(&mut rng, &[4])).unwrap();
    s.insert("bad", random_tensor(&mut rng, &[4])).unwrap();
    let report = grad_check(
        &s,
        |g, s| {
            let a = g.param_named(s, "good")?;
            let b = g.param_named(s, "bad")?;
            // forward identity, backward doubled
            let b = g.grad_scale(b, 2.0)?;
            let ab = g.mul(a, b)?;
            let t = g.tanh(ab)?;
            g.sum(t)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    let failures: Vec<_> = report.failures().iter().map(|p| p.name.clone()).collect();
    assert_eq!(failures, vec!["bad".to_string()]);
}

#[test]
fn grad_check_detects_non_deterministic_builders() {
    use std::sync::atomic::{AtomicUsize, Ordering};
    let mut s = ParamStore::new();
    s.insert("p", Tensor::full(&[2], 1.0)).unwrap();
    let calls = AtomicUsize::new(0);
    let res = grad_check(
        &s,
        |g, s| {
            let p = g.param_named(s, "p")?;
            let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
            let l = g.sum(p)?;
            g.scale(l, 1.0 + k)
        },
        &GradCheckConfig::default(),
    );
    assert!(matches!(res, Err(Error::NonDeterministic { .. })));
}

#[test]
fn losses_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut s = ParamStore::new();
    s.insert("logits", random_tensor(&mut rng, &[3, 6])).unwrap();
    s.insert("z", random_tensor(&mut rng, &[2, 4])).unwrap();
    let target: Vec<f64> = vec![0.2, 0.9, 0.4, 0.1, 0.7, 0.3, 0.6, 0.5];
    let mask = vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
    let valid = vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let report = grad_check(
        &s,
        |g, s| {
            let lg = g.param_named(s, "logits")?;
            let ce = g.cross_entropy_sum(lg, &[1, 5, 0])?;
            let z = g.param_named(s, "z")?;
            let p = g.sigmoid(z)?;
            let l1 = g.masked_abs_sum(p, &target, &mask)?;
            let l2 = g.masked_sq_sum(p, &target, &mask)?;
            let fl = g.focal_sum(p, &valid, Some(0.25), 2.0)?;
            let a = g.add(ce, l1)?;
            let b = g.add(l2, fl)?;
            g.add(a, b)
        },
        &GradCheckConfig {
            tol: 1e-6,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn gather_and_stack_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut s = ParamStore::new();
    s.insert("table", random_tensor(&mut rng, &[5, 3])).unwrap();
    let report = grad_check(
        &s,
        |g, s| {
            let t = g.param_named(s, "table")?;
            let e = g.gather(t, &[1, 3, 1])?;
            let r0 = g.row(e, 0)?;
            let r2 = g.row(e, 2)?;
            let sl = g.slice_cols(e, 1, 2)?;
            let st = g.stack_rows(&[r0, r2])?;
            let st = g.tanh(st)?;
            let a = g.sum(st)?;
            let sl = g.mul(sl, sl)?;
            let b = g.sum(sl)?;
            g.add(a, b)
        },
        &tight(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::new();
    assert!(matches!(
        g.input(Tensor::vector(vec![f64::NAN])),
        Err(Error::NonFinite { .. })
    ));
    let x = g.input(Tensor::vector(vec![1e300])).unwrap();
    assert!(matches!(g.scale(x, 1e300), Err(Error::NonFinite { .. })));
}

#[test]
fn saturating_ops_stay_finite() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![-800.0, 800.0, 0.0])).unwrap();
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.0, 1.0, 0.5]);
    let f = g.focal_sum(s, &[1.0, 0.0, 1.0], Some(0.25), 2.0).unwrap();
    assert!(g.scalar(f).is_finite());
}
