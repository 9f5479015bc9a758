use super::*;
use approx::assert_abs_diff_eq;
use ndarray::array;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
}

/// Builds `loss = Σ op(inputs) ⊙ R` for a fixed random R and compares the
/// reverse sweep with central differences of the replayed record.
fn primitive_error(inputs: Vec<Array2<f64>>, build: impl Fn(&mut Record, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut rec = Record::new();
    let vars: Vec<Var> = inputs.iter().map(|x| rec.input(x.clone())).collect();
    let out = build(&mut rec, &vars);
    rec.status().unwrap();
    let (r, c) = rec.value(out).dim();
    let weights = rec.constant(random(r, c, -1.0, 1.0, &mut rng));
    let prod = rec.mul(out, weights);
    let loss = rec.sum(prod);
    let grads = rec.backward(loss, 1.0).unwrap();
    let analytic: Vec<Array2<f64>> = vars.iter().map(|v| grads.get(*v)).collect();
    let named: Vec<(String, Array2<f64>)> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| (format!("in{i}"), x.clone()))
        .collect();
    let report = finite_diff_check(
        |pt| {
            rec.forward(vars.iter().copied().zip(pt.iter().cloned()).collect())?;
            Ok(rec.scalar(loss))
        },
        &named,
        &analytic,
        &FdOptions { tol: 1e-5, ..FdOptions::default() },
    )
    .unwrap();
    report.max_rel_error
}

fn assert_primitive(name: &str, inputs: Vec<Array2<f64>>, build: impl Fn(&mut Record, &[Var]) -> Var) {
    let err = primitive_error(inputs, build);
    assert!(err <= 1e-5, "{name}: relative error {err:e}");
}

#[test]
fn square_forward_and_backward() {
    let mut rec = Record::new();
    let x = rec.input(array![[3.0]]);
    let y = rec.mul(x, x);
    assert_eq!(rec.scalar(y), 9.0);
    let g = rec.backward(y, 1.0).unwrap();
    assert_eq!(g.get(x)[[0, 0]], 6.0);
}

#[test]
fn quantile_of_cdf_round_trips() {
    let mut rec = Record::new();
    let x = rec.input(array![[0.7]]);
    let u = rec.normal_cdf(x);
    let back = rec.normal_quantile(u);
    assert_abs_diff_eq!(rec.scalar(back), 0.7, epsilon = 1e-9);
    let g = rec.backward(back, 1.0).unwrap();
    assert_abs_diff_eq!(g.get(x)[[0, 0]], 1.0, epsilon = 1e-9);
}

#[test]
fn backward_on_updated_inputs_is_a_state_error() {
    let mut rec = Record::new();
    let x = rec.input(array![[3.0]]);
    let y = rec.mul(x, x);
    rec.set_input(x, array![[2.0]]).unwrap();
    assert!(matches!(rec.backward(y, 1.0), Err(Error::State(_))));
    rec.forward(vec![]).unwrap();
    assert_eq!(rec.scalar(y), 4.0);
    assert_eq!(rec.backward(y, 1.0).unwrap().get(x)[[0, 0]], 4.0);
}

#[test]
fn unused_input_gets_zero_gradient() {
    let mut rec = Record::new();
    let x = rec.input(array![[3.0, 1.0]]);
    let unused = rec.input(array![[5.0], [6.0]]);
    let s = rec.sum(x);
    let g = rec.backward(s, 1.0).unwrap();
    assert_eq!(g.get(unused), Array2::<f64>::zeros((2, 1)));
}

#[test]
fn non_finite_intermediate_names_the_node() {
    let mut rec = Record::new();
    let x = rec.input(array![[-1.0]]);
    let y = rec.log(x);
    let err = rec.backward(y, 1.0).unwrap_err();
    assert!(err.to_string().contains("node 1 (log)"), "{err}");
}

#[test]
fn shape_mismatch_is_reported() {
    let mut rec = Record::new();
    let a = rec.input(Array2::zeros((2, 3)));
    let b = rec.input(Array2::zeros((2, 3)));
    let _ = rec.matmul(a, b);
    assert!(rec.status().is_err());
}

#[test]
fn log_det_gradient_matches_central_differences() {
    let w = array![[2.0, 3.0]];
    let a = array![[1.0, 1.0]];
    let mut rec = Record::new();
    let wv = rec.input(w.clone());
    let av = rec.input(a.clone());
    let ld = rec.log_det(wv, av);
    let out = rec.sum(ld);
    assert_abs_diff_eq!(rec.scalar(out), 11f64.ln(), epsilon = 1e-14);
    let g = rec.backward(out, 1.0).unwrap();
    let h = 1e-5;
    let f = |w: &Array2<f64>, a: &Array2<f64>| {
        let s = w.as_slice().unwrap();
        let t = a.as_slice().unwrap();
        crate::lowrank::log_det_kernel(s, t)
    };
    for i in 0..2 {
        let mut wp = w.clone();
        let mut wm = w.clone();
        wp[[0, i]] += h;
        wm[[0, i]] -= h;
        assert_abs_diff_eq!(g.get(wv)[[0, i]], (f(&wp, &a) - f(&wm, &a)) / (2.0 * h), epsilon = 1e-6);
        let mut ap = a.clone();
        let mut am = a.clone();
        ap[[0, i]] += h;
        am[[0, i]] -= h;
        assert_abs_diff_eq!(g.get(av)[[0, i]], (f(&w, &ap) - f(&w, &am)) / (2.0 * h), epsilon = 1e-6);
    }
}

#[test]
fn cholesky_then_sample_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random(3, 5, 0.2, 2.0, &mut rng);
    let a = random(3, 5, -1.0, 1.0, &mut rng);
    let eps = random(3, 5, -2.0, 2.0, &mut rng);
    let err = primitive_error(vec![w, a], |rec, v| {
        let l = rec.chol_rank1(v[0], v[1]);
        let e = rec.constant(eps.clone());
        rec.lower_matvec(l, e)
    });
    assert!(err <= 1e-5, "relative error {err:e}");
}

#[test]
fn every_primitive_passes_in_isolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(3, 4, -1.5, 1.5, &mut rng);
    let y = random(3, 4, -1.5, 1.5, &mut rng);
    let pos = random(3, 4, 0.3, 2.0, &mut rng);
    let row = random(1, 4, -1.0, 1.0, &mut rng);
    let col = random(3, 1, -1.0, 1.0, &mut rng);
    let m = random(4, 2, -1.0, 1.0, &mut rng);

    assert_primitive("matmul", vec![x.clone(), m], |r, v| r.matmul(v[0], v[1]));
    assert_primitive("add", vec![x.clone(), y.clone()], |r, v| r.add(v[0], v[1]));
    assert_primitive("add row broadcast", vec![x.clone(), row.clone()], |r, v| r.add(v[0], v[1]));
    assert_primitive("sub col broadcast", vec![col.clone(), x.clone()], |r, v| r.sub(v[0], v[1]));
    assert_primitive("mul", vec![x.clone(), y.clone()], |r, v| r.mul(v[0], v[1]));
    assert_primitive("mul col broadcast", vec![x.clone(), col.clone()], |r, v| r.mul(v[0], v[1]));
    assert_primitive("div", vec![x.clone(), pos.clone()], |r, v| r.div(v[0], v[1]));
    assert_primitive("div row broadcast", vec![x.clone(), row.mapv(|v| v.abs() + 0.5)], |r, v| r.div(v[0], v[1]));
    assert_primitive("scale", vec![x.clone()], |r, v| r.scale(v[0], -2.5));
    assert_primitive("offset", vec![x.clone()], |r, v| r.offset(v[0], 0.7));
    assert_primitive("exp", vec![x.clone()], |r, v| r.exp(v[0]));
    assert_primitive("log", vec![pos.clone()], |r, v| r.log(v[0]));
    assert_primitive("tanh", vec![x.clone()], |r, v| r.tanh(v[0]));
    assert_primitive("sigmoid", vec![x.clone()], |r, v| r.sigmoid(v[0]));
    assert_primitive("relu_floor", vec![x.clone()], |r, v| r.relu_floor(v[0], 1e-4));
    assert_primitive("normal_cdf", vec![x.clone()], |r, v| r.normal_cdf(v[0]));
    assert_primitive("normal_quantile", vec![random(3, 4, 0.05, 0.95, &mut rng)], |r, v| r.normal_quantile(v[0]));
    assert_primitive("sum", vec![x.clone()], |r, v| r.sum(v[0]));
    assert_primitive("sum_cols", vec![x.clone()], |r, v| r.sum_cols(v[0]));
    assert_primitive("concat_cols", vec![x.clone(), col.clone()], |r, v| r.concat_cols(&[v[0], v[1]]));
    assert_primitive("concat_rows", vec![x.clone(), row.clone()], |r, v| r.concat_rows(&[v[0], v[1]]));
    assert_primitive("slice_cols", vec![x.clone()], |r, v| r.slice_cols(v[0], 1, 3));
    assert_primitive("slice_rows", vec![x.clone()], |r, v| r.slice_rows(v[0], 1, 3));
    assert_primitive("gather", vec![x.clone()], |r, v| r.gather(v[0], vec![2, 0, 2, 1]));
    assert_primitive("softmax_xent", vec![random(5, 6, -2.0, 2.0, &mut rng)], |r, v| {
        r.softmax_xent(v[0], vec![0, 5, 2, 2, 1], vec![1.0, 1.0, 0.0, 0.5, 1.0])
    });
    let gamma = random(1, 4, 0.5, 1.5, &mut rng);
    let beta = random(1, 4, -0.5, 0.5, &mut rng);
    assert_primitive("batch_norm train", vec![x.clone(), gamma.clone(), beta.clone()], |r, v| {
        r.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { eps: 1e-5 })
    });
    assert_primitive("batch_norm eval", vec![x.clone(), gamma, beta], |r, v| {
        r.batch_norm(
            v[0],
            v[1],
            v[2],
            BatchNormMode::Eval { mean: vec![0.1, -0.2, 0.0, 0.3], var: vec![1.5, 0.7, 2.0, 0.2], eps: 1e-5 },
        )
    });
    let w = random(3, 4, 0.2, 2.0, &mut rng);
    let a = random(3, 4, -1.0, 1.0, &mut rng);
    assert_primitive("chol_rank1", vec![w.clone(), a.clone()], |r, v| r.chol_rank1(v[0], v[1]));
    assert_primitive("lower_matvec", vec![random(3, 16, -1.0, 1.0, &mut rng), x.clone()], |r, v| {
        r.lower_matvec(v[0], v[1])
    });
    assert_primitive("log_det", vec![w.clone(), a.clone()], |r, v| r.log_det(v[0], v[1]));
    assert_primitive("inv_quad", vec![w, a, y], |r, v| r.inv_quad(v[0], v[1], v[2]));
}

#[test]
fn constant_loss_check_passes_with_zero_gradients() {
    let params = vec![("p".to_string(), array![[1.0, 2.0]])];
    let report = finite_diff_check(|_| Ok(3.5), &params, &[Array2::zeros((1, 2))], &FdOptions::default()).unwrap();
    assert!(report.passed);
    assert_eq!(report.max_rel_error, 0.0);
    assert!(report.entries[0].numeric.iter().all(|g| *g == 0.0));
}

#[test]
fn square_check_is_tight() {
    let params = vec![("x".to_string(), array![[3.0]])];
    let report = finite_diff_check(
        |p| Ok(p[0][[0, 0]] * p[0][[0, 0]]),
        &params,
        &[array![[6.0]]],
        &FdOptions { tol: 1e-6, ..FdOptions::default() },
    )
    .unwrap();
    assert!(report.passed);
    assert!(report.max_rel_error <= 1e-8);
}

#[test]
fn kink_crossing_coordinates_are_skipped() {
    // f = Σ max(x, 0); the first coordinate is within the stencil of the kink
    let params = vec![("x".to_string(), array![[5e-5, 0.5, -0.5]])];
    let grad = [array![[1.0, 1.0, 0.0]]];
    let relu = |p: &[Array2<f64>]| p[0].iter().map(|x| x.max(0.0)).sum::<f64>();
    let plain = finite_diff_check(|p| Ok(relu(p)), &params, &grad, &FdOptions::default()).unwrap();
    assert!(!plain.passed);
    let regime = |p: &[Array2<f64>]| p[0].iter().map(|&x| x > 0.0).collect::<Vec<_>>();
    let report = finite_diff_check_piecewise(|p| Ok((relu(p), regime(p))), &params, &grad, &FdOptions::default()).unwrap();
    assert!(report.passed);
    assert_eq!(report.entries[0].skipped, 1);
    assert_eq!(report.entries[0].analytic, vec![1.0, 0.0]);
}

#[test]
fn non_finite_perturbed_loss_is_diagnosed() {
    let params = vec![("x".to_string(), array![[0.0]])];
    let err = finite_diff_check(
        |p| Ok(p[0][[0, 0]].ln()),
        &params,
        &[array![[1.0]]],
        &FdOptions::default(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("x[0]"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear(seed in 0u64..10_000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(2, 3, -1.0, 1.0, &mut rng);
        let m0 = random(3, 2, -1.0, 1.0, &mut rng);
        let build = |rec: &mut Record, x: Var, m: Var| {
            // f = Σ tanh(x m),  g = Σ exp(x) ⊙ x
            let xm = rec.matmul(x, m);
            let t = rec.tanh(xm);
            let f = rec.sum(t);
            let e = rec.exp(x);
            let p = rec.mul(e, x);
            let g = rec.sum(p);
            (f, g)
        };
        let mut rec = Record::new();
        let x = rec.input(x0.clone());
        let m = rec.input(m0.clone());
        let (f, g) = build(&mut rec, x, m);
        let fa = rec.scale(f, alpha);
        let gb = rec.scale(g, beta);
        let h = rec.add(fa, gb);
        let gh = rec.backward(h, 1.0).unwrap();
        let gf = rec.backward(f, 1.0).unwrap();
        let gg = rec.backward(g, 1.0).unwrap();
        for v in [x, m] {
            let combined = gf.get(v) * alpha + gg.get(v) * beta;
            for (p, q) in gh.get(v).iter().zip(combined.iter()) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }
}
