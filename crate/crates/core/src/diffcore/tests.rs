use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn eval(g: &Graph, root: NodeId, inputs: &[f64], params: &[f64]) -> f64 {
    g.evaluate(root, &Bindings::new(inputs, params)).unwrap()
}

/// Dense 2 -> 25 -> 25 -> 1 softplus network over inputs 0 and 1.
fn small_net(g: &mut Graph, rng: &mut ChaCha8Rng) -> (NodeId, Vec<f64>) {
    let widths = [2usize, 25, 25, 1];
    let mut params = Vec::new();
    let x0 = g.input(0);
    let x1 = g.input(1);
    let mut h = g.stack(&[x0, x1]);
    for l in 0..3 {
        let (cols, rows) = (widths[l], widths[l + 1]);
        let w = g.param(params.len(), rows * cols);
        for _ in 0..rows * cols {
            params.push(rng.gen_range(-0.6..0.6));
        }
        let b = g.param(params.len(), rows);
        for _ in 0..rows {
            params.push(rng.gen_range(-0.3..0.3));
        }
        let z = g.matvec(w, h, rows, cols);
        let z = g.add(z, b);
        h = if l < 2 { g.softplus(z) } else { z };
    }
    (h, params)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-12
}

#[test]
fn softplus_of_zero() {
    let mut g = Graph::new();
    let c = g.scalar(0.0);
    let s = g.softplus(c);
    assert!((eval(&g, s, &[], &[]) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn logistic_of_zero() {
    let mut g = Graph::new();
    let c = g.scalar(0.0);
    let s = g.logistic(c);
    assert_eq!(eval(&g, s, &[], &[]), 0.5);
}

#[test]
fn product_of_inputs() {
    let mut g = Graph::new();
    let x = g.input(0);
    let y = g.input(1);
    let p = g.mul(x, y);
    assert_eq!(eval(&g, p, &[3.0, 4.0], &[]), 12.0);
}

#[test]
fn unbound_leaves_are_reported() {
    let mut g = Graph::new();
    let x = g.input(1);
    let t = g.param(0, 1);
    let p = g.mul(x, t);
    let err = g.evaluate(p, &Bindings::new(&[1.0, 2.0], &[])).unwrap_err();
    assert!(matches!(err, DiffError::UnboundParam { .. }));
    let err = g.evaluate(p, &Bindings::new(&[1.0], &[1.0])).unwrap_err();
    assert!(matches!(err, DiffError::UnboundInput { slot: 1, .. }));
}

#[test]
fn non_finite_value_reports_path() {
    let mut g = Graph::new();
    let x = g.input(0);
    let l = g.log(x);
    let y = g.scale(l, 2.0);
    let root = g.add(y, x);
    match g.evaluate(root, &Bindings::new(&[-1.0], &[])) {
        Err(DiffError::NonFinite { node, op, path }) => {
            assert_eq!(node, l.index());
            assert_eq!(op, "log");
            assert_eq!(path, vec![l.index(), y.index(), root.index()]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn derivative_of_softplus_at_zero() {
    let mut g = Graph::new();
    let x = g.input(0);
    let s = g.softplus(x);
    let d = g.input_derivative(s, 0).unwrap();
    assert_eq!(eval(&g, d, &[0.0], &[]), 0.5);
}

#[test]
fn derivative_of_square() {
    let mut g = Graph::new();
    let x = g.input(0);
    let s = g.mul(x, x);
    let d = g.input_derivative(s, 0).unwrap();
    assert_eq!(eval(&g, d, &[3.0], &[]), 6.0);
    let p = g.powf(x, 2.0);
    let d = g.input_derivative(p, 0).unwrap();
    assert_eq!(eval(&g, d, &[3.0], &[]), 6.0);
}

#[test]
fn missing_input_is_an_error() {
    let mut g = Graph::new();
    let x = g.input(0);
    assert_eq!(g.input_derivative(x, 3), Err(DiffError::NoSuchInput(3)));
}

#[test]
fn derivative_of_independent_root_is_zero() {
    let mut g = Graph::new();
    let x = g.input(0);
    let y = g.input(1);
    let s = g.exp(y);
    let d = g.tangent(s, x);
    assert_eq!(eval(&g, d, &[1.0, 2.0], &[]), 0.0);
}

#[test]
fn network_input_derivative_matches_central_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let (out, params) = small_net(&mut g, &mut rng);
    let d0 = g.input_derivative(out, 0).unwrap();
    let d1 = g.input_derivative(out, 1).unwrap();
    let h = 1e-5;
    for _ in 0..20 {
        let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        for (k, d) in [(0, d0), (1, d1)] {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (eval(&g, out, &xp, &params) - eval(&g, out, &xm, &params)) / (2.0 * h);
            let ad = eval(&g, d, &x, &params);
            assert!(close(ad, fd, 1e-6), "{ad} vs {fd}");
        }
    }
}

#[test]
fn gradient_of_square_parameter() {
    let mut g = Graph::new();
    let t = g.param(0, 1);
    let s = g.mul(t, t);
    let grad = g.param_gradient(s, &Bindings::new(&[], &[2.0])).unwrap();
    assert_eq!(grad, vec![4.0]);
}

#[test]
fn gradient_of_linear_model_loss() {
    let mut g = Graph::new();
    let t = g.param(0, 1);
    let x = g.input(0);
    let y = g.input(1);
    let pred = g.mul(t, x);
    let r = g.sub(pred, y);
    let loss = g.mul(r, r);
    let (theta, xv, yv) = (0.7, 1.5, 2.0);
    let grad = g
        .param_gradient(loss, &Bindings::new(&[xv, yv], &[theta]))
        .unwrap();
    assert_eq!(grad, vec![2.0 * xv * (theta * xv - yv)]);
}

#[test]
fn mixed_gradient_matches_central_difference() {
    // residual r = (f'(a) - f'(b)) / dx - c, with f a random network
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let widths = [1usize, 25, 25, 1];
    let mut params = Vec::new();
    let mut layers = Vec::new();
    for l in 0..3 {
        let (cols, rows) = (widths[l], widths[l + 1]);
        let w = g.param(params.len(), rows * cols);
        params.extend((0..rows * cols).map(|_| rng.gen_range(-0.7..0.7)));
        let b = g.param(params.len(), rows);
        params.extend((0..rows).map(|_| rng.gen_range(-0.3..0.3)));
        layers.push((w, b, rows, cols));
    }
    let net = |g: &mut Graph, x: NodeId| {
        let mut h = x;
        for (l, &(w, b, rows, cols)) in layers.iter().enumerate() {
            let z = g.matvec(w, h, rows, cols);
            let z = g.add(z, b);
            h = if l < 2 { g.softplus(z) } else { z };
        }
        h
    };
    let a = g.input(0);
    let b = g.input(1);
    let c = g.input(2);
    let fa = net(&mut g, a);
    let fb = net(&mut g, b);
    let da = g.input_derivative(fa, 0).unwrap();
    let db = g.input_derivative(fb, 1).unwrap();
    let diff = g.sub(da, db);
    let q = g.scale(diff, 1.0 / 0.1);
    let r = g.sub(q, c);
    let inputs = [0.3, -0.4, 0.2];
    let grad = g.param_gradient(r, &Bindings::new(&inputs, &params)).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..params.len() {
        let mut pp = params.clone();
        let mut pm = params.clone();
        pp[k] += h;
        pm[k] -= h;
        let fd = (eval(&g, r, &inputs, &pp) - eval(&g, r, &inputs, &pm)) / (2.0 * h);
        let scale = grad[k].abs().max(fd.abs()).max(1e-3);
        worst = worst.max((grad[k] - fd).abs() / scale);
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn evaluation_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let (out, params) = small_net(&mut g, &mut rng);
    let d = g.input_derivative(out, 1).unwrap();
    let b = Bindings::new(&[0.25, -1.5], &params);
    assert_eq!(
        g.evaluate(d, &b).unwrap().to_bits(),
        g.evaluate(d, &b).unwrap().to_bits()
    );
    assert_eq!(g.param_gradient(d, &b).unwrap(), g.param_gradient(d, &b).unwrap());
}

#[test]
fn structurally_equal_nodes_are_shared() {
    let mut g = Graph::new();
    let x = g.input(0);
    let y = g.input(1);
    let a = g.mul(x, y);
    let b = g.mul(y, x);
    assert_eq!(a, b);
    let c1 = g.scalar(0.0);
    let c2 = g.scalar(0.0);
    assert_eq!(c1, c2);
    let f1 = g.fresh_constant(&[0.0]);
    assert_ne!(f1, c1);
}

#[test]
fn fresh_constant_is_a_differentiation_point() {
    // d/dw (w^3 + 2w) at w = 0 through a fresh constant
    let mut g = Graph::new();
    let w = g.fresh_constant(&[0.0]);
    let c = g.powf(w, 3.0);
    let l = g.scale(w, 2.0);
    let s = g.add(c, l);
    let d = g.tangent(s, w);
    assert_eq!(eval(&g, d, &[], &[]), 2.0);
}

#[test]
fn second_input_derivative() {
    let mut g = Graph::new();
    let x = g.input(0);
    let s = g.softplus(x);
    let d1 = g.input_derivative(s, 0).unwrap();
    let d2 = g.input_derivative(d1, 0).unwrap();
    let v: f64 = 0.4;
    let sig = logistic(v);
    assert!((eval(&g, d2, &[v], &[]) - sig * (1.0 - sig)).abs() < 1e-15);
}

#[test]
fn nonneg_branches() {
    assert!((nonneg(0.0, 5.0) - 6.737946999085467e-3).abs() < 1e-15);
    assert!((nonneg(2.0, 5.0) - 2.006737946999085).abs() < 1e-14);
    assert!((nonneg(-1.0, 5.0) - 2.478752176666358e-3).abs() < 1e-15);
}

#[test]
fn nonneg_weight_gradient_through_input_derivative() {
    // y = nonneg(t) * softplus(x); dy/dx = nonneg(t) * logistic(x)
    let mut g = Graph::new();
    let t = g.param(0, 1);
    let x = g.input(0);
    let w = g.nonneg(t, 5.0);
    let s = g.softplus(x);
    let y = g.mul(w, s);
    let d = g.input_derivative(y, 0).unwrap();
    for &tv in &[-0.8, 0.6] {
        let grad = g.param_gradient(d, &Bindings::new(&[0.3], &[tv])).unwrap();
        let h = 1e-6;
        let fd = (eval(&g, d, &[0.3], &[tv + h]) - eval(&g, d, &[0.3], &[tv - h])) / (2.0 * h);
        assert!(close(grad[0], fd, 1e-6));
    }
}

#[test]
fn batched_program_accumulates_over_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let (out, params) = small_net(&mut g, &mut rng);
    let samples = [[0.1, 0.2], [-0.5, 1.0], [2.0, -0.3]];
    let prog = Program::new(&g, &[out]);
    let mut ws = prog.prepare(&g, &params).unwrap();
    let mut grad = vec![0.0; params.len()];
    for s in &samples {
        prog.forward(&g, &mut ws, s).unwrap();
        prog.backward(&g, &mut ws, &[1.0]);
    }
    prog.finish_static(&g, &mut ws, &mut grad);
    let mut want = vec![0.0; params.len()];
    for s in &samples {
        let gs = g.param_gradient(out, &Bindings::new(s, &params)).unwrap();
        for (w, v) in want.iter_mut().zip(gs) {
            *w += v;
        }
    }
    for (a, b) in grad.iter().zip(&want) {
        assert!(close(*a, *b, 1e-12));
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softplus_is_stable_and_above_relu(x in -800.0f64..800.0) {
            let s = softplus(x);
            prop_assert!(s.is_finite());
            prop_assert!(s >= x.max(0.0));
            prop_assert!(s - x.max(0.0) <= 2f64.ln() + 1e-15);
        }

        #[test]
        fn nonneg_is_positive_and_monotone(a in -40.0f64..40.0, b in -40.0f64..40.0) {
            prop_assert!(nonneg(a, 5.0) > 0.0);
            if a < b {
                prop_assert!(nonneg(a, 5.0) <= nonneg(b, 5.0));
            }
        }

        #[test]
        fn derivative_of_product_chain(x in -2.0f64..2.0, y in 0.1f64..3.0) {
            // h = exp(x) * log(y) / y
            let mut g = Graph::new();
            let xi = g.input(0);
            let yi = g.input(1);
            let e = g.exp(xi);
            let l = g.log(yi);
            let r = g.recip(yi);
            let p = g.mul(e, l);
            let h = g.mul(p, r);
            let dy = g.input_derivative(h, 1).unwrap();
            let want = x.exp() * (1.0 - y.ln()) / (y * y);
            let got = eval(&g, dy, &[x, y], &[]);
            prop_assert!(close(got, want, 1e-12));
        }
    }
}
