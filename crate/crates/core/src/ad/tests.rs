use approx::assert_relative_eq;
use ndarray::{array, Array2};
use proptest::prelude::*;

use super::*;

fn fd_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut g = Tensor::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[[r, c]] += h;
        xm[[r, c]] -= h;
        g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Evaluates a tape function on plain values.
fn eval(f: impl TapeFn, x: &Tensor) -> f64 {
    let tape = Tape::new();
    f(tape.var(x.clone())).unwrap().item()
}

#[test]
fn vjp_of_linear_map_is_transpose() {
    let a = array![[1.0, 2.0, -1.0], [0.5, -3.0, 4.0]];
    let a2 = a.clone();
    let f = tape_fn(move |x: Var<'_>| Ok(x.mm(x.tape().constant(a2.clone()), false, true)));
    let x = array![[0.3, -0.7, 1.1]];
    let v = array![[2.0, -1.0]];
    let (_, g) = vjp(&f, &x, &v).unwrap();
    assert_relative_eq!(g, v.dot(&a), epsilon = 1e-14);
}

#[test]
fn vjp_of_tanh() {
    let f = tape_fn(|x: Var<'_>| Ok(x.tanh()));
    let x = array![[0.2, -1.5, 3.0]];
    let v = array![[1.0, 2.0, -0.5]];
    let (_, g) = vjp(f, &x, &v).unwrap();
    let expect = &v * &x.mapv(|t| 1.0 - t.tanh().powi(2));
    assert_relative_eq!(g, expect, epsilon = 1e-14);
}

#[test]
fn vjp_rejects_wrong_cotangent_shape() {
    let f = tape_fn(|x: Var<'_>| Ok(x.tanh()));
    let err = vjp(f, &array![[1.0, 2.0]], &array![[1.0]]).unwrap_err();
    assert!(matches!(err, AdError::Shape { .. }));
}

#[test]
fn grad_of_half_square_norm() {
    let f = tape_fn(|x: Var<'_>| Ok(x.square().sum().scale(0.5)));
    let x = array![[1.0, -2.0], [0.5, 3.0]];
    let (v, g) = grad(f, &x).unwrap();
    assert_relative_eq!(v, 0.5 * (1.0 + 4.0 + 0.25 + 9.0));
    assert_relative_eq!(g, x);
}

#[test]
fn grad_of_softplus_sum_is_logistic() {
    let f = tape_fn(|x: Var<'_>| Ok(x.softplus().sum()));
    let x = array![[-40.0, -1.0, 0.0, 2.5, 40.0]];
    let (_, g) = grad(f, &x).unwrap();
    let expect = x.mapv(|t| 1.0 / (1.0 + (-t).exp()));
    assert_relative_eq!(g, expect, epsilon = 1e-15);
}

#[test]
fn grad_requires_scalar_output() {
    let f = tape_fn(|x: Var<'_>| Ok(x.tanh()));
    let err = grad(f, &array![[1.0, 2.0]]).unwrap_err();
    assert_eq!(err, AdError::NotScalar((1, 2)));
}

#[test]
fn second_derivative_of_cube() {
    // d/dx f'(x) for f = x³ at x = 2.
    let f = tape_fn(|x: Var<'_>| {
        let y = x * x * x;
        let dy = x.tape().gradients_graph(y.sum(), &[x], None)?.remove(0);
        Ok(dy.sum())
    });
    let (d1, d2) = nested_grad(f, &array![[2.0]]).unwrap();
    assert_relative_eq!(d1, 12.0);
    assert_relative_eq!(d2[[0, 0]], 12.0);
}

#[test]
fn hvp_of_quadratic_form() {
    let a = array![[2.0, 1.0, 0.0], [-1.0, 3.0, 0.5], [4.0, 0.0, 1.0]];
    let a2 = a.clone();
    let f = tape_fn(move |x: Var<'_>| {
        let am = x.tape().constant(a2.clone());
        // ½ xᵀ A x with x a 1 × 3 row
        Ok(x.mm(am, false, true).row_dot(x).sum().scale(0.5))
    });
    let x = array![[0.3, -1.0, 2.0]];
    let v = array![[1.0, 0.5, -2.0]];
    let hv = hvp(&f, &x, &v).unwrap();
    let sym = (&a + &a.t()) * 0.5;
    let expect = v.dot(&sym.t());
    assert_relative_eq!(hv, expect, epsilon = 1e-13);
}

#[test]
fn nesting_through_abs_is_unsupported() {
    let f = tape_fn(|x: Var<'_>| {
        let dy = x
            .tape()
            .gradients_graph(x.abs().sum(), &[x], None)?
            .remove(0);
        Ok(dy.sum())
    });
    let err = nested_grad(f, &array![[1.0, -2.0]]).unwrap_err();
    assert_eq!(err, AdError::Unsupported("abs"));
    // First order is fine.
    let g = tape_fn(|x: Var<'_>| Ok(x.abs().sum()));
    let (_, d) = grad(g, &array![[1.0, -2.0, 0.0]]).unwrap();
    assert_eq!(d, array![[1.0, -1.0, 0.0]]);
}

#[test]
fn unreachable_input_gets_zero_gradient() {
    let tape = Tape::new();
    let x = tape.var(array![[1.0, 2.0]]);
    let y = tape.var(array![[3.0]]);
    let out = x.square().sum();
    let g = tape.gradients(out, &[x, y], None).unwrap();
    assert_eq!(g[1], array![[0.0]]);
    assert_eq!(g[0], array![[2.0, 4.0]]);
}

/// A smooth composition touching every differentiable primitive.
fn composite<'t>(x: Var<'t>) -> Result<Var<'t>, AdError> {
    let tape = x.tape();
    let w = tape.constant(array![[0.5, -0.3, 0.2], [0.1, 0.7, -0.4]]);
    let b = tape.constant(array![[0.05, -0.1]]);
    let h = tape.affine(x, w, b).tanh();
    let s = h.softplus() + h.sigmoid() * h.exp();
    let t = (s.add_scalar(2.0)).ln() - h.sin() * h.cos();
    let u = t.recip().scale(0.3)
        + t.mm(t, true, false)
            .sum()
            .broadcast_rows(t.rows())
            .broadcast_cols(t.cols());
    let cat = tape.concat_cols(&[u, x.slice_cols(1, 2)]);
    let padded = cat.col(0).pad_cols(1, 3);
    Ok((cat * cat).sum_rows().sum_cols() + padded.sum().mul_scalar_var(x.mean()))
}

#[test]
fn composite_matches_finite_differences() {
    let x = array![[0.3, -1.2, 0.8], [1.5, 0.1, -0.6]];
    let (_, g) = grad(composite, &x).unwrap();
    let fd = fd_grad(&|v| eval(composite, v), &x, 1e-5);
    assert!(rel_err(&g, &fd) < 1e-6, "{g} vs {fd}");
}

#[test]
fn gradient_of_probe_contraction_matches_finite_differences() {
    // Gradient in z of εᵀ(∂g/∂z)ε, with g a small tanh network.
    let eps = array![[1.0, -1.0, 1.0]];
    let e2 = eps.clone();
    let f = tape_fn(move |z: Var<'_>| {
        let tape = z.tape();
        let w1 = tape.constant(array![[0.4, -0.8, 0.3], [1.1, 0.2, -0.5], [0.0, 0.6, 0.9]]);
        let w2 = tape.constant(array![[0.7, -0.2, 0.5], [-0.3, 0.8, 0.1], [0.2, 0.4, -0.6]]);
        let b = tape.constant(array![[0.1, 0.0, -0.2]]);
        let g = tape.affine(tape.affine(z, w1, b).tanh(), w2, b).softplus();
        let e = tape.constant(e2.clone());
        let jt_e = tape.gradients_graph(g, &[z], Some(e))?.remove(0);
        Ok(jt_e.row_dot(e).sum())
    });
    let z = array![[0.2, -0.4, 0.9]];
    let (_, g) = nested_grad(&f, &z).unwrap();
    let fd = fd_grad(&|v| eval(&f, v), &z, 1e-5);
    assert!(rel_err(&g, &fd) < 1e-4, "{g} vs {fd}");
    let _ = eps;
}

fn unary_cases() -> Vec<(&'static str, fn(Var<'_>) -> Var<'_>)> {
    vec![
        ("tanh", |x| x.tanh()),
        ("softplus", |x| x.softplus()),
        ("sigmoid", |x| x.sigmoid()),
        ("exp", |x| x.exp()),
        ("ln", |x| x.square().add_scalar(0.5).ln()),
        ("recip", |x| x.square().add_scalar(0.5).recip()),
        ("sin", |x| x.sin()),
        ("cos", |x| x.cos()),
        ("square", |x| x.square()),
        ("scale", |x| x.scale(-1.7)),
        ("matmul", |x| x.mm(x, true, false)),
        ("sum_rows", |x| x.sum_rows()),
        ("sum_cols", |x| x.sum_cols()),
        ("slice", |x| x.slice_cols(1, 1)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn primitives_match_finite_differences(vals in prop::collection::vec(-2.0f64..2.0, 6)) {
        let x = Array2::from_shape_vec((2, 3), vals).unwrap();
        for (name, op) in unary_cases() {
            let f = tape_fn(move |v: Var<'_>| Ok(op(v).square().sum()));
            let (_, g) = grad(f, &x).unwrap();
            let fd = fd_grad(&|v| eval(f, v), &x, 1e-5);
            // Absolute floor guards entries whose true gradient is ~0.
            for (a, b) in g.iter().zip(&fd) {
                let scale = a.abs().max(b.abs()).max(1.0);
                prop_assert!((a - b).abs() / scale < 1e-5, "{}: {} vs {}", name, a, b);
            }
        }
    }

    #[test]
    fn vjp_is_linear_in_cotangent(
        vals in prop::collection::vec(-2.0f64..2.0, 6),
        v1 in prop::collection::vec(-1.0f64..1.0, 6),
        v2 in prop::collection::vec(-1.0f64..1.0, 6),
        a in -3.0f64..3.0,
    ) {
        let x = Array2::from_shape_vec((2, 3), vals).unwrap();
        let v = Array2::from_shape_vec((2, 3), v1).unwrap();
        let w = Array2::from_shape_vec((2, 3), v2).unwrap();
        let f = tape_fn(|z: Var<'_>| Ok((z.tanh() * z.softplus()).mm(z, false, true).mm(z, false, false)));
        let (_, gv) = vjp(f, &x, &v).unwrap();
        let (_, gw) = vjp(f, &x, &w).unwrap();
        let (_, gc) = vjp(f, &x, &(&v * a + &w)).unwrap();
        let lin = &gv * a + &gw;
        for (p, q) in gc.iter().zip(&lin) {
            prop_assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn gradients_are_deterministic(vals in prop::collection::vec(-2.0f64..2.0, 6)) {
        let x = Array2::from_shape_vec((2, 3), vals).unwrap();
        let (a, ga) = grad(composite, &x).unwrap();
        let (b, gb) = grad(composite, &x).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert!(ga.iter().zip(&gb).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
