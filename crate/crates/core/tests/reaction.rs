use spde_averaging_core::math::GaussLegendre;
use spde_averaging_core::reaction::{make_reaction, nemytskii};
use spde_averaging_core::{BoundaryCondition, Field, OperatorSpectrum, ReactionFn, ReactionSystem};
use std::f64::consts::PI;

fn dirichlet(n: usize) -> OperatorSpectrum {
    OperatorSpectrum::build(PI, BoundaryCondition::Dirichlet, n).unwrap()
}

fn system(f: &str, g: &str, n: usize) -> ReactionSystem {
    make_reaction(f.parse().unwrap(), g.parse().unwrap(), &dirichlet(n)).unwrap()
}

/// Deterministic pseudo-random field with coefficients decaying like `1/k²`.
fn field(s: &OperatorSpectrum, salt: u64, scale: f64) -> Field {
    let coeffs = (1..=s.n_modes() as u64)
        .map(|k| {
            let h = (k * 0x9E37_79B9 + salt * 0x85EB_CA6B) % 10_007;
            scale * (h as f64 / 10_007.0 - 0.5) / (k * k) as f64
        })
        .collect();
    Field::new(s.basis(), coeffs).unwrap()
}

/// Composite Gauss-Legendre over `[0, L]`.
fn fine_integral(l: f64, panels: usize, f: impl Fn(f64) -> f64) -> f64 {
    let rule = GaussLegendre::new(16);
    let w = l / panels as f64;
    (0..panels)
        .map(|p| rule.integrate(|t| f((p as f64 + t) * w)) * w)
        .sum()
}

fn eval(x: &Field, xi: f64) -> f64 {
    let b = x.basis();
    x.coeffs().iter().enumerate().map(|(k, c)| c * b.eigenfunction(k + 1, xi)).sum()
}

#[test]
fn slow_identity_reaction() {
    let r = system("linear(slow=1)", "linear_damped(a=0.5)", 8);
    let s = dirichlet(8);
    let x = field(&s, 1, 2.0);
    for salt in 2..5 {
        let f = r.eval_f(&x, &field(&s, salt, 3.0)).unwrap();
        assert!(f.distance(&x) < 1e-13);
    }
}

#[test]
fn linear_difference_reaction() {
    let r = system("linear(slow=-1, fast=1)", "linear_damped(a=0.5)", 4);
    let s = dirichlet(4);
    let f = r.eval_f(&Field::unit(s.basis(), 1), &Field::unit(s.basis(), 1).scaled(2.0)).unwrap();
    assert!(f.distance(&Field::unit(s.basis(), 1)) < 1e-14);
}

#[test]
fn sine_product_against_fine_quadrature() {
    let s = dirichlet(16);
    let x = field(&s, 3, 1.0);
    let y = field(&s, 4, 1.0);
    let f: ReactionFn = "sin_product(a=1)".parse().unwrap();
    let got = nemytskii(&f, &x, &y, 129).unwrap();
    for k in 1..=16 {
        let oracle = fine_integral(PI, 64, |xi| {
            eval(&x, xi).sin() * eval(&y, xi) * s.basis().eigenfunction(k, xi)
        });
        assert!((got.coeffs()[k - 1] - oracle).abs() < 1e-8, "mode {k}: {} vs {oracle}", got.coeffs()[k - 1]);
    }
}

#[test]
fn quadratic_potential() {
    let r = system("zero", "linear_damped(a=0.5)", 8);
    let s = dirichlet(8);
    for salt in 0..4 {
        let (x, y) = (field(&s, salt, 2.0), field(&s, salt + 10, 3.0));
        let u = r.potential(&x, &y).unwrap();
        assert!((u + y.norm_sq() / 4.0).abs() < 1e-13);
        assert_eq!(r.potential(&x, &Field::zeros(s.basis())).unwrap(), 0.0);
    }
}

#[test]
fn coupled_potential_against_two_dimensional_quadrature() {
    let s = dirichlet(8);
    let g: ReactionFn = "linear_damped(a=0.5) + slow_tanh(a=0.2)".parse().unwrap();
    let r = ReactionSystem::with_grid("zero".parse().unwrap(), g.clone(), &s, s.basis(), 257).unwrap();
    let inner = GaussLegendre::new(16);
    for salt in 0..3 {
        let (x, y) = (field(&s, salt, 3.0), field(&s, salt + 7, 3.0));
        let oracle = fine_integral(PI, 64, |xi| {
            let (a, b) = (eval(&x, xi), eval(&y, xi));
            inner.integrate(|t| g.value(xi, PI, a, t * b)) * b
        });
        let u = r.potential(&x, &y).unwrap();
        assert!((u - oracle).abs() < 1e-7, "salt {salt}: {u} vs {oracle}");
    }
}

#[test]
fn potential_gradient_is_the_fast_reaction() {
    let s = dirichlet(8);
    for g in [
        "linear_damped(a=0.5)",
        "linear_damped(a=0.5) + fast_tanh(a=0.2, s=2)",
        "linear_damped(a=0.25) + sum_tanh(a=0.4) + sine_source(a=0.5, k=2)",
        "linear(fast=-0.5, slow=0.2, constant=1) + fast_sin(a=0.3)",
    ] {
        let r = system("zero", g, 8);
        for salt in 0..3 {
            let (x, y, k) = (field(&s, salt, 2.0), field(&s, salt + 5, 2.0), field(&s, salt + 9, 1.0));
            let (analytic, numeric) = r.potential_gradient_check(&x, &y, &k, 1e-4).unwrap();
            assert!((analytic - numeric).abs() < 1e-6 * analytic.abs().max(1e-3), "{g}: {analytic} vs {numeric}");
            let zero = Field::zeros(s.basis());
            assert_eq!(r.potential_gradient_check(&x, &y, &zero, 1e-4).unwrap(), (0.0, 0.0));
        }
    }
}

#[test]
fn gradient_error_is_second_order_in_step() {
    let s = dirichlet(8);
    let r = system("zero", "linear_damped(a=0.5) + fast_tanh(a=0.1, s=3)", 8);
    let (x, y, k) = (field(&s, 1, 2.0), field(&s, 2, 4.0), field(&s, 3, 2.0));
    let err = |tau: f64| {
        let (a, n) = r.potential_gradient_check(&x, &y, &k, tau).unwrap();
        (a - n).abs()
    };
    let ratio = err(2e-2) / err(1e-2);
    assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
}

#[test]
fn slow_derivative_of_potential() {
    let s = dirichlet(8);
    let r = system("zero", "linear_damped(a=0.5) + fast_tanh(a=0.3)", 8);
    let (x, y, k) = (field(&s, 1, 2.0), field(&s, 2, 2.0), field(&s, 3, 1.0));
    assert_eq!(r.potential_x_derivative(&x, &y, &k).unwrap(), 0.0);

    let r = system("zero", "linear_damped(a=0.5) + sum_tanh(a=0.3) + slow_sin(a=0.2, s=2)", 8);
    for salt in 0..3 {
        let (x, y, k) = (field(&s, salt, 3.0), field(&s, salt + 4, 3.0), field(&s, salt + 8, 1.0));
        let tau = 1e-4;
        let mut xp = x.clone();
        xp.axpy(tau, &k);
        let mut xm = x.clone();
        xm.axpy(-tau, &k);
        let fd = (r.potential(&xp, &y).unwrap() - r.potential(&xm, &y).unwrap()) / (2.0 * tau);
        let d = r.potential_x_derivative(&x, &y, &k).unwrap();
        assert!((d - fd).abs() < 1e-6, "{d} vs {fd}");
    }
}

#[test]
fn nemytskii_is_lipschitz_with_certified_constant() {
    let s = dirichlet(8);
    for f in [
        "linear(slow=0.5, fast=-1)",
        "slow_tanh(a=2, s=0.5) + fast_sin(a=0.7, s=3)",
        "sum_tanh(a=1.5) + constant(c=2)",
    ] {
        let r = system(f, "linear_damped(a=0.5)", 8);
        let lf = r.lipschitz_f();
        for salt in 0..20 {
            let (x1, y1) = (field(&s, salt, 6.0), field(&s, salt + 100, 6.0));
            let (x2, y2) = (field(&s, salt + 200, 6.0), field(&s, salt + 300, 6.0));
            let lhs = r.eval_f(&x1, &y1).unwrap().distance(&r.eval_f(&x2, &y2).unwrap());
            let rhs = lf * (x1.distance(&x2) + y1.distance(&y2));
            assert!(lhs <= rhs * (1.0 + 1e-12), "{f}: {lhs} > {rhs}");
        }
    }
}

#[test]
fn sine_product_quadrature_error_is_fourth_order() {
    // the integrand vanishes cubically at both ends, so the midpoint rule
    // over the half period converges algebraically
    let s = dirichlet(16);
    let x = field(&s, 3, 2.0);
    let y = field(&s, 4, 2.0);
    let f: ReactionFn = "sin_product(a=1)".parse().unwrap();
    let k = 14;
    let oracle = fine_integral(PI, 64, |xi| eval(&x, xi).sin() * eval(&y, xi) * s.basis().eigenfunction(k, xi));
    let err = |m: usize| (nemytskii(&f, &x, &y, m).unwrap().coeffs()[k - 1] - oracle).abs();
    for m in [129, 257] {
        let ratio = err(m) / err(2 * m - 1);
        assert!(ratio > 14.0 && ratio < 18.0, "M {m}: ratio {ratio}");
    }
}
