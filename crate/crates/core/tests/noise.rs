use spde_averaging_core::noise::{convolution_second_moment, ou_exact_step, stochastic_convolution_moments};
use spde_averaging_core::stats::RunningMoments;
use spde_averaging_core::{BoundaryCondition, Field, NoiseStream, OperatorSpectrum, Sequential};
use std::f64::consts::PI;

fn dirichlet(n: usize) -> OperatorSpectrum {
    OperatorSpectrum::build(PI, BoundaryCondition::Dirichlet, n).unwrap()
}

#[test]
fn single_mode_transition_matches_closed_form() {
    let s = dirichlet(3);
    let v = Field::from_leading(s.basis(), &[1.0, -0.5, 0.2]);
    let drift = Field::from_leading(s.basis(), &[0.3, 0.0, 1.0]);
    let (h, eps) = (0.2, 0.4);
    let mut ns = NoiseStream::new(11, 0, 3);
    let mut acc = vec![RunningMoments::new(); 3];
    for _ in 0..100_000 {
        let out = ou_exact_step(&s, &v, &drift, h, eps, &mut ns).unwrap();
        for (a, c) in acc.iter_mut().zip(out.coeffs()) {
            a.push(*c);
        }
    }
    for k in 0..3 {
        let a = s.eigenvalues()[k];
        let tau = h / eps;
        let mean = (-a * tau).exp() * v.coeffs()[k] + (1.0 - (-a * tau).exp()) / a * drift.coeffs()[k];
        let var = (1.0 - (-2.0 * a * tau).exp()) / (2.0 * a);
        let n = acc[k].count() as f64;
        assert!((acc[k].mean() - mean).abs() < 4.0 * (var / n).sqrt(), "mean of mode {k}");
        let var_se = var * (2.0 / (n - 1.0)).sqrt();
        assert!((acc[k].variance() - var).abs() < 4.0 * var_se, "variance of mode {k}");
    }
}

#[test]
fn long_step_reaches_stationary_variance() {
    let s = dirichlet(2);
    let zero = Field::zeros(s.basis());
    let mut ns = NoiseStream::new(5, 1, 2);
    let mut acc = RunningMoments::new();
    for _ in 0..50_000 {
        acc.push(ou_exact_step(&s, &zero, &zero, 50.0, 1.0, &mut ns).unwrap().coeffs()[0]);
    }
    let n = acc.count() as f64;
    assert!((acc.variance() - 0.5).abs() < 4.0 * 0.5 * (2.0 / n).sqrt());
}

#[test]
fn distinct_replicas_are_uncorrelated() {
    let mut a = NoiseStream::new(99, 0, 4);
    let mut b = NoiseStream::new(99, 1, 4);
    let n = 50_000;
    let (mut za, mut zb) = ([0.0; 4], [0.0; 4]);
    let mut cross = [0.0; 4];
    for _ in 0..n {
        a.next_normals(&mut za);
        b.next_normals(&mut zb);
        for k in 0..4 {
            cross[k] += za[k] * zb[k];
        }
    }
    for c in cross {
        assert!((c / n as f64).abs() < 4.0 / (n as f64).sqrt());
    }
}

#[test]
fn same_key_reproduces_bitwise() {
    let draw = || {
        let mut ns = NoiseStream::new(123, 7, 5);
        let mut z = [0.0; 5];
        let mut out = Vec::new();
        for _ in 0..100 {
            ns.next_normals(&mut z);
            out.extend_from_slice(&z);
        }
        out
    };
    assert_eq!(draw(), draw());
}

#[test]
fn stationary_convolution_moment_for_sixty_four_modes() {
    let s = dirichlet(64);
    let direct: f64 = (1..=64).map(|k| 1.0 / (2.0 * (k * k) as f64)).sum();
    assert!((convolution_second_moment(&s, 1.0, 1e3) - direct).abs() < 1e-14);
}

#[test]
fn convolution_moment_is_uniform_in_eps() {
    let s = dirichlet(16);
    let stationary: f64 = s.eigenvalues().iter().map(|a| 1.0 / (2.0 * a)).sum();
    let mut finals = Vec::new();
    for eps in [1.0, 0.1, 0.01] {
        // horizon of 10 relaxation times of the slowest mode
        let horizon = 10.0 * eps;
        let rows = stochastic_convolution_moments(&s, eps, horizon, horizon / 20.0, 5, 4000, 17, &Sequential).unwrap();
        for r in &rows {
            assert!((r.mean_sq - r.analytic).abs() < 4.0 * r.std_error.max(1e-15), "eps {eps} t {}", r.t);
        }
        let last = *rows.last().unwrap();
        assert!((last.mean_sq - stationary).abs() < 3.0 * last.std_error);
        finals.push(last);
    }
    for w in finals.windows(2) {
        let se = (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
        assert!((w[0].mean_sq - w[1].mean_sq).abs() < 3.0 * se);
    }
}
