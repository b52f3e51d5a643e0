use spde_averaging_core::fast::{
    contraction_estimate, moment_profile, semigroup_difference, semigroup_expectation, simulate_fast,
    slow_sensitivity, Ensemble, Functional,
};
use spde_averaging_core::reaction::make_reaction;
use spde_averaging_core::stats::Estimate;
use spde_averaging_core::{BoundaryCondition, Error, Field, NoiseStream, OperatorSpectrum, ReactionSystem, Sequential};
use std::f64::consts::PI;

const NONLINEAR_G: &str = "linear_damped(a=0.5) + fast_tanh(a=0.1, s=2) + sum_tanh(a=0.1) + constant(c=0.5)";

fn system(g: &str, n: usize) -> ReactionSystem {
    let s = OperatorSpectrum::build(PI, BoundaryCondition::Dirichlet, n).unwrap();
    make_reaction("linear(fast=1)".parse().unwrap(), g.parse().unwrap(), &s).unwrap()
}

fn sample_x(r: &ReactionSystem) -> Field {
    Field::from_leading(r.slow_basis(), &[0.8, -0.3, 0.2])
}

#[test]
fn centred_linear_modes_have_stationary_variance() {
    let r = system("linear_damped(a=0.5)", 6);
    let x = Field::zeros(r.slow_basis());
    let mut ns = NoiseStream::new(2024, 0, 6);
    let path = simulate_fast(&x, &Field::zeros(r.fast_basis()), &r, 4000.0, 0.05, Some(&mut ns)).unwrap();
    let burn = 200;
    for k in 0..6 {
        let sq: Vec<f64> = path.states[burn..].iter().map(|v| v.coeffs()[k].powi(2)).collect();
        let e = Estimate::of_series(&sq);
        let exact = 1.0 / (2.0 * (((k + 1) * (k + 1)) as f64 + 0.5));
        assert!(e.covers(exact, 4.0), "mode {k}: {} ± {} vs {exact}", e.mean, e.std_error);
    }
}

#[test]
fn noise_free_flow_reaches_the_fixed_point() {
    let r = system(NONLINEAR_G, 8);
    let x = sample_x(&r);
    // oracle: v = (−B)⁻¹ G(x, v) by Picard iteration, a contraction since L_g < λ
    let alphas = r.fast_spectrum().eigenvalues().to_vec();
    let mut v = Field::zeros(r.fast_basis());
    for _ in 0..400 {
        let g = r.eval_g(&x, &v).unwrap();
        let next: Vec<f64> = g.coeffs().iter().zip(&alphas).map(|(g, a)| g / a).collect();
        v = Field::new(r.fast_basis(), next).unwrap();
    }
    let y0 = Field::from_leading(r.fast_basis(), &[2.0, -1.0, 0.5]);
    let path = simulate_fast(&x, &y0, &r, 80.0, 0.05, None).unwrap();
    assert!(path.states.last().unwrap().distance(&v) < 1e-10);
}

#[test]
fn halving_the_step_keeps_the_endpoint_law() {
    let r = system(NONLINEAR_G, 6);
    let x = sample_x(&r);
    let y0 = Field::from_leading(r.fast_basis(), &[1.0, 0.5]);
    let h = Field::unit(r.fast_basis(), 1);
    let mut stats = Vec::new();
    for (dt, seed) in [(0.1, 1), (0.05, 2)] {
        let ens = Ensemble::new(dt, 10_000, seed);
        let m1 = semigroup_expectation(&Functional::Linear(h.clone()), &x, &y0, &r, 2.0, &ens, &Sequential).unwrap();
        let steps = (2.0 / dt).round() as usize;
        let m2 = spde_averaging_core::fast::ensemble_observable(&x, &y0, &r, &[steps], &ens, &Sequential, |v| {
            v.norm_sq()
        })
        .unwrap()[0];
        stats.push((m1, m2));
    }
    let (a, b) = (stats[0], stats[1]);
    assert!(a.0.agrees_with(&b.0, 3.0), "{:?} vs {:?}", a.0, b.0);
    assert!(a.1.agrees_with(&b.1, 3.0), "{:?} vs {:?}", a.1, b.1);
}

#[test]
fn linear_contraction_rate_is_exact() {
    let r = system("linear_damped(a=0.5)", 6);
    let x = Field::zeros(r.slow_basis());
    let y = Field::from_leading(r.fast_basis(), &[1.0]);
    let z = Field::from_leading(r.fast_basis(), &[-1.0]);
    let fit = contraction_estimate(&x, &y, &z, &r, 10.0, 0.05, &NoiseStream::new(3, 0, 6)).unwrap();
    assert!((fit.rate - 1.5).abs() < 1e-9, "rate {}", fit.rate);
    assert!(fit.rate >= 1.0 - 0.5);
}

#[test]
fn nonlinear_contraction_beats_the_dissipativity_margin() {
    let r = system(NONLINEAR_G, 8);
    let x = sample_x(&r);
    let margin = r.fast_spectrum().spectral_gap() - r.lipschitz_g();
    for salt in 0..4u64 {
        let y = Field::from_leading(r.fast_basis(), &[2.0, 1.0 - salt as f64, 0.3]);
        let z = Field::from_leading(r.fast_basis(), &[-1.0, 0.5, salt as f64]);
        let fit = contraction_estimate(&x, &y, &z, &r, 12.0, 0.05, &NoiseStream::new(salt, 0, 8)).unwrap();
        assert!(fit.rate >= 0.95 * margin, "rate {}", fit.rate);
        let d0 = y.distance(&z);
        for (t, d) in fit.times.iter().zip(&fit.distances) {
            assert!(*d <= 1.05 * (-margin * t).exp() * d0, "t {t}");
        }
    }
}

#[test]
fn coinciding_starts_have_no_rate() {
    let r = system(NONLINEAR_G, 4);
    let x = sample_x(&r);
    let y = Field::unit(r.fast_basis(), 2);
    let e = contraction_estimate(&x, &y, &y, &r, 5.0, 0.05, &NoiseStream::new(0, 0, 4));
    assert!(matches!(e, Err(Error::DegenerateFit(_))));
}

#[test]
fn stationary_second_moment_of_linear_system() {
    let r = system("linear_damped(a=0.5)", 8);
    let zero = Field::zeros(r.slow_basis());
    let ens = Ensemble::new(0.1, 4000, 77);
    let prof = moment_profile(&zero, &zero, &r, 2.0, 10.0, 20, &ens, &Sequential).unwrap();
    let exact: f64 = r.fast_spectrum().eigenvalues().iter().map(|a| 1.0 / (2.0 * (a + 0.5))).sum();
    let last = prof.moments.last().unwrap();
    assert!(last.covers(exact, 3.0), "{} ± {} vs {exact}", last.mean, last.std_error);

    let first = moment_profile(&zero, &zero, &r, 1.0, 10.0, 20, &ens, &Sequential).unwrap();
    for (m1, m2) in first.moments.iter().zip(&prof.moments) {
        assert!(m1.mean * m1.mean <= m2.mean * (1.0 + 1e-12));
    }
}

#[test]
fn initial_condition_term_decays_at_least_at_rate_delta() {
    let r = system(NONLINEAR_G, 6);
    let x = sample_x(&r);
    let y0 = Field::from_leading(r.fast_basis(), &[20.0, -10.0]);
    let ens = Ensemble::new(0.05, 400, 5);
    let prof = moment_profile(&x, &y0, &r, 2.0, 4.0, 4, &ens, &Sequential).unwrap();
    let stationary = moment_profile(&x, &Field::zeros(r.fast_basis()), &r, 2.0, 30.0, 600, &ens, &Sequential)
        .unwrap()
        .moments
        .last()
        .unwrap()
        .mean;
    let (ts, ys): (Vec<f64>, Vec<f64>) = prof
        .times
        .iter()
        .zip(&prof.moments)
        .filter(|(t, _)| **t <= 2.0)
        .map(|(t, m)| (*t, m.mean - stationary))
        .unzip();
    let (_, rate) = spde_averaging_core::stats::exponential_decay_fit(&ts, &ys).unwrap();
    // the second moment's transient decays at 2ρ for a contraction rate ρ ≥ δ
    assert!(rate / 2.0 >= r.dissipativity_gap(), "rate {rate}");
}

#[test]
fn semigroup_at_zero_and_linear_mean_propagation() {
    let r = system("linear_damped(a=0.5) + constant(c=1)", 6);
    let x = Field::zeros(r.slow_basis());
    let y = Field::from_leading(r.fast_basis(), &[1.0, -2.0, 0.5]);
    let ens = Ensemble::new(0.05, 8000, 31);
    for k in 1..=3 {
        let h = Field::unit(r.fast_basis(), k);
        let phi = Functional::Linear(h);
        assert_eq!(semigroup_expectation(&phi, &x, &y, &r, 0.0, &ens, &Sequential).unwrap().mean, y.coeffs()[k - 1]);
        let a = (k * k) as f64 + 0.5;
        let one_k = if k % 2 == 1 { (2.0 / PI).sqrt() * 2.0 / k as f64 } else { 0.0 };
        let m = one_k / a;
        let t = 0.7;
        let exact = (-a * t).exp() * y.coeffs()[k - 1] + m * (1.0 - (-a * t).exp());
        let e = semigroup_expectation(&phi, &x, &y, &r, t, &ens, &Sequential).unwrap();
        assert!(e.covers(exact, 4.0), "mode {k}: {} ± {} vs {exact}", e.mean, e.std_error);
    }
}

#[test]
fn semigroup_contracts_lipschitz_functionals() {
    let r = system(NONLINEAR_G, 6);
    let x = sample_x(&r);
    let y = Field::from_leading(r.fast_basis(), &[1.5, 0.5]);
    let z = Field::from_leading(r.fast_basis(), &[-0.5, 1.0, -1.0]);
    let h = Field::from_leading(r.fast_basis(), &[1.0, 1.0]);
    let ens = Ensemble::new(0.05, 2000, 8);
    for phi in [Functional::Norm, Functional::Clipped { h: h.clone(), bound: 0.5 }, Functional::Linear(h)] {
        for t in [0.5, 1.0, 2.0] {
            let d = semigroup_difference(&phi, &x, &y, &z, &r, t, &ens, &Sequential).unwrap();
            let bound = (-r.dissipativity_gap() * t).exp() * phi.lipschitz() * y.distance(&z);
            assert!(d.mean.abs() <= bound + 3.0 * d.std_error, "{phi:?} t {t}");
        }
    }
}

#[test]
fn slow_sensitivity_is_stable_under_refinement() {
    let r = system("linear_damped(a=0.5) + sum_tanh(a=0.3)", 8);
    let x1 = sample_x(&r);
    let mut x2 = x1.clone();
    x2.axpy(1e-3, &Field::from_leading(r.slow_basis(), &[1.0, 1.0, 1.0]));
    let y = Field::zeros(r.fast_basis());
    let ns = NoiseStream::new(4, 0, 8);
    let coarse = slow_sensitivity(&x1, &x2, &y, &r, 5.0, 0.05, &ns).unwrap();
    let fine = slow_sensitivity(&x1, &x2, &y, &r, 5.0, 0.025, &ns).unwrap();
    assert!(coarse.is_finite() && coarse > 0.0);
    // coupling bound: C ≤ L_x(g) / (λ − L_g)
    assert!(coarse <= r.coupling_bound_g() / (1.0 - r.lipschitz_g()) * 1.05);
    assert!((coarse - fine).abs() < 0.2 * fine, "{coarse} vs {fine}");
}
