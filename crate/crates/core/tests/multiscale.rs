use spde_averaging_core::fast::Ensemble;
use spde_averaging_core::measure::{DriftEstimator, PcnConfig};
use spde_averaging_core::multiscale::{
    apriori_bounds_check, convergence_study, correction_estimate, energy_envelope_constant, fit_correction_constant,
    gaussian_correction, interval_trend, nonincreasing_within_ci, remainder_diagnostic, simulate_coupled,
    simulate_ensemble, solve_averaged, CachedDrift, ClosedFormDrift, CoupledPath, NestedDrift,
    SimConfig, Trend,
};
use spde_averaging_core::reaction::make_reaction;
use spde_averaging_core::stats::Estimate;
use spde_averaging_core::{BoundaryCondition, Field, NoiseStream, OperatorSpectrum, ReactionSystem, Sequential};
use std::f64::consts::PI;

fn spectrum(n: usize) -> OperatorSpectrum {
    OperatorSpectrum::build(PI, BoundaryCondition::Dirichlet, n).unwrap()
}

fn system(f: &str, g: &str, n: usize) -> ReactionSystem {
    make_reaction(f.parse().unwrap(), g.parse().unwrap(), &spectrum(n)).unwrap()
}

fn one_k(k: usize) -> f64 {
    if k % 2 == 1 {
        (2.0 / PI).sqrt() * 2.0 / k as f64
    } else {
        0.0
    }
}

fn config(eps: f64, replicas: usize) -> SimConfig {
    SimConfig {
        eps,
        horizon: 1.0,
        dt_slow: 0.01,
        dt_fast: 0.01,
        n_modes: 8,
        replicas,
        seed: 7,
        eta: 0.1,
    }
}

fn x0(n: usize) -> Field {
    Field::from_leading(spectrum(n).basis(), &[1.0, -0.5, 0.25])
}

fn y0(n: usize) -> Field {
    Field::from_leading(spectrum(n).basis(), &[0.5, 0.5])
}

#[test]
fn config_validation() {
    assert!(config(0.1, 1).validate().is_ok());
    let mut c = config(0.1, 1);
    c.dt_fast = 0.02;
    assert!(c.validate().is_err());
    c = config(0.0, 1);
    assert!(c.validate().is_err());
    let c = config(0.01, 1);
    assert_eq!(c.macro_steps(), 100);
    assert_eq!(c.micro_steps(), 100);
    assert!((c.micro_dt() - 1e-4).abs() < 1e-18);
}

#[test]
fn no_slow_reaction_gives_the_heat_semigroup() {
    let a = spectrum(8);
    let r = system("zero", "linear_damped(a=0.5)", 8);
    for eps in [1.0, 0.1] {
        let mut ns = NoiseStream::new(1, 0, 8);
        let p = simulate_coupled(&x0(8), &y0(8), &a, &r, &config(eps, 1), &mut ns).unwrap();
        for (t, u) in p.times.iter().zip(&p.u_states) {
            let exact = a.apply_semigroup(&x0(8), *t).unwrap();
            assert!(u.distance(&exact) < 1e-13, "t {t}");
        }
        assert_eq!(p.u_states[0], x0(8));
        assert_eq!(p.v_states[0], y0(8));
        assert_eq!(p.len(), p.u_states.len());
        assert_eq!(p.len(), p.v_states.len());
    }
}

#[test]
fn decoupled_slow_path_ignores_noise_and_eps() {
    let a = spectrum(8);
    let r = system("linear(slow=1) + slow_tanh(a=0.5, s=1)", "linear_damped(a=0.5) + sum_tanh(a=0.2)", 8);
    let mut fbar = ClosedFormDrift::new(&r).unwrap();
    let avg = solve_averaged(&x0(8), &a, &r, &mut fbar, 1.0, 0.01).unwrap();
    for eps in [1.0, 0.1, 0.01] {
        for replica in 0..3 {
            let mut ns = NoiseStream::new(3, replica, 8);
            let p = simulate_coupled(&x0(8), &y0(8), &a, &r, &config(eps, 1), &mut ns).unwrap();
            assert_eq!(p.u_states, avg.states);
            assert_eq!(p.sup_distance(&avg.states).unwrap(), 0.0);
        }
    }
}

#[test]
fn averaged_slow_identity_is_exponential_per_mode() {
    let a = spectrum(8);
    let r = system("linear(slow=1)", "linear_damped(a=0.5)", 8);
    let mut fbar = ClosedFormDrift::new(&r).unwrap();
    let p = solve_averaged(&x0(8), &a, &r, &mut fbar, 1.0, 0.01).unwrap();
    for (t, u) in p.times.iter().zip(&p.states) {
        for k in 1..=8 {
            let exact = ((1.0 - (k * k) as f64) * t).exp() * x0(8).coeffs()[k - 1];
            assert!((u.coeffs()[k - 1] - exact).abs() < 1e-12, "t {t} mode {k}");
        }
    }
    assert!(p.warnings.is_empty());
    assert_eq!(p.noise_floor(), 0.0);
}

#[test]
fn averaged_equation_with_mean_field_source() {
    let a = spectrum(8);
    let r = system("linear(fast=1)", "linear_damped(a=0.5) + constant(c=1)", 8);
    let mut fbar = ClosedFormDrift::new(&r).unwrap();
    let p = solve_averaged(&x0(8), &a, &r, &mut fbar, 1.0, 0.05).unwrap();
    for (t, u) in p.times.iter().zip(&p.states) {
        for k in 1..=8 {
            let alpha = (k * k) as f64;
            let m = one_k(k) / (alpha + 0.5);
            let decay = (-alpha * t).exp();
            let exact = decay * x0(8).coeffs()[k - 1] + m * (1.0 - decay) / alpha;
            assert!((u.coeffs()[k - 1] - exact).abs() < 1e-12, "t {t} mode {k}");
        }
    }

    let centred = system("linear(fast=1)", "linear_damped(a=0.5)", 8);
    let mut fbar = ClosedFormDrift::new(&centred).unwrap();
    let p = solve_averaged(&x0(8), &a, &centred, &mut fbar, 1.0, 0.05).unwrap();
    assert!(p.last().distance(&a.apply_semigroup(&x0(8), 1.0).unwrap()) < 1e-13);
}

#[test]
fn closed_form_refuses_nonlinear_fast_law() {
    let r = system("linear(fast=1)", "linear_damped(a=0.5) + fast_tanh(a=0.2, s=1)", 4);
    assert!(ClosedFormDrift::new(&r).is_err());
    let r = system("fast_tanh(a=1)", "linear_damped(a=0.5)", 4);
    assert!(ClosedFormDrift::new(&r).is_err());
}

#[test]
fn nested_drift_agrees_with_closed_form_within_noise_floor() {
    let a = spectrum(8);
    let r = system("linear(fast=1)", "linear_damped(a=0.5) + constant(c=1)", 8);
    let mut exact = ClosedFormDrift::new(&r).unwrap();
    let reference = solve_averaged(&x0(8), &a, &r, &mut exact, 1.0, 0.05).unwrap();
    let cfg = PcnConfig {
        n_samples: 4000,
        ..PcnConfig::default()
    };
    let mut nested = NestedDrift::new(&r, DriftEstimator::Pcn { cfg, seed: 5 });
    let p = solve_averaged(&x0(8), &a, &r, &mut nested, 1.0, 0.05).unwrap();
    assert_eq!(p.evaluations, 20);
    let gap = p
        .states
        .iter()
        .zip(&reference.states)
        .map(|(u, v)| u.distance(v))
        .fold(0.0, f64::max);
    assert!(gap > 0.0 && gap <= p.noise_floor(), "gap {gap} floor {}", p.noise_floor());
}

#[test]
fn cache_reuses_nearby_drift() {
    let a = spectrum(8);
    let r = system("linear(fast=1)", "linear_damped(a=0.5) + constant(c=1)", 8);
    let cfg = PcnConfig {
        n_samples: 500,
        ..PcnConfig::default()
    };
    let mut cached = CachedDrift::with_tolerance(NestedDrift::new(&r, DriftEstimator::Pcn { cfg, seed: 5 }), 0.05);
    let p = solve_averaged(&x0(8), &a, &r, &mut cached, 1.0, 0.01).unwrap();
    assert!(cached.hits() > 0);
    assert_eq!(cached.hits() + p.evaluations, 100);
}

#[test]
fn fast_marginal_reaches_stationary_variance_for_every_eps() {
    let a = spectrum(8);
    let r = system("linear(fast=1)", "linear_damped(a=0.5)", 8);
    let delta = r.dissipativity_gap();
    for eps in [1.0, 0.1, 0.01] {
        // ten transients ε/δ, rounded to whole macro steps
        let mut cfg = config(eps, 2000);
        cfg.horizon = (10.0 * eps / delta / cfg.dt_slow).ceil() * cfg.dt_slow;
        let paths = simulate_ensemble(&x0(8), &y0(8), &a, &r, &cfg, &Sequential).unwrap();
        for k in 1..=4 {
            let xs: Vec<f64> = paths.iter().map(|p| p.v_states.last().unwrap().coeffs()[k - 1]).collect();
            let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
            let exact = 1.0 / (2.0 * ((k * k) as f64 + 0.5));
            assert!(Estimate::of_independent(&xs).covers(0.0, 4.0), "eps {eps} mode {k} mean");
            assert!(Estimate::of_independent(&sq).covers(exact, 4.0), "eps {eps} mode {k} variance");
        }
    }
}

fn groups(r: &ReactionSystem, x: &Field, y: &Field, replicas: usize) -> Vec<Vec<CoupledPath>> {
    let a = spectrum(8);
    [1.0, 0.1, 0.01]
        .iter()
        .map(|&eps| simulate_ensemble(x, y, &a, r, &config(eps, replicas), &Sequential).unwrap())
        .collect()
}

#[test]
fn apriori_bounds_do_not_grow_as_eps_shrinks() {
    let r = system("zero", "linear_damped(a=0.5)", 8);
    let report = apriori_bounds_check(&groups(&r, &x0(8), &y0(8), 20)).unwrap();
    for row in &report.rows {
        assert!(row.sup_u_sq.mean <= x0(8).norm_sq() * (1.0 + 1e-12));
    }

    let r = system("linear(fast=1)", "linear_damped(a=0.5)", 8);
    let base = apriori_bounds_check(&groups(&r, &x0(8), &y0(8), 100)).unwrap();
    assert!(base.no_growth, "{:?}", base.rows);
    assert_eq!(base.rows.len(), 3);
    let doubled = apriori_bounds_check(&groups(&r, &x0(8).scaled(2.0), &y0(8).scaled(2.0), 100)).unwrap();
    for (b, d) in base.rows.iter().zip(&doubled.rows) {
        assert!(d.sup_u_sq.mean <= 4.0 * b.sup_u_sq.mean * 1.05, "eps {}", b.eps);
        assert!(d.sup_v_sq.mean <= 4.0 * b.sup_v_sq.mean * 1.05, "eps {}", b.eps);
    }
}

#[test]
fn apriori_rejects_mismatched_groups() {
    let r = system("zero", "linear_damped(a=0.5)", 8);
    let mut g = groups(&r, &x0(8), &y0(8), 2);
    g[1] = simulate_ensemble(&y0(8), &y0(8), &spectrum(8), &r, &config(0.1, 2), &Sequential).unwrap();
    assert!(apriori_bounds_check(&g).is_err());
}

#[test]
fn remainder_vanishes_in_trivial_cases() {
    let a = spectrum(8);
    let r = system("linear(slow=1)", "linear_damped(a=0.5)", 8);
    let mut ns = NoiseStream::new(1, 0, 8);
    let p = simulate_coupled(&x0(8), &y0(8), &a, &r, &config(0.1, 1), &mut ns).unwrap();
    let h = Field::unit(a.basis(), 1);
    let mut fbar = ClosedFormDrift::new(&r).unwrap();
    assert_eq!(remainder_diagnostic(&p, &h, &mut fbar).unwrap().sup_abs(), 0.0);

    let r = system("linear(fast=1)", "linear_damped(a=0.5)", 8);
    let mut ns = NoiseStream::new(1, 0, 8);
    let p = simulate_coupled(&x0(8), &y0(8), &a, &r, &config(0.1, 1), &mut ns).unwrap();
    let mut fbar = ClosedFormDrift::new(&r).unwrap();
    let zero = Field::zeros(a.basis());
    let series = remainder_diagnostic(&p, &zero, &mut fbar).unwrap();
    assert_eq!(series.sup_abs(), 0.0);
    assert_eq!(series.values.len(), p.len());
    assert!(remainder_diagnostic(&p, &h, &mut fbar).unwrap().sup_abs() > 0.0);
}

#[test]
fn correction_matches_gaussian_laplace_transform() {
    let r = system("linear(fast=1)", "linear_damped(a=0.5) + constant(c=1)", 6);
    let x = Field::zeros(r.slow_basis());
    let y = Field::from_leading(r.fast_basis(), &[1.5, -1.0, 0.5]);
    let h = Field::from_leading(r.slow_basis(), &[1.0, 1.0]);
    let m = spde_averaging_core::measure::gaussian_mean(&r, &x).unwrap();
    let fbar_h = m.dot(&h);
    for c in [0.5, 2.0, 20.0] {
        let exact = gaussian_correction(&r, &x, &y, &h, c).unwrap();
        let ens = Ensemble::new(0.005, 2000, 21);
        let est = correction_estimate(&x, &y, &h, c, fbar_h, &r, 25.0 / (c + r.dissipativity_gap()), &ens, &Sequential).unwrap();
        let bias = est.truncation_bound + 1e-4 * exact.abs();
        assert!(
            (est.value.mean - exact).abs() < 4.0 * est.value.std_error + bias,
            "c {c}: {} ± {} vs {exact}",
            est.value.mean,
            est.value.std_error
        );
        assert!(est.warnings.is_empty());
    }
}

#[test]
fn correction_decays_like_inverse_damping() {
    let r = system("linear(fast=1)", "linear_damped(a=0.5) + constant(c=1)", 6);
    let x = Field::zeros(r.slow_basis());
    let y = Field::from_leading(r.fast_basis(), &[1.5, -1.0, 0.5]);
    let h = Field::from_leading(r.slow_basis(), &[1.0, 1.0]);
    let m = spde_averaging_core::measure::gaussian_mean(&r, &x).unwrap();
    let start = y.dot(&h) - m.dot(&h);
    let mut prev = f64::INFINITY;
    for c in [1e2, 1e3, 1e4, 1e5] {
        let scaled = c * gaussian_correction(&r, &x, &y, &h, c).unwrap();
        let err = (scaled - start).abs();
        assert!(err < prev);
        prev = err;
    }
    assert!(prev < 1e-4 * start.abs());
}

#[test]
fn correction_is_zero_without_fast_dependence() {
    let r = system("linear(slow=1)", "linear_damped(a=0.5) + sum_tanh(a=0.2)", 6);
    let x = Field::from_leading(r.slow_basis(), &[1.0]);
    let y = Field::from_leading(r.fast_basis(), &[1.0]);
    let h = Field::unit(r.slow_basis(), 1);
    let est = correction_estimate(&x, &y, &h, 1.0, 0.0, &r, 5.0, &Ensemble::new(0.05, 10, 0), &Sequential).unwrap();
    assert_eq!(est.value.mean, 0.0);
    assert_eq!(est.truncation_bound, 0.0);
    assert!(correction_estimate(&x, &y, &h, 0.0, 0.0, &r, 5.0, &Ensemble::new(0.05, 10, 0), &Sequential).is_err());
}

#[test]
fn correction_uniform_bound_holds_on_held_out_states() {
    let r = system("linear(fast=1)", "linear_damped(a=0.5) + linear(slow=0.2) + constant(c=1)", 6);
    let delta = r.dissipativity_gap();
    let row = |xs: f64, ys: f64, c: f64| {
        let x = Field::from_leading(r.slow_basis(), &[xs, -xs]);
        let y = Field::from_leading(r.fast_basis(), &[ys, 0.5 * ys, -ys]);
        let h = Field::from_leading(r.slow_basis(), &[1.0, 0.5]);
        let phi = gaussian_correction(&r, &x, &y, &h, c).unwrap();
        (phi, x.norm(), y.norm(), h.norm())
    };
    let fit: Vec<_> = [(0.0, 0.0), (1.0, 0.5), (0.5, 2.0), (2.0, 1.0)]
        .iter()
        .flat_map(|&(a, b)| [0.1, 1.0].map(|c| row(a, b, c)))
        .collect();
    let c = fit_correction_constant(&fit, delta);
    for (xs, ys) in [(4.0, 3.0), (-3.0, 5.0), (6.0, -6.0)] {
        for ce in [0.05, 0.5, 5.0] {
            let (phi, xn, yn, hn) = row(xs, ys, ce);
            assert!(phi.abs() <= 1.05 * c / delta * (1.0 + xn + yn) * hn, "({xs}, {ys}, {ce})");
        }
    }
}

#[test]
fn energy_envelope_fitted_on_some_replicas_holds_on_others() {
    let a = spectrum(8);
    let r = system("linear(fast=1) + slow_tanh(a=0.5, s=1)", "linear_damped(a=0.5) + sum_tanh(a=0.2)", 8);
    let paths = simulate_ensemble(&x0(8), &y0(8), &a, &r, &config(0.1, 40), &Sequential).unwrap();
    let c = paths[..20].iter().map(energy_envelope_constant).fold(0.0, f64::max);
    assert!(c.is_finite() && c < 10.0);
    for p in &paths[20..] {
        assert!(energy_envelope_constant(p) <= 1.05 * c);
    }
}

#[test]
fn decoupled_convergence_table_is_identically_zero() {
    let a = spectrum(8);
    let r = system("linear(slow=1)", "linear_damped(a=0.5) + sum_tanh(a=0.2)", 8);
    let cfg = config(1.0, 20);
    let mut fbar = ClosedFormDrift::new(&r).unwrap();
    let avg = solve_averaged(&x0(8), &a, &r, &mut fbar, cfg.horizon, cfg.dt_slow).unwrap();
    let rows = convergence_study(&x0(8), &y0(8), &a, &r, &[1.0, 0.1, 0.01], &cfg, &avg, &Sequential).unwrap();
    for row in &rows {
        assert_eq!(row.mean_sup_error, 0.0);
        assert_eq!(row.exceedance_prob, 0.0);
        assert_eq!(row.replica_count, 20);
    }
    assert!(nonincreasing_within_ci(&rows));
    assert!(convergence_study(&x0(8), &y0(8), &a, &r, &[0.1, 1.0], &cfg, &avg, &Sequential).is_err());
}

#[test]
fn doubling_replicas_narrows_the_interval() {
    let a = spectrum(8);
    let r = system("linear(fast=0.5)", "linear_damped(a=0.5) + linear(slow=0.2) + constant(c=1)", 8);
    let mut fbar = ClosedFormDrift::new(&r).unwrap();
    let mut widths = Vec::new();
    for replicas in [200, 400] {
        let cfg = config(0.1, replicas);
        let avg = solve_averaged(&x0(8), &a, &r, &mut fbar, cfg.horizon, cfg.dt_slow).unwrap();
        let row = convergence_study(&x0(8), &y0(8), &a, &r, &[0.1], &cfg, &avg, &Sequential).unwrap()[0];
        assert!(row.exceedance_prob > 0.1 && row.exceedance_prob < 0.9, "p {}", row.exceedance_prob);
        widths.push(row.ci_high - row.ci_low);
    }
    let ratio = widths[1] / widths[0];
    assert!((ratio - 0.5f64.sqrt()).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn interval_trend_classification() {
    let t = interval_trend(&[(0.8, 0.9), (0.4, 0.6), (0.5, 0.7), (0.9, 1.0)]);
    assert_eq!(t, vec![Trend::SeparatedDecrease, Trend::Overlap, Trend::SeparatedIncrease]);
}
