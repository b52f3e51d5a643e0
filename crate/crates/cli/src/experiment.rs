//! Experiment runners behind the CLI subcommands.

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use spde_averaging_core::fast::{contraction_estimate, moment_profile, Ensemble, MomentEnvelope};
use spde_averaging_core::measure::{
    averaged_drift, closed_form_averaged_drift, ergodic_measure, gaussian_mean, pcn_measure, DriftEstimator,
    MeasureEstimate,
};
use spde_averaging_core::multiscale::{
    convergence_study, interval_trend, nonincreasing_within_ci, remainder_study, simulate_coupled, simulate_ensemble,
    solve_averaged, AveragedPath, CachedDrift, ClosedFormDrift, DriftEvaluator, NestedDrift, Trend, Z95,
};
use spde_averaging_core::spectral::{analyze, synthesize};
use spde_averaging_core::{Executor, Field, NoiseStream, ReactionSystem};

use crate::cells;
use crate::config::{field_hash, EstimatorKind, ExperimentKind, ExperimentSpec, SpecError, System};
use crate::output::Table;

#[derive(Debug)]
pub enum RunError {
    Spec(SpecError),
    Core(spde_averaging_core::Error),
    Io(io::Error),
}

impl RunError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Spec(e) if e.is_hypothesis_violation() => 2,
            RunError::Core(e) if e.is_hypothesis_violation() => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Spec(e) => write!(f, "{e}"),
            RunError::Core(e) => write!(f, "{e}"),
            RunError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<SpecError> for RunError {
    fn from(e: SpecError) -> Self {
        RunError::Spec(e)
    }
}

impl From<spde_averaging_core::Error> for RunError {
    fn from(e: spde_averaging_core::Error) -> Self {
        RunError::Core(e)
    }
}

impl From<io::Error> for RunError {
    fn from(e: io::Error) -> Self {
        RunError::Io(e)
    }
}

/// One invariant checked by `validate`.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: Vec<String>,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn line(&mut self, s: impl Into<String>) {
        self.summary.push(s.into());
    }
}

/// Runs `spec` and writes its tables under `spec.output`.
pub fn run<E: Executor>(spec: &ExperimentSpec, exec: &E) -> Result<Outcome, RunError> {
    let sys = spec.build()?;
    let mut ctx = Context {
        spec,
        sys: &sys,
        hash: spec.hash(),
        out: Outcome::default(),
    };
    ctx.out.line(format!("{} ({})", spec.name, spec.kind.as_str()));
    ctx.out.line(format!("config_hash {}", ctx.hash));
    ctx.out.line(format!(
        "gate: L_g = {} < λ = {}, δ = {}",
        sys.reaction.lipschitz_g(),
        sys.reaction.fast_spectrum().spectral_gap(),
        sys.reaction.dissipativity_gap()
    ));
    match spec.kind {
        ExperimentKind::Validate => ctx.validate(exec)?,
        ExperimentKind::Fast => ctx.fast(exec)?,
        ExperimentKind::Invariant => ctx.invariant()?,
        ExperimentKind::Coupled => ctx.coupled(exec)?,
        ExperimentKind::Average => ctx.average()?,
        ExperimentKind::Converge => ctx.converge(exec)?,
        ExperimentKind::Remainder => ctx.remainder(exec)?,
    }
    Ok(ctx.out)
}

struct Context<'a> {
    spec: &'a ExperimentSpec,
    sys: &'a System,
    hash: String,
    out: Outcome,
}

impl Context<'_> {
    fn table<S: AsRef<str>>(&self, columns: &[S]) -> Table {
        let mut t = Table::new(columns);
        t.meta("generator", concat!("spde-averaging ", env!("CARGO_PKG_VERSION")))
            .meta("experiment", self.spec.kind.as_str())
            .meta("name", &self.spec.name)
            .meta("config_hash", &self.hash)
            .meta("seed", self.spec.sim.seed);
        t
    }

    fn save(&mut self, t: &Table, file: &str) -> Result<(), RunError> {
        let p = t.write(Path::new(&self.spec.output), file)?;
        self.out.files.push(p);
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.spec.sim.seed
    }

    fn r(&self) -> &ReactionSystem {
        &self.sys.reaction
    }

    fn mode_columns(&self, prefix: &str, n: usize) -> Vec<String> {
        (1..=n).map(|k| format!("{prefix}_{k}")).collect()
    }

    /// The `F̄` evaluator selected by `[measure]`; `salt` (below 2^32) separates streams.
    fn drift_evaluator(&self, salt: u64) -> Result<Box<dyn DriftEvaluator + '_>, RunError> {
        let r = self.r();
        Ok(match self.spec.measure.estimator {
            EstimatorKind::ClosedForm => Box::new(ClosedFormDrift::new(r)?),
            _ => Box::new(CachedDrift::with_tolerance(
                NestedDrift::new(r, self.spec.measure.estimator(self.seed())).with_replica_base(salt << 24),
                self.spec.measure.cache_tolerance,
            )),
        })
    }

    fn averaged(&self) -> Result<AveragedPath, RunError> {
        let mut fbar = self.drift_evaluator(1 << 31)?;
        let s = &self.spec.sim;
        Ok(solve_averaged(&self.sys.x0, &self.sys.slow, self.r(), &mut fbar, s.horizon, s.dt_slow)?)
    }

    fn sample_measure(&self, x: &Field) -> Result<MeasureEstimate, RunError> {
        let m = &self.spec.measure;
        Ok(match m.estimator {
            EstimatorKind::Ergodic => {
                let mut ns = NoiseStream::new(self.seed(), 0, self.r().fast_basis().n_modes);
                ergodic_measure(x, &self.sys.y0, self.r(), &m.ergodic(), &mut ns)?
            }
            _ => pcn_measure(x, self.r(), &m.pcn(), self.seed())?,
        })
    }

    fn check(&mut self, name: &str, passed: bool, value: f64, bound: f64) {
        self.out.line(format!("{} {name}: {value:.6e} vs {bound:.6e}", if passed { "PASS" } else { "FAIL" }));
        self.out.checks.push(Check {
            name: name.into(),
            passed,
            value,
            bound,
        });
    }

    fn validate<E: Executor>(&mut self, _exec: &E) -> Result<(), RunError> {
        let sys = self.sys;
        let r = &sys.reaction;
        let delta = r.dissipativity_gap();
        self.check("hypothesis_gate", delta > 0.0, delta, 0.0);

        let grid = r.grid();
        let back = analyze(&synthesize(&sys.x0, grid)?, grid, &sys.slow)?;
        self.check("grid_round_trip", back.distance(&sys.x0) < 1e-12, back.distance(&sys.x0), 1e-12);

        let k = Field::unit(r.fast_basis(), 1);
        let (a, n) = r.potential_gradient_check(&sys.x0, &sys.y0, &k, 1e-4)?;
        let err = (a - n).abs() / a.abs().max(1e-3);
        self.check("potential_gradient", err < 1e-5, err, 1e-5);

        let dt = 0.05f64.min(r.max_fast_step());
        let z = sys.y0.sub(&Field::unit(r.fast_basis(), 1));
        let ns = NoiseStream::new(self.seed(), 0, r.fast_basis().n_modes);
        let fit = contraction_estimate(&sys.x0, &sys.y0, &z, r, 10.0, dt, &ns)?;
        let margin = r.fast_spectrum().spectral_gap() - r.lipschitz_g();
        self.check("contraction_rate", fit.rate >= 0.95 * margin, fit.rate, 0.95 * margin);

        let m = &self.spec.measure;
        let p = pcn_measure(&sys.x0, r, &m.pcn(), self.seed())?;
        let mut ns = NoiseStream::new(self.seed(), 1, r.fast_basis().n_modes);
        let e = ergodic_measure(&sys.x0, &sys.y0, r, &m.ergodic(), &mut ns)?;
        for kk in 1..=r.fast_basis().n_modes.min(3) {
            let (a, b) = (p.mode_mean(kk), e.mode_mean(kk));
            let se = a.std_error.hypot(b.std_error);
            self.check(&format!("estimator_mean_{kk}"), a.agrees_with(&b, 3.0), (a.mean - b.mean).abs(), 3.0 * se);
            let (a, b) = (p.mode_variance(kk), e.mode_variance(kk));
            let se = a.std_error.hypot(b.std_error);
            self.check(&format!("estimator_variance_{kk}"), a.agrees_with(&b, 3.0), (a.mean - b.mean).abs(), 3.0 * se);
        }

        if r.residual_is_fast_independent() {
            let mean = gaussian_mean(r, &sys.x0)?;
            for kk in 1..=r.fast_basis().n_modes.min(3) {
                let est = p.mode_mean(kk);
                let gap = (est.mean - mean.coeffs()[kk - 1]).abs();
                self.check(&format!("closed_form_mean_{kk}"), gap <= 4.0 * est.std_error, gap, 4.0 * est.std_error);
            }
            if r.f().depends_on_fast() && r.f().is_affine_in_fast() {
                let exact = closed_form_averaged_drift(r, &sys.x0)?;
                let mc = averaged_drift(&sys.x0, r, &DriftEstimator::Pcn { cfg: m.pcn(), seed: self.seed() })?;
                let worst = exact
                    .value
                    .coeffs()
                    .iter()
                    .zip(mc.value.coeffs())
                    .zip(&mc.std_error)
                    .map(|((a, b), s)| (a - b).abs() / s.max(1e-300))
                    .fold(0.0, f64::max);
                self.check("averaged_drift_closed_form", worst <= 4.0, worst, 4.0);
            }
        }

        if !r.f().depends_on_fast() {
            let mut fbar = ClosedFormDrift::new(r)?;
            let s = &self.spec.sim;
            let avg = solve_averaged(&sys.x0, &sys.slow, r, &mut fbar, s.horizon, s.dt_slow)?;
            let mut ns = NoiseStream::new(self.seed(), 0, r.fast_basis().n_modes);
            let path = simulate_coupled(&sys.x0, &sys.y0, &sys.slow, r, &self.spec.sim_config(s.eps), &mut ns)?;
            let d = path.sup_distance(&avg.states)?;
            self.check("decoupled_pathwise", d == 0.0, d, 0.0);
        }

        let mut t = self.table(&["check", "passed", "value", "bound"]);
        for c in &self.out.checks {
            t.row(cells![c.name.as_str(), c.passed, c.value, c.bound]);
        }
        self.save(&t, "validate.csv")
    }

    fn fast<E: Executor>(&mut self, exec: &E) -> Result<(), RunError> {
        let sys = self.sys;
        let f = &self.spec.fast;
        let r = &sys.reaction;
        let ens = Ensemble::new(f.dt, self.spec.sim.replicas, self.seed());
        let prof = moment_profile(&sys.x0, &sys.y0, r, f.moment, f.horizon, f.record_every, &ens, exec)?;
        let env = MomentEnvelope::fit(&prof, r.dissipativity_gap(), sys.x0.norm(), sys.y0.norm());
        let mut t = self.table(&["t", "moment", "std_error", "envelope"]);
        t.meta("p", f.moment).meta("envelope_constant", env.constant);
        for (time, m) in prof.times.iter().zip(&prof.moments) {
            t.row(cells![*time, m.mean, m.std_error, env.bound(*time, sys.x0.norm(), sys.y0.norm())]);
        }
        self.save(&t, "fast_moments.csv")?;

        let z = sys.y0.sub(&Field::unit(r.fast_basis(), 1));
        let ns = NoiseStream::new(self.seed(), 0, r.fast_basis().n_modes);
        let fit = contraction_estimate(&sys.x0, &sys.y0, &z, r, f.horizon, f.dt, &ns)?;
        let mut t = self.table(&["t", "distance"]);
        t.meta("rate", fit.rate)
            .meta("margin", r.fast_spectrum().spectral_gap() - r.lipschitz_g());
        for (time, d) in fit.times.iter().zip(&fit.distances) {
            t.row(cells![*time, *d]);
        }
        self.save(&t, "fast_contraction.csv")?;
        self.out.line(format!("envelope constant {}, contraction rate {}", env.constant, fit.rate));
        Ok(())
    }

    fn invariant(&mut self) -> Result<(), RunError> {
        let m = self.sample_measure(&self.sys.x0)?;
        let cols = self.mode_columns("mode", self.r().fast_basis().n_modes);
        let mut t = self.table(&cols);
        t.meta("provenance", m.provenance.as_str())
            .meta("x_hash", field_hash(&m.x_frozen))
            .meta("ess", m.diagnostics.ess)
            .meta("burn_in_steps", m.diagnostics.burn_in_steps);
        if let (Some(a), Some(b)) = (m.diagnostics.acceptance_rate, m.diagnostics.beta) {
            t.meta("acceptance_rate", a).meta("beta", b);
        }
        for w in &m.diagnostics.warnings {
            t.meta("warning", w);
            self.out.line(format!("warning: {w}"));
        }
        for s in &m.samples {
            t.row(s.coeffs().iter().map(|c| (*c).into()).collect());
        }
        self.save(&t, "measure.csv")?;
        self.out.line(format!("{} samples, ESS {:.0}", m.len(), m.diagnostics.ess));
        Ok(())
    }

    fn coupled<E: Executor>(&mut self, exec: &E) -> Result<(), RunError> {
        let sys = self.sys;
        let cfg = self.spec.sim_config(self.spec.sim.eps);
        let paths = simulate_ensemble(&sys.x0, &sys.y0, &sys.slow, &sys.reaction, &cfg, exec)?;
        let mut cols = vec!["replica".to_string(), "t".into(), "u_norm".into(), "v_norm".into()];
        cols.extend(self.mode_columns("u", sys.slow.n_modes()));
        let mut t = self.table(&cols);
        t.meta("eps", cfg.eps);
        for p in &paths {
            for ((time, u), v) in p.times.iter().zip(&p.u_states).zip(&p.v_states) {
                let mut row = cells![p.replica_id, *time, u.norm(), v.norm()];
                row.extend(u.coeffs().iter().map(|c| (*c).into()));
                t.row(row);
            }
        }
        self.save(&t, "coupled.csv")?;
        self.out.line(format!("{} replicas at eps = {}", paths.len(), cfg.eps));
        Ok(())
    }

    fn average(&mut self) -> Result<(), RunError> {
        let avg = self.averaged()?;
        let mut cols = vec!["t".to_string(), "drift_std_error".into()];
        cols.extend(self.mode_columns("u", self.sys.slow.n_modes()));
        let mut t = self.table(&cols);
        t.meta("evaluations", avg.evaluations).meta("noise_floor", avg.noise_floor());
        for w in &avg.warnings {
            t.meta("warning", w);
            self.out.line(format!("warning: {w}"));
        }
        for (i, (time, u)) in avg.times.iter().zip(&avg.states).enumerate() {
            let se = if i == 0 { 0.0 } else { avg.drift_std_error[i - 1] };
            let mut row = cells![*time, se];
            row.extend(u.coeffs().iter().map(|c| (*c).into()));
            t.row(row);
        }
        self.save(&t, "average.csv")?;
        self.out.line(format!("{} F̄ evaluations, noise floor {:.3e}", avg.evaluations, avg.noise_floor()));
        Ok(())
    }

    fn converge<E: Executor>(&mut self, exec: &E) -> Result<(), RunError> {
        let sys = self.sys;
        let avg = self.averaged()?;
        let cfg = self.spec.sim_config(self.spec.sim.eps);
        let rows = convergence_study(&sys.x0, &sys.y0, &sys.slow, &sys.reaction, &self.spec.sim.eps_grid, &cfg, &avg, exec)?;
        let mut t = self.table(&[
            "eps",
            "replica_count",
            "mean_sup_error",
            "median_sup_error",
            "exceedance_prob",
            "ci_low",
            "ci_high",
            "seed",
            "config_hash",
        ]);
        t.meta("eta", cfg.eta).meta("noise_floor", avg.noise_floor());
        for row in &rows {
            t.row(cells![
                row.eps,
                row.replica_count,
                row.mean_sup_error,
                row.median_sup_error,
                row.exceedance_prob,
                row.ci_low,
                row.ci_high,
                row.seed,
                self.hash.as_str(),
            ]);
            self.out.line(format!(
                "eps {}: P(sup > {}) = {} [{:.4}, {:.4}]",
                row.eps, cfg.eta, row.exceedance_prob, row.ci_low, row.ci_high
            ));
        }
        self.save(&t, "convergence.csv")?;
        self.out.line(format!("nonincreasing within CI: {}", nonincreasing_within_ci(&rows)));
        Ok(())
    }

    fn remainder<E: Executor>(&mut self, exec: &E) -> Result<(), RunError> {
        let sys = self.sys;
        let mut t = self.table(&["eps", "replica_count", "sup_mean_abs", "std_error", "ci_low", "ci_high", "seed", "config_hash"]);
        let mut intervals = Vec::new();
        for &eps in &self.spec.sim.eps_grid {
            let cfg = self.spec.sim_config(eps);
            let paths = simulate_ensemble(&sys.x0, &sys.y0, &sys.slow, &sys.reaction, &cfg, exec)?;
            let summary = remainder_study(&paths, &sys.h, |i| self.drift_evaluator(i as u64).expect("checked"), exec)?;
            let (lo, hi) = summary.ci(Z95);
            intervals.push((lo, hi));
            t.row(cells![eps, summary.replicas, summary.sup.mean, summary.sup.std_error, lo, hi, cfg.seed, self.hash.as_str()]);
            self.out.line(format!("eps {eps}: sup E|R| = {:.4e} ± {:.1e}", summary.sup.mean, summary.sup.std_error));
        }
        self.save(&t, "remainder.csv")?;
        let separated = interval_trend(&intervals).iter().all(|t| *t == Trend::SeparatedDecrease);
        self.out.line(format!("strictly decreasing with separated intervals: {separated}"));
        Ok(())
    }
}
