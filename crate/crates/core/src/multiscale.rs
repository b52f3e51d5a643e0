//! Slow-fast coupled system and the averaged equation.
//!
//! ```text
//! du = (A u + F(u, v)) dt
//! dv = ε⁻¹ (B v + G(u, v)) dt + ε^{-1/2} dw
//! du = (A u + F̄(u)) dt
//! ```
//!
//! Both slow equations use exponential Euler on a common macro grid. The
//! linear `σ1`-part of `f` is folded into `A` and integrated exactly. Within
//! a macro step the fast component takes `⌈dt_slow / (ε dt_fast)⌉` micro
//! steps and the slow drift is the average of `F(u_n, v)` over them.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Warning};
use crate::exec::Executor;
use crate::fast::{Ensemble, FastStepper};
use crate::math::{exp, expm1, powf};
use crate::measure::{averaged_drift_replica, closed_form_averaged_drift, gaussian_mean, AveragedDrift, DriftEstimator};
use crate::noise::NoiseStream;
use crate::reaction::ReactionSystem;
use crate::spectral::{Field, OperatorSpectrum};
use crate::stats::{self, wilson_interval, Estimate};
use crate::Result;

/// Two-sided 95% normal quantile used for confidence intervals.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub eps: f64,
    pub horizon: f64,
    /// Macro step (slow time).
    pub dt_slow: f64,
    /// Largest micro step, in fast time units.
    pub dt_fast: f64,
    pub n_modes: usize,
    pub replicas: usize,
    pub seed: u64,
    pub eta: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            eps: 0.1,
            horizon: 1.0,
            dt_slow: 0.01,
            dt_fast: 0.01,
            n_modes: 8,
            replicas: 200,
            seed: 0,
            eta: 0.1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(name, "must be positive and finite"))
            }
        };
        positive("eps", self.eps)?;
        positive("horizon", self.horizon)?;
        positive("dt_slow", self.dt_slow)?;
        positive("dt_fast", self.dt_fast)?;
        positive("eta", self.eta)?;
        if self.n_modes == 0 {
            return Err(Error::invalid("n_modes", "must be positive"));
        }
        if self.dt_slow > self.horizon * (1.0 + 1e-12) {
            return Err(Error::invalid("dt_slow", "macro step exceeds the horizon"));
        }
        if self.dt_fast > self.dt_slow * (1.0 + 1e-12) || self.eps * self.dt_fast > self.dt_slow * (1.0 + 1e-12) {
            return Err(Error::invalid("dt_fast", "micro step must not exceed the macro step"));
        }
        Ok(())
    }

    pub fn macro_steps(&self) -> usize {
        libm::round(self.horizon / self.dt_slow).max(1.0) as usize
    }

    pub fn micro_steps(&self) -> usize {
        libm::ceil(self.dt_slow / (self.eps * self.dt_fast) * (1.0 - 1e-12)).max(1.0) as usize
    }

    /// Micro step in slow time.
    pub fn micro_dt(&self) -> f64 {
        self.dt_slow / self.micro_steps() as f64
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }
}

/// Exponential Euler for `du = ((A + κ) u + D) dt` with frozen `D`; the
/// shifted eigenvalues may have either sign.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowPropagator {
    decay: Vec<f64>,
    gain: Vec<f64>,
    shift: f64,
}

impl SlowPropagator {
    pub fn new(a: &OperatorSpectrum, shift: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid("dt", "must be positive"));
        }
        let (decay, gain) = a
            .eigenvalues()
            .iter()
            .map(|&alpha| {
                let z = (alpha - shift) * dt;
                let gain = if z.abs() < 1e-8 { dt * (1.0 - 0.5 * z) } else { -expm1(-z) / z * dt };
                (exp(-z), gain)
            })
            .unzip();
        Ok(Self { decay, gain, shift })
    }

    /// Linear `σ1`-coefficient of `f` absorbed into the operator.
    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// `u ← e^{dt(A+κ)} u + φ₁ D` where `D = drift − κ u`.
    pub fn step(&self, u: &mut [f64], drift: &[f64]) {
        for (((u, d), e), g) in u.iter_mut().zip(drift).zip(&self.decay).zip(&self.gain) {
            let residual = d - self.shift * *u;
            *u = e * *u + g * residual;
        }
    }
}

fn check_slow(rate_a: &OperatorSpectrum, r: &ReactionSystem) -> Result<()> {
    if rate_a.basis() != r.slow_basis() {
        return Err(Error::BasisMismatch("slow operator and reaction use different bases"));
    }
    Ok(())
}

/// One realisation of `(u^ε, v^ε)` on the macro grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPath {
    pub times: Vec<f64>,
    pub u_states: Vec<Field>,
    pub v_states: Vec<Field>,
    /// Average of `F(u_n, v)` over the micro steps of macro step `n`.
    pub drift_means: Vec<Field>,
    pub config: SimConfig,
    pub replica_id: u64,
}

impl CoupledPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `sup_n |u(t_n) − other(t_n)|_H` over a common grid.
    pub fn sup_distance(&self, other: &[Field]) -> Result<f64> {
        if other.len() != self.u_states.len() {
            return Err(Error::invalid("other", "paths live on different time grids"));
        }
        Ok(self
            .u_states
            .iter()
            .zip(other)
            .map(|(a, b)| a.distance(b))
            .fold(0.0, f64::max))
    }
}

/// Simulates the coupled system from `(x0, y0)`; the fast noise is drawn
/// from `ns`.
pub fn simulate_coupled(
    x0: &Field,
    y0: &Field,
    rate_a: &OperatorSpectrum,
    r: &ReactionSystem,
    cfg: &SimConfig,
    ns: &mut NoiseStream,
) -> Result<CoupledPath> {
    cfg.validate()?;
    check_slow(rate_a, r)?;
    if x0.basis() != r.slow_basis() || y0.basis() != r.fast_basis() {
        return Err(Error::BasisMismatch("initial data on the wrong basis"));
    }
    let n_macro = cfg.macro_steps();
    let n_micro = cfg.micro_steps();
    let h = cfg.micro_dt();
    if h / cfg.eps > r.max_fast_step() * (1.0 + 1e-12) {
        return Err(Error::invalid(
            "dt_fast",
            alloc::format!("micro step exceeds 0.1 / L_nonlinear = {} fast units", r.max_fast_step()),
        ));
    }
    let slow = SlowPropagator::new(rate_a, r.f().slow_linear_coefficient(), cfg.dt_slow)?;
    let mut stepper = FastStepper::new(r, x0, h, cfg.eps)?;
    let decoupled = !r.f().depends_on_fast();
    let zero_fast = Field::zeros(r.fast_basis());
    let mut ws = r.workspace();
    let n = r.slow_basis().n_modes;
    let mut buf = vec![0.0; n];

    let mut u = x0.clone();
    let mut v = y0.clone();
    let mut times = Vec::with_capacity(n_macro + 1);
    let mut u_states = Vec::with_capacity(n_macro + 1);
    let mut v_states = Vec::with_capacity(n_macro + 1);
    let mut drift_means = Vec::with_capacity(n_macro);
    times.push(0.0);
    u_states.push(u.clone());
    v_states.push(v.clone());
    for step in 0..n_macro {
        if step > 0 {
            stepper.set_slow(&u);
        }
        let drift = if decoupled {
            for _ in 0..n_micro {
                stepper.step(v.coeffs_mut(), Some(ns));
            }
            r.eval_f(&u, &zero_fast)?
        } else {
            r.synthesize_slow(&u, &mut ws.slow);
            let mut acc = vec![0.0; n];
            for _ in 0..n_micro {
                r.synthesize_fast_raw(v.coeffs(), &mut ws.fast);
                r.eval_f_nodal(&mut ws, &mut buf);
                for (a, b) in acc.iter_mut().zip(&buf) {
                    *a += b;
                }
                stepper.step(v.coeffs_mut(), Some(ns));
            }
            for a in &mut acc {
                *a /= n_micro as f64;
            }
            Field::new(r.slow_basis(), acc)?
        };
        slow.step(u.coeffs_mut(), drift.coeffs());
        drift_means.push(drift);
        times.push((step + 1) as f64 * cfg.dt_slow);
        u_states.push(u.clone());
        v_states.push(v.clone());
    }
    Ok(CoupledPath {
        times,
        u_states,
        v_states,
        drift_means,
        config: *cfg,
        replica_id: ns.replica_id(),
    })
}

/// `cfg.replicas` independent coupled paths; replica `i` uses stream `i` of
/// `cfg.seed`.
pub fn simulate_ensemble<E: Executor>(
    x0: &Field,
    y0: &Field,
    rate_a: &OperatorSpectrum,
    r: &ReactionSystem,
    cfg: &SimConfig,
    exec: &E,
) -> Result<Vec<CoupledPath>> {
    cfg.validate()?;
    let n = r.fast_basis().n_modes;
    exec.map_indexed(cfg.replicas, |i| {
        let mut ns = NoiseStream::new(cfg.seed, i as u64, n);
        simulate_coupled(x0, y0, rate_a, r, cfg, &mut ns)
    })
    .into_iter()
    .collect()
}

/// A-priori bound statistics for one `ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AprioriRow {
    pub eps: f64,
    /// `E sup_t |u^ε(t)|²_H`.
    pub sup_u_sq: Estimate,
    /// `sup_t E |v^ε(t)|²_H`, with the error of the maximising time.
    pub sup_v_sq: Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AprioriReport {
    pub rows: Vec<AprioriRow>,
    /// Slopes of the two statistics against `log10 ε`.
    pub slope_u: f64,
    pub slope_v: f64,
    /// No statistic at smaller `ε` exceeds one at larger `ε` by more than
    /// three joint standard errors.
    pub no_growth: bool,
}

/// Checks that the moment bounds do not grow as `ε` decreases; each group
/// holds the replicas of one `ε`.
pub fn apriori_bounds_check(groups: &[Vec<CoupledPath>]) -> Result<AprioriReport> {
    let mut rows = Vec::with_capacity(groups.len());
    for paths in groups {
        let first = paths
            .first()
            .ok_or_else(|| Error::invalid("groups", "empty replica group"))?;
        let (x0, y0, horizon) = (&first.u_states[0], &first.v_states[0], first.config.horizon);
        if paths
            .iter()
            .any(|p| p.config.eps != first.config.eps || p.len() != first.len())
        {
            return Err(Error::invalid("groups", "a group mixes configurations"));
        }
        let r0 = &groups[0][0];
        if &r0.u_states[0] != x0 || &r0.v_states[0] != y0 || r0.config.horizon != horizon {
            return Err(Error::invalid("groups", "groups differ in initial data or horizon"));
        }
        let sups: Vec<f64> = paths
            .iter()
            .map(|p| p.u_states.iter().map(Field::norm_sq).fold(0.0, f64::max))
            .collect();
        let mut best = Estimate::exact(f64::NEG_INFINITY);
        for t in 0..first.len() {
            let col: Vec<f64> = paths.iter().map(|p| p.v_states[t].norm_sq()).collect();
            let e = Estimate::of_independent(&col);
            if e.mean > best.mean {
                best = e;
            }
        }
        rows.push(AprioriRow {
            eps: first.config.eps,
            sup_u_sq: Estimate::of_independent(&sups),
            sup_v_sq: best,
        });
    }
    let logs: Vec<f64> = rows.iter().map(|r| libm::log10(r.eps)).collect();
    let slope = |f: &dyn Fn(&AprioriRow) -> f64| {
        let ys: Vec<f64> = rows.iter().map(f).collect();
        stats::linear_fit(&logs, &ys).map_or(0.0, |(_, b)| b)
    };
    let slope_u = slope(&|r| r.sup_u_sq.mean);
    let slope_v = slope(&|r| r.sup_v_sq.mean);
    let grows = |a: &Estimate, b: &Estimate| {
        let se = libm::sqrt(a.std_error * a.std_error + b.std_error * b.std_error);
        a.mean > b.mean + 3.0 * se
    };
    let mut no_growth = true;
    for i in 0..rows.len() {
        for j in 0..rows.len() {
            if rows[i].eps < rows[j].eps
                && (grows(&rows[i].sup_u_sq, &rows[j].sup_u_sq) || grows(&rows[i].sup_v_sq, &rows[j].sup_v_sq))
            {
                no_growth = false;
            }
        }
    }
    Ok(AprioriReport {
        rows,
        slope_u,
        slope_v,
        no_growth,
    })
}

/// Source of `F̄` values for the averaged equation and the remainder.
pub trait DriftEvaluator {
    fn evaluate(&mut self, x: &Field) -> Result<AveragedDrift>;

    /// Number of Monte Carlo estimates performed so far.
    fn evaluations(&self) -> usize {
        0
    }
}

impl<D: DriftEvaluator + ?Sized> DriftEvaluator for Box<D> {
    fn evaluate(&mut self, x: &Field) -> Result<AveragedDrift> {
        (**self).evaluate(x)
    }

    fn evaluations(&self) -> usize {
        (**self).evaluations()
    }
}

/// Exact `F̄` for systems with a Gaussian fast law.
#[derive(Debug, Clone, Copy)]
pub struct ClosedFormDrift<'a> {
    r: &'a ReactionSystem,
}

impl<'a> ClosedFormDrift<'a> {
    pub fn new(r: &'a ReactionSystem) -> Result<Self> {
        if r.f().depends_on_fast() {
            if !r.f().is_affine_in_fast() {
                return Err(Error::NoClosedForm("f is nonlinear in the fast variable"));
            }
            if !r.residual_is_fast_independent() {
                return Err(Error::NoClosedForm("fast law is not Gaussian"));
            }
        }
        Ok(Self { r })
    }
}

impl DriftEvaluator for ClosedFormDrift<'_> {
    fn evaluate(&mut self, x: &Field) -> Result<AveragedDrift> {
        closed_form_averaged_drift(self.r, x)
    }
}

/// Nested Monte Carlo `F̄`: every call samples `μ^x` afresh on its own stream.
#[derive(Debug, Clone)]
pub struct NestedDrift<'a> {
    r: &'a ReactionSystem,
    estimator: DriftEstimator,
    replica_base: u64,
    calls: usize,
}

impl<'a> NestedDrift<'a> {
    pub fn new(r: &'a ReactionSystem, estimator: DriftEstimator) -> Self {
        Self {
            r,
            estimator,
            replica_base: 0,
            calls: 0,
        }
    }

    /// Starts the per-call replica streams at `base`.
    pub fn with_replica_base(mut self, base: u64) -> Self {
        self.replica_base = base;
        self
    }
}

impl DriftEvaluator for NestedDrift<'_> {
    fn evaluate(&mut self, x: &Field) -> Result<AveragedDrift> {
        let replica = self.replica_base + self.calls as u64;
        self.calls += 1;
        averaged_drift_replica(x, self.r, &self.estimator, replica)
    }

    fn evaluations(&self) -> usize {
        self.calls
    }
}

/// Reuses the last `F̄` while `|u − u_cached|_H ≤ tol (1 + |u|_H)`.
#[derive(Debug, Clone)]
pub struct CachedDrift<E> {
    inner: E,
    tol: f64,
    cache: Option<AveragedDrift>,
    hits: usize,
}

impl<E: DriftEvaluator> CachedDrift<E> {
    pub fn new(inner: E) -> Self {
        Self::with_tolerance(inner, 0.01)
    }

    pub fn with_tolerance(inner: E, tol: f64) -> Self {
        Self {
            inner,
            tol,
            cache: None,
            hits: 0,
        }
    }

    pub fn hits(&self) -> usize {
        self.hits
    }
}

impl<E: DriftEvaluator> DriftEvaluator for CachedDrift<E> {
    fn evaluate(&mut self, x: &Field) -> Result<AveragedDrift> {
        if let Some(c) = &self.cache {
            if c.x.distance(x) <= self.tol * (1.0 + x.norm()) {
                self.hits += 1;
                return Ok(c.clone());
            }
        }
        let d = self.inner.evaluate(x)?;
        self.cache = Some(d.clone());
        Ok(d)
    }

    fn evaluations(&self) -> usize {
        self.inner.evaluations()
    }
}

/// Solution of the averaged equation on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedPath {
    pub times: Vec<f64>,
    pub states: Vec<Field>,
    /// `(Σ_k se_k²)^{1/2}` of the `F̄` used at each step.
    pub drift_std_error: Vec<f64>,
    pub dt: f64,
    pub evaluations: usize,
    pub warnings: Vec<Warning>,
}

impl AveragedPath {
    /// `Σ_n dt · se_n`, a bound on the `H`-error the `F̄` noise can cause
    /// when `A` is dissipative.
    pub fn noise_floor(&self) -> f64 {
        self.drift_std_error.iter().map(|s| s * self.dt).sum()
    }

    pub fn last(&self) -> &Field {
        self.states.last().expect("nonempty path")
    }
}

/// Exponential Euler for `du = (A u + F̄(u)) dt`.
pub fn solve_averaged<D: DriftEvaluator>(
    x0: &Field,
    rate_a: &OperatorSpectrum,
    r: &ReactionSystem,
    fbar: &mut D,
    horizon: f64,
    dt: f64,
) -> Result<AveragedPath> {
    check_slow(rate_a, r)?;
    if x0.basis() != r.slow_basis() {
        return Err(Error::BasisMismatch("initial data on the wrong basis"));
    }
    if !(horizon > 0.0 && dt > 0.0 && dt <= horizon * (1.0 + 1e-12)) {
        return Err(Error::invalid("dt", "need 0 < dt ≤ horizon"));
    }
    let n_steps = libm::round(horizon / dt).max(1.0) as usize;
    let slow = SlowPropagator::new(rate_a, r.f().slow_linear_coefficient(), dt)?;
    let mut u = x0.clone();
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut se = Vec::with_capacity(n_steps);
    let mut warnings = Vec::new();
    times.push(0.0);
    states.push(u.clone());
    for step in 0..n_steps {
        let d = fbar.evaluate(&u)?;
        let err = d.error_norm();
        let size = d.value.norm();
        if err > 0.1 * size && !warnings.iter().any(|w| matches!(w, Warning::DriftBudgetExhausted { .. })) {
            warnings.push(Warning::DriftBudgetExhausted {
                relative_error: if size > 0.0 { err / size } else { f64::INFINITY },
                step,
            });
        }
        se.push(err);
        slow.step(u.coeffs_mut(), d.value.coeffs());
        times.push((step + 1) as f64 * dt);
        states.push(u.clone());
    }
    Ok(AveragedPath {
        times,
        states,
        drift_std_error: se,
        dt,
        evaluations: fbar.evaluations(),
        warnings,
    })
}

/// `R^ε_h(t_n) = Σ_{m<n} dt ⟨D_m − F̄(u_m), h⟩_H` along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct RemainderSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl RemainderSeries {
    pub fn sup_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

pub fn remainder_diagnostic<D: DriftEvaluator>(
    path: &CoupledPath,
    h: &Field,
    fbar: &mut D,
) -> Result<RemainderSeries> {
    let dt = path.config.dt_slow;
    let mut values = Vec::with_capacity(path.len());
    let mut acc = 0.0;
    values.push(0.0);
    let zero = h.norm_sq() == 0.0;
    for (u, d) in path.u_states.iter().zip(&path.drift_means) {
        if !zero {
            let fb = fbar.evaluate(u)?;
            acc += dt * (d.dot(h) - fb.value.dot(h));
        }
        values.push(acc);
    }
    Ok(RemainderSeries {
        times: path.times.clone(),
        values,
    })
}

/// `sup_t E|R^ε_h(t)|` across the replicas of one `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct RemainderSummary {
    pub eps: f64,
    pub replicas: usize,
    /// `E|R^ε_h(t_n)|` per macro time.
    pub mean_abs: Vec<Estimate>,
    /// The maximum over `t` of `mean_abs`, with the error of its time.
    pub sup: Estimate,
}

impl RemainderSummary {
    pub fn ci(&self, z: f64) -> (f64, f64) {
        (self.sup.mean - z * self.sup.std_error, self.sup.mean + z * self.sup.std_error)
    }
}

/// Evaluates the remainder on every path with a fresh evaluator per path.
pub fn remainder_study<E, D, M>(paths: &[CoupledPath], h: &Field, make: M, exec: &E) -> Result<RemainderSummary>
where
    E: Executor,
    D: DriftEvaluator,
    M: Fn(usize) -> D + Sync + Send,
{
    let first = paths.first().ok_or_else(|| Error::invalid("paths", "no paths"))?;
    let series: Vec<RemainderSeries> = exec
        .map_indexed(paths.len(), |i| {
            let mut fbar = make(i);
            remainder_diagnostic(&paths[i], h, &mut fbar)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let n_t = first.len();
    if series.iter().any(|s| s.values.len() != n_t) {
        return Err(Error::invalid("paths", "paths live on different time grids"));
    }
    let mean_abs: Vec<Estimate> = (0..n_t)
        .map(|t| {
            let col: Vec<f64> = series.iter().map(|s| s.values[t].abs()).collect();
            Estimate::of_independent(&col)
        })
        .collect();
    let sup = mean_abs
        .iter()
        .copied()
        .fold(Estimate::exact(0.0), |a, b| if b.mean > a.mean { b } else { a });
    Ok(RemainderSummary {
        eps: first.config.eps,
        replicas: paths.len(),
        mean_abs,
        sup,
    })
}

/// Monte Carlo estimate of the correction function `Φ^ε_h(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionEstimate {
    pub value: Estimate,
    /// Bound on the neglected tail `∫_{T_cut}^∞`.
    pub truncation_bound: f64,
    pub warnings: Vec<Warning>,
}

/// `Φ^ε_h(x, y) = ∫_0^∞ e^{−ct} P^x_t[⟨F(x, ·), h⟩ − ⟨F̄(x), h⟩](y) dt`,
/// truncated at `t_cut` and integrated by the trapezoidal rule along
/// `ens.replicas` fast trajectories. `fbar_h` is `⟨F̄(x), h⟩`.
#[allow(clippy::too_many_arguments)]
pub fn correction_estimate<E: Executor>(
    x: &Field,
    y: &Field,
    h: &Field,
    c_eps: f64,
    fbar_h: f64,
    r: &ReactionSystem,
    t_cut: f64,
    ens: &Ensemble,
    exec: &E,
) -> Result<CorrectionEstimate> {
    if !(c_eps > 0.0) {
        return Err(Error::invalid("c_eps", "must be positive"));
    }
    if !(t_cut > 0.0 && ens.dt > 0.0) {
        return Err(Error::invalid("t_cut", "must be positive"));
    }
    if h.basis() != r.slow_basis() {
        return Err(Error::BasisMismatch("h must live on the slow basis"));
    }
    if ens.replicas < 2 {
        return Err(Error::invalid("replicas", "need at least two replicas"));
    }
    let n_steps = libm::round(t_cut / ens.dt).max(1.0) as usize;
    let dt = ens.dt;
    let value = if !r.f().depends_on_fast() || h.norm_sq() == 0.0 {
        Estimate::exact(0.0)
    } else {
        if dt > r.max_fast_step() * (1.0 + 1e-12) {
            return Err(Error::invalid("dt", "fast step exceeds 0.1 / L_nonlinear"));
        }
        let template = FastStepper::new(r, x, dt, 1.0)?;
        let m = r.grid().n_nodes;
        let mut hn = vec![0.0; m];
        r.synthesize_slow(h, &mut hn);
        let n = r.fast_basis().n_modes;
        let per: Vec<f64> = exec.map_indexed(ens.replicas, |i| {
            let mut stepper = template.clone();
            let mut ns = NoiseStream::new(ens.seed, ens.replica_offset + i as u64, n);
            let mut ws = r.workspace();
            r.synthesize_slow(x, &mut ws.slow);
            let mut v = y.clone();
            let integrand = |v: &Field, ws: &mut crate::reaction::Workspace| {
                r.synthesize_fast(v, &mut ws.fast);
                r.pair_f_nodal(ws, &hn, h) - fbar_h
            };
            let mut sum = 0.5 * integrand(&v, &mut ws);
            for s in 1..=n_steps {
                stepper.step(v.coeffs_mut(), Some(&mut ns));
                let w = exp(-c_eps * s as f64 * dt);
                let f = integrand(&v, &mut ws);
                sum += if s == n_steps { 0.5 * w * f } else { w * f };
            }
            sum * dt
        });
        Estimate::of_independent(&per)
    };
    let delta = r.dissipativity_gap();
    let scale = 2.0 * r.lipschitz_f() * h.norm() * (1.0 + x.norm() + y.norm());
    let truncation_bound = if value.std_error == 0.0 && value.mean == 0.0 {
        0.0
    } else {
        scale * exp(-(c_eps + delta) * t_cut) / (c_eps + delta)
    };
    let mut warnings = Vec::new();
    if truncation_bound > value.std_error {
        warnings.push(Warning::TruncationDominated {
            truncation: truncation_bound,
            std_error: value.std_error,
        });
    }
    Ok(CorrectionEstimate {
        value,
        truncation_bound,
        warnings,
    })
}

/// Closed-form `Φ^ε_h(x, y) = a Σ_k h_k (y_k − m_k) / (c + α_k − κ)` for `f`
/// affine in `σ2` with slope `a` and a Gaussian fast law with mean `m`.
pub fn gaussian_correction(r: &ReactionSystem, x: &Field, y: &Field, h: &Field, c_eps: f64) -> Result<f64> {
    if r.slow_basis() != r.fast_basis() {
        return Err(Error::NoClosedForm("slow and fast bases differ"));
    }
    if !r.f().is_affine_in_fast() {
        return Err(Error::NoClosedForm("f is nonlinear in the fast variable"));
    }
    let a = r.f().fast_linear_coefficient();
    if a == 0.0 {
        return Ok(0.0);
    }
    let m = gaussian_mean(r, x)?;
    Ok(a * h
        .coeffs()
        .iter()
        .zip(y.coeffs())
        .zip(m.coeffs())
        .zip(r.fast_operator().eigenvalues())
        .map(|(((hk, yk), mk), ak)| hk * (yk - mk) / (c_eps + ak))
        .sum::<f64>())
}

/// Smallest `c` with `|Φ| ≤ (c/δ)(1 + |x| + |y|)|h|` over `(Φ, |x|, |y|, |h|)`.
pub fn fit_correction_constant(rows: &[(f64, f64, f64, f64)], delta: f64) -> f64 {
    rows.iter()
        .map(|&(phi, x, y, h)| phi.abs() * delta / ((1.0 + x + y) * h))
        .fold(0.0, f64::max)
}

/// One row of the convergence table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub replica_count: usize,
    pub mean_sup_error: f64,
    pub median_sup_error: f64,
    pub exceedance_prob: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub seed: u64,
}

/// `sup_n |u^ε(t_n) − ū(t_n)|_H` per replica for each `ε` in the grid, with
/// Wilson intervals for `P(sup > η)`.
#[allow(clippy::too_many_arguments)]
pub fn convergence_study<E: Executor>(
    x0: &Field,
    y0: &Field,
    rate_a: &OperatorSpectrum,
    r: &ReactionSystem,
    eps_grid: &[f64],
    cfg: &SimConfig,
    averaged: &AveragedPath,
    exec: &E,
) -> Result<Vec<ConvergenceRow>> {
    if eps_grid.is_empty() || eps_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("eps_grid", "must be nonempty and strictly decreasing"));
    }
    if averaged.states.len() != cfg.macro_steps() + 1 || (averaged.dt - cfg.dt_slow).abs() > 1e-12 * cfg.dt_slow {
        return Err(Error::invalid("averaged", "averaged path is not on the macro grid"));
    }
    if cfg.replicas == 0 {
        return Err(Error::invalid("replicas", "must be positive"));
    }
    let mut rows = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let c = cfg.with_eps(eps);
        c.validate()?;
        let n = r.fast_basis().n_modes;
        let errs: Vec<f64> = exec
            .map_indexed(c.replicas, |i| {
                let mut ns = NoiseStream::new(c.seed, i as u64, n);
                simulate_coupled(x0, y0, rate_a, r, &c, &mut ns)?.sup_distance(&averaged.states)
            })
            .into_iter()
            .collect::<Result<_>>()?;
        let hits = errs.iter().filter(|&&e| e > c.eta).count();
        let (lo, hi) = wilson_interval(hits, errs.len(), Z95);
        rows.push(ConvergenceRow {
            eps,
            replica_count: errs.len(),
            mean_sup_error: stats::mean(&errs),
            median_sup_error: stats::median(&errs),
            exceedance_prob: hits as f64 / errs.len() as f64,
            ci_low: lo,
            ci_high: hi,
            seed: c.seed,
        });
    }
    Ok(rows)
}

/// Comparison of two consecutive rows of an `ε`-grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trend {
    /// Smaller `ε` is lower and the intervals are disjoint.
    SeparatedDecrease,
    Overlap,
    /// Smaller `ε` is higher and the intervals are disjoint.
    SeparatedIncrease,
}

/// Classifies consecutive pairs of `[lo, hi]` intervals ordered by
/// decreasing `ε`.
pub fn interval_trend(intervals: &[(f64, f64)]) -> Vec<Trend> {
    intervals
        .windows(2)
        .map(|w| {
            let ((lo0, hi0), (lo1, hi1)) = (w[0], w[1]);
            if hi1 < lo0 {
                Trend::SeparatedDecrease
            } else if lo1 > hi0 {
                Trend::SeparatedIncrease
            } else {
                Trend::Overlap
            }
        })
        .collect()
}

/// Nonincreasing within CI overlap: no consecutive pair separates upward.
pub fn nonincreasing_within_ci(rows: &[ConvergenceRow]) -> bool {
    let iv: Vec<(f64, f64)> = rows.iter().map(|r| (r.ci_low, r.ci_high)).collect();
    !interval_trend(&iv).contains(&Trend::SeparatedIncrease)
}

/// `|u(t)|_H ≤ e^{ct}(|x0|_H + c ∫_0^t (1 + |v(s)|_H) ds)`: smallest `c` on a
/// grid of candidates making the envelope hold along `path`.
pub fn energy_envelope_constant(path: &CoupledPath) -> f64 {
    let holds = |c: f64| {
        let mut integral = 0.0;
        let x0 = path.u_states[0].norm();
        for i in 0..path.len() {
            if i > 0 {
                let dt = path.times[i] - path.times[i - 1];
                integral += dt * (1.0 + path.v_states[i - 1].norm());
            }
            if path.u_states[i].norm() > exp(c * path.times[i]) * (x0 + c * integral) * (1.0 + 1e-12) {
                return false;
            }
        }
        true
    };
    let mut c = 1e-3;
    while !holds(c) && c < 1e6 {
        c *= powf(2.0, 0.25);
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Sequential;
    use crate::math::PI;
    use crate::reaction::make_reaction;
    use crate::spectral::BoundaryCondition;

    fn setup(f: &str, g: &str) -> (OperatorSpectrum, ReactionSystem) {
        let s = OperatorSpectrum::build(PI, BoundaryCondition::Dirichlet, 6).unwrap();
        let r = make_reaction(f.parse().unwrap(), g.parse().unwrap(), &s).unwrap();
        (s, r)
    }

    fn cfg(eps: f64) -> SimConfig {
        SimConfig {
            eps,
            horizon: 0.5,
            dt_slow: 0.05,
            dt_fast: 0.05,
            n_modes: 6,
            replicas: 4,
            seed: 9,
            eta: 0.1,
        }
    }

    #[test]
    fn config_rules() {
        assert!(cfg(0.1).validate().is_ok());
        assert!(SimConfig { dt_fast: 0.1, ..cfg(0.1) }.validate().is_err());
        assert!(SimConfig { eps: 0.0, ..cfg(0.1) }.validate().is_err());
        assert_eq!(cfg(0.1).micro_steps(), 10);
        assert_eq!(cfg(1.0).micro_steps(), 1);
    }

    #[test]
    fn zero_slow_reaction_is_the_semigroup() {
        let (s, r) = setup("zero", "linear_damped(a=0.5) + fast_tanh(a=0.2)");
        let x0 = Field::from_leading(s.basis(), &[1.0, -0.5, 0.25]);
        let y0 = Field::from_leading(s.basis(), &[0.3]);
        let mut ns = NoiseStream::new(1, 0, 6);
        let p = simulate_coupled(&x0, &y0, &s, &r, &cfg(0.1), &mut ns).unwrap();
        for (t, u) in p.times.iter().zip(&p.u_states) {
            let exact = s.apply_semigroup(&x0, *t).unwrap();
            assert!(u.distance(&exact) < 1e-14);
        }
        assert_eq!(p.u_states[0], x0);
        assert_eq!(p.v_states[0], y0);
    }

    #[test]
    fn slow_linear_drift_is_exact() {
        let (s, r) = setup("linear(slow=1)", "linear_damped(a=0.5)");
        let x0 = Field::from_leading(s.basis(), &[1.0, 0.5]);
        let mut fbar = ClosedFormDrift::new(&r).unwrap();
        let p = solve_averaged(&x0, &s, &r, &mut fbar, 1.0, 0.1).unwrap();
        let u = p.last();
        for k in 1..=6 {
            let expect = exp((1.0 - s.eigenvalue(k)) * 1.0) * x0.coeffs()[k - 1];
            assert!((u.coeffs()[k - 1] - expect).abs() < 1e-13, "mode {k}");
        }
    }

    #[test]
    fn decoupled_path_matches_averaged_bitwise() {
        let (s, r) = setup("slow_tanh(a=0.5) + constant(c=0.2)", "linear_damped(a=0.5) + sum_tanh(a=0.3)");
        let x0 = Field::from_leading(s.basis(), &[0.4, 0.1]);
        let y0 = Field::zeros(s.basis());
        let mut fbar = ClosedFormDrift::new(&r).unwrap();
        let ubar = solve_averaged(&x0, &s, &r, &mut fbar, 0.5, 0.05).unwrap();
        for eps in [1.0, 0.1, 0.01] {
            let mut ns = NoiseStream::new(3, 0, 6);
            let c = SimConfig { dt_fast: 0.05, ..cfg(eps) };
            let p = simulate_coupled(&x0, &y0, &s, &r, &c, &mut ns).unwrap();
            assert_eq!(p.u_states, ubar.states);
        }
    }

    #[test]
    fn remainder_vanishes_for_zero_direction() {
        let (s, r) = setup("linear(fast=1)", "linear_damped(a=0.5)");
        let x0 = Field::zeros(s.basis());
        let mut ns = NoiseStream::new(3, 0, 6);
        let p = simulate_coupled(&x0, &x0, &s, &r, &cfg(0.1), &mut ns).unwrap();
        let mut fbar = ClosedFormDrift::new(&r).unwrap();
        let rem = remainder_diagnostic(&p, &Field::zeros(s.basis()), &mut fbar).unwrap();
        assert!(rem.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cache_reuses_nearby_states() {
        let (s, r) = setup("linear(fast=1)", "linear_damped(a=0.5) + constant(c=1)");
        let mut c = CachedDrift::new(ClosedFormDrift::new(&r).unwrap());
        let x = Field::from_leading(s.basis(), &[0.5]);
        c.evaluate(&x).unwrap();
        c.evaluate(&Field::from_leading(s.basis(), &[0.505])).unwrap();
        assert_eq!(c.hits(), 1);
        c.evaluate(&Field::from_leading(s.basis(), &[0.6])).unwrap();
        assert_eq!(c.hits(), 1);
    }

    #[test]
    fn trend_classification() {
        let t = interval_trend(&[(0.5, 0.6), (0.2, 0.3), (0.25, 0.35), (0.5, 0.6)]);
        assert_eq!(t, vec![Trend::SeparatedDecrease, Trend::Overlap, Trend::SeparatedIncrease]);
    }

    #[test]
    fn convergence_rejects_unsorted_grid() {
        let (s, r) = setup("linear(slow=1)", "linear_damped(a=0.5)");
        let x0 = Field::zeros(s.basis());
        let mut fbar = ClosedFormDrift::new(&r).unwrap();
        let c = cfg(0.1);
        let ubar = solve_averaged(&x0, &s, &r, &mut fbar, c.horizon, c.dt_slow).unwrap();
        let e = convergence_study(&x0, &x0, &s, &r, &[0.1, 1.0], &c, &ubar, &Sequential);
        assert!(e.is_err());
    }
}
