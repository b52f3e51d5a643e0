//! The fast equation with frozen slow component,
//! `dv = (B v + G(x, v)) dt + dw`, `v(0) = y`.
//!
//! The part `(B + κ) v` of the drift, with `κ` the linear `σ2`-coefficient of
//! `g`, is propagated exactly together with the noise; the nonlinear
//! remainder is frozen over each step (exponential Euler).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::exec::Executor;
use crate::math::{exp, ln, powf};
use crate::noise::{NoiseStream, OuPropagator};
use crate::reaction::{ReactionSystem, Workspace};
use crate::spectral::Field;
use crate::stats::{self, Estimate};
use crate::Result;

/// Steps the fast component for a frozen slow state.
#[derive(Debug, Clone)]
pub struct FastStepper<'a> {
    r: &'a ReactionSystem,
    prop: OuPropagator,
    ws: Workspace,
    drift: Vec<f64>,
    z: Vec<f64>,
    frozen_drift: bool,
}

impl<'a> FastStepper<'a> {
    /// Step of length `h` in the time units of `dv = ε⁻¹(…)dt + ε^{-1/2}dw`.
    pub fn new(r: &'a ReactionSystem, x: &Field, h: f64, eps: f64) -> Result<Self> {
        if x.basis() != r.slow_basis() {
            return Err(Error::BasisMismatch("frozen slow state not on the slow basis"));
        }
        let prop = OuPropagator::new(r.fast_operator(), h, eps)?;
        let n = r.fast_basis().n_modes;
        let mut s = Self {
            r,
            prop,
            ws: r.workspace(),
            drift: vec![0.0; n],
            z: vec![0.0; n],
            frozen_drift: r.residual_is_fast_independent(),
        };
        s.set_slow(x);
        Ok(s)
    }

    /// Re-freezes the slow component.
    pub fn set_slow(&mut self, x: &Field) {
        self.r.synthesize_slow(x, &mut self.ws.slow);
        if self.frozen_drift {
            let zero = vec![0.0; self.drift.len()];
            self.r.eval_g_residual(&mut self.ws, &zero, &mut self.drift);
        }
    }

    /// Advances `v` (fast coefficients) by one step; `None` switches the
    /// noise off.
    pub fn step(&mut self, v: &mut [f64], ns: Option<&mut NoiseStream>) {
        if !self.frozen_drift {
            self.r.eval_g_residual(&mut self.ws, v, &mut self.drift);
        }
        match ns {
            Some(ns) => self.prop.step(v, &self.drift, ns, &mut self.z),
            None => self.prop.step_with(v, &self.drift, None),
        }
    }

    pub fn reaction(&self) -> &ReactionSystem {
        self.r
    }
}

fn check_fast_step(r: &ReactionSystem, dt: f64) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", "step must be positive"));
    }
    let max = r.max_fast_step();
    if dt > max * (1.0 + 1e-12) {
        return Err(Error::invalid(
            "dt",
            alloc::format!("fast step {dt} exceeds 0.1 / L_nonlinear = {max}"),
        ));
    }
    Ok(())
}

fn n_steps(horizon: f64, dt: f64) -> usize {
    libm::round(horizon / dt).max(1.0) as usize
}

/// Recorded path of the fast equation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub times: Vec<f64>,
    pub states: Vec<Field>,
    pub seed: Option<u64>,
    pub replica_id: Option<u64>,
}

/// Simulates `v^{x, y0}` on `[0, horizon]` with step `dt`; `ns = None`
/// switches the noise off.
pub fn simulate_fast(
    x: &Field,
    y0: &Field,
    r: &ReactionSystem,
    horizon: f64,
    dt: f64,
    mut ns: Option<&mut NoiseStream>,
) -> Result<TrajectorySample> {
    check_fast_step(r, dt)?;
    if y0.basis() != r.fast_basis() {
        return Err(Error::BasisMismatch("initial datum not on the fast basis"));
    }
    let mut stepper = FastStepper::new(r, x, dt, 1.0)?;
    let steps = n_steps(horizon, dt);
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let (seed, replica_id) = match ns.as_deref() {
        Some(s) => (Some(s.seed()), Some(s.replica_id())),
        None => (None, None),
    };
    let mut v = y0.clone();
    times.push(0.0);
    states.push(v.clone());
    for s in 1..=steps {
        stepper.step(v.coeffs_mut(), ns.as_deref_mut());
        times.push(s as f64 * dt);
        states.push(v.clone());
    }
    Ok(TrajectorySample {
        times,
        states,
        seed,
        replica_id,
    })
}

/// Log-linear fit of the synchronous-coupling distance.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionFit {
    /// Fitted decay rate `ρ` in `|v^{x,y}(t) − v^{x,z}(t)| ≈ C e^{−ρt}`.
    pub rate: f64,
    pub times: Vec<f64>,
    pub distances: Vec<f64>,
}

/// Drives `v^{x,y}` and `v^{x,z}` with the same noise and fits the decay of
/// their distance on `[0.2 T, 0.8 T]`.
pub fn contraction_estimate(
    x: &Field,
    y: &Field,
    z: &Field,
    r: &ReactionSystem,
    horizon: f64,
    dt: f64,
    ns: &NoiseStream,
) -> Result<ContractionFit> {
    check_fast_step(r, dt)?;
    let d0 = y.distance(z);
    if !(d0 > 0.0) {
        return Err(Error::DegenerateFit("initial data coincide; decay rate undefined"));
    }
    let mut sa = FastStepper::new(r, x, dt, 1.0)?;
    let mut sb = sa.clone();
    let mut na = ns.clone();
    let mut nb = ns.clone();
    let mut a = y.clone();
    let mut b = z.clone();
    let steps = n_steps(horizon, dt);
    let mut times = vec![0.0];
    let mut distances = vec![d0];
    for s in 1..=steps {
        sa.step(a.coeffs_mut(), Some(&mut na));
        sb.step(b.coeffs_mut(), Some(&mut nb));
        let t = s as f64 * dt;
        let d = a.distance(&b);
        if d <= 1e-13 * d0 && t <= 0.8 * horizon {
            return Err(Error::DegenerateFit(
                "trajectories coincide to round-off before the fit window ends; shorten T",
            ));
        }
        times.push(t);
        distances.push(d);
    }
    let (ts, logs): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&distances)
        .filter(|(t, _)| **t >= 0.2 * horizon && **t <= 0.8 * horizon)
        .map(|(t, d)| (*t, ln(*d)))
        .unzip();
    let (_, slope) =
        stats::linear_fit(&ts, &logs).ok_or(Error::DegenerateFit("fit window holds < 2 points"))?;
    Ok(ContractionFit {
        rate: -slope,
        times,
        distances,
    })
}

/// `sup_t |v^{x1,y}(t) − v^{x2,y}(t)|_H / |x1 − x2|_H` under common noise.
pub fn slow_sensitivity(
    x1: &Field,
    x2: &Field,
    y: &Field,
    r: &ReactionSystem,
    horizon: f64,
    dt: f64,
    ns: &NoiseStream,
) -> Result<f64> {
    check_fast_step(r, dt)?;
    let dx = x1.distance(x2);
    if !(dx > 0.0) {
        return Err(Error::invalid("x2", "slow states must differ"));
    }
    let mut sa = FastStepper::new(r, x1, dt, 1.0)?;
    let mut sb = FastStepper::new(r, x2, dt, 1.0)?;
    let (mut na, mut nb) = (ns.clone(), ns.clone());
    let (mut a, mut b) = (y.clone(), y.clone());
    let mut sup: f64 = 0.0;
    for _ in 0..n_steps(horizon, dt) {
        sa.step(a.coeffs_mut(), Some(&mut na));
        sb.step(b.coeffs_mut(), Some(&mut nb));
        sup = sup.max(a.distance(&b));
    }
    Ok(sup / dx)
}

/// Monte Carlo settings shared by ensemble estimators of the fast equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ensemble {
    pub dt: f64,
    pub replicas: usize,
    pub seed: u64,
    /// Offset added to replica indices, so that several ensembles can share
    /// a seed without sharing streams.
    pub replica_offset: u64,
}

impl Ensemble {
    pub fn new(dt: f64, replicas: usize, seed: u64) -> Self {
        Self {
            dt,
            replicas,
            seed,
            replica_offset: 0,
        }
    }
}

/// Runs `replicas` fast trajectories from `y` and evaluates `obs` at each of
/// `record_steps` (sorted step indices); returns per-record estimates.
pub fn ensemble_observable<E, O>(
    x: &Field,
    y: &Field,
    r: &ReactionSystem,
    record_steps: &[usize],
    ens: &Ensemble,
    exec: &E,
    obs: O,
) -> Result<Vec<Estimate>>
where
    E: Executor,
    O: Fn(&Field) -> f64 + Sync + Send,
{
    check_fast_step(r, ens.dt)?;
    if ens.replicas < 2 {
        return Err(Error::invalid("replicas", "need at least two replicas"));
    }
    let template = FastStepper::new(r, x, ens.dt, 1.0)?;
    let n = r.fast_basis().n_modes;
    let last = record_steps.last().copied().unwrap_or(0);
    let per_replica: Vec<Vec<f64>> = exec.map_indexed(ens.replicas, |i| {
        let mut stepper = template.clone();
        let mut ns = NoiseStream::new(ens.seed, ens.replica_offset + i as u64, n);
        let mut v = y.clone();
        let mut out = Vec::with_capacity(record_steps.len());
        let mut next = 0;
        for s in 0..=last {
            if s > 0 {
                stepper.step(v.coeffs_mut(), Some(&mut ns));
            }
            while next < record_steps.len() && record_steps[next] == s {
                out.push(obs(&v));
                next += 1;
            }
        }
        out
    });
    Ok((0..record_steps.len())
        .map(|j| {
            let col: Vec<f64> = per_replica.iter().map(|row| row[j]).collect();
            Estimate::of_independent(&col)
        })
        .collect())
}

/// `E|v^{x,y0}(t)|_H^p` on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentProfile {
    pub p: f64,
    pub times: Vec<f64>,
    pub moments: Vec<Estimate>,
}

/// Moment curve recorded every `record_every` steps up to `horizon`.
#[allow(clippy::too_many_arguments)]
pub fn moment_profile<E: Executor>(
    x: &Field,
    y0: &Field,
    r: &ReactionSystem,
    p: f64,
    horizon: f64,
    record_every: usize,
    ens: &Ensemble,
    exec: &E,
) -> Result<MomentProfile> {
    if ![1.0, 2.0, 4.0].contains(&p) {
        return Err(Error::invalid("p", "moment order must be 1, 2 or 4"));
    }
    let steps = n_steps(horizon, ens.dt);
    let every = record_every.max(1);
    let record: Vec<usize> = (0..=steps).step_by(every).collect();
    let moments = ensemble_observable(x, y0, r, &record, ens, exec, |v| powf(v.norm(), p))?;
    Ok(MomentProfile {
        p,
        times: record.iter().map(|&s| s as f64 * ens.dt).collect(),
        moments,
    })
}

/// `c_p (e^{−δpt}|y|^p + |x|^p + 1)` envelope for fast-equation moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEnvelope {
    pub p: f64,
    pub delta: f64,
    pub constant: f64,
}

impl MomentEnvelope {
    pub fn shape(p: f64, delta: f64, t: f64, x_norm: f64, y_norm: f64) -> f64 {
        exp(-delta * p * t) * powf(y_norm, p) + powf(x_norm, p) + 1.0
    }

    /// Smallest constant dominating `profile`.
    pub fn fit(profile: &MomentProfile, delta: f64, x_norm: f64, y_norm: f64) -> Self {
        let constant = profile
            .times
            .iter()
            .zip(&profile.moments)
            .map(|(&t, m)| m.mean / Self::shape(profile.p, delta, t, x_norm, y_norm))
            .fold(0.0, f64::max);
        Self {
            p: profile.p,
            delta,
            constant,
        }
    }

    pub fn bound(&self, t: f64, x_norm: f64, y_norm: f64) -> f64 {
        self.constant * Self::shape(self.p, self.delta, t, x_norm, y_norm)
    }

    /// Largest ratio `moment / bound` over the profile.
    pub fn worst_ratio(&self, profile: &MomentProfile, x_norm: f64, y_norm: f64) -> f64 {
        profile
            .times
            .iter()
            .zip(&profile.moments)
            .map(|(&t, m)| m.mean / self.bound(t, x_norm, y_norm))
            .fold(0.0, f64::max)
    }
}

/// Lipschitz functionals on the fast space with certified constants.
#[derive(Debug, Clone, PartialEq)]
pub enum Functional {
    /// `⟨·, h⟩_H`.
    Linear(Field),
    /// `|·|_H`.
    Norm,
    /// `clamp(⟨·, h⟩_H, −bound, bound)`.
    Clipped { h: Field, bound: f64 },
}

impl Functional {
    pub fn eval(&self, y: &Field) -> f64 {
        match self {
            Functional::Linear(h) => y.dot(h),
            Functional::Norm => y.norm(),
            Functional::Clipped { h, bound } => y.dot(h).clamp(-bound, *bound),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            Functional::Linear(h) | Functional::Clipped { h, .. } => h.norm(),
            Functional::Norm => 1.0,
        }
    }
}

/// Monte Carlo estimate of `P^x_t φ(y) = E φ(v^{x,y}(t))`.
pub fn semigroup_expectation<E: Executor>(
    phi: &Functional,
    x: &Field,
    y: &Field,
    r: &ReactionSystem,
    t: f64,
    ens: &Ensemble,
    exec: &E,
) -> Result<Estimate> {
    if t == 0.0 {
        return Ok(Estimate::exact(phi.eval(y)));
    }
    let steps = n_steps(t, ens.dt);
    let est = ensemble_observable(x, y, r, &[steps], ens, exec, |v| phi.eval(v))?;
    Ok(est[0])
}

/// `P^x_t φ(y) − P^x_t φ(z)` estimated with common noise for both starts.
pub fn semigroup_difference<E: Executor>(
    phi: &Functional,
    x: &Field,
    y: &Field,
    z: &Field,
    r: &ReactionSystem,
    t: f64,
    ens: &Ensemble,
    exec: &E,
) -> Result<Estimate> {
    check_fast_step(r, ens.dt)?;
    let template = FastStepper::new(r, x, ens.dt, 1.0)?;
    let n = r.fast_basis().n_modes;
    let steps = n_steps(t, ens.dt);
    let diffs: Vec<f64> = exec.map_indexed(ens.replicas, |i| {
        let mut sa = template.clone();
        let mut sb = template.clone();
        let mut na = NoiseStream::new(ens.seed, ens.replica_offset + i as u64, n);
        let mut nb = na.clone();
        let (mut a, mut b) = (y.clone(), z.clone());
        for _ in 0..steps {
            sa.step(a.coeffs_mut(), Some(&mut na));
            sb.step(b.coeffs_mut(), Some(&mut nb));
        }
        phi.eval(&a) - phi.eval(&b)
    });
    Ok(Estimate::of_independent(&diffs))
}
