//! Invariant measure `μ^x` of the fast equation and the averaged drift.
//!
//! `μ^x(dy) ∝ exp(2U(x, y)) N(0, (−B)⁻¹/2)(dy)`. Two estimators are provided
//! and neither needs the normalisation `Z(x)`:
//!
//! - [`ergodic_measure`]: time averages along one long fast trajectory;
//! - [`pcn_measure`]: preconditioned Crank-Nicolson Metropolis chain whose
//!   proposal preserves the Gaussian reference, so only `2U` enters the
//!   acceptance ratio.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Warning};
use crate::exec::Executor;
use crate::fast::{ensemble_observable, Ensemble, FastStepper, Functional};
use crate::math::{exp, ln, powf, sqrt};
use crate::noise::{Channel, NoiseStream};
use crate::reaction::ReactionSystem;
use crate::spectral::Field;
use crate::stats::{self, Estimate};
use crate::Result;

/// Warning threshold on the effective sample size.
pub const ESS_FLOOR: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    ErgodicAverage,
    PcnGibbs,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::ErgodicAverage => "ergodic_average",
            Provenance::PcnGibbs => "pcn_gibbs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureDiagnostics {
    /// Smallest per-mode effective sample size.
    pub ess: f64,
    pub acceptance_rate: Option<f64>,
    /// Frozen pCN step parameter.
    pub beta: Option<f64>,
    /// Discarded burn-in, in steps.
    pub burn_in_steps: usize,
    pub warnings: Vec<Warning>,
}

/// Equally weighted samples approximating `μ^x`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureEstimate {
    pub samples: Vec<Field>,
    pub provenance: Provenance,
    pub x_frozen: Field,
    pub diagnostics: MeasureDiagnostics,
}

impl MeasureEstimate {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn mode_series(&self, k: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.coeffs()[k - 1]).collect()
    }

    /// Mean of coefficient `k` (1-based) with autocorrelation-corrected error.
    pub fn mode_mean(&self, k: usize) -> Estimate {
        Estimate::of_series(&self.mode_series(k))
    }

    /// Variance of coefficient `k`; its error uses the autocorrelation of the
    /// squared deviations.
    pub fn mode_variance(&self, k: usize) -> Estimate {
        let xs = self.mode_series(k);
        let m = stats::mean(&xs);
        let n = xs.len() as f64;
        let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
        let mut e = Estimate::of_series(&dev);
        let bessel = n / (n - 1.0).max(1.0);
        e.mean *= bessel;
        e.std_error *= bessel;
        e
    }

    /// `∫ φ dμ^x`.
    pub fn expectation(&self, phi: impl Fn(&Field) -> f64) -> Estimate {
        let xs: Vec<f64> = self.samples.iter().map(phi).collect();
        Estimate::of_series(&xs)
    }

    /// `∫ |z|_H^p μ^x(dz)`.
    pub fn moment(&self, p: f64) -> Estimate {
        self.expectation(|s| powf(s.norm(), p))
    }

    /// Concatenates two estimates of the same measure from the same
    /// estimator; the result's ESS is the sum of the parts.
    pub fn merge(mut self, other: MeasureEstimate) -> Result<MeasureEstimate> {
        if self.provenance != other.provenance || self.x_frozen != other.x_frozen {
            return Err(Error::invalid("other", "estimates target different measures"));
        }
        if let (Some(a), Some(b)) = (self.samples.first(), other.samples.first()) {
            if a.basis() != b.basis() {
                return Err(Error::BasisMismatch("samples on different bases"));
            }
        }
        let (na, nb) = (self.len() as f64, other.len() as f64);
        self.diagnostics.ess += other.diagnostics.ess;
        self.diagnostics.acceptance_rate = match (self.diagnostics.acceptance_rate, other.diagnostics.acceptance_rate) {
            (Some(a), Some(b)) => Some((a * na + b * nb) / (na + nb)),
            _ => None,
        };
        self.diagnostics.warnings.extend(other.diagnostics.warnings);
        self.samples.extend(other.samples);
        Ok(self)
    }
}

fn min_mode_ess(samples: &[Field]) -> f64 {
    let Some(first) = samples.first() else {
        return 0.0;
    };
    (0..first.n_modes())
        .map(|k| {
            let xs: Vec<f64> = samples.iter().map(|s| s.coeffs()[k]).collect();
            stats::effective_sample_size(&xs)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Time-average estimator settings (fast time units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErgodicConfig {
    pub dt: f64,
    /// Burn-in; `None` means `5 / δ`.
    pub t_burn: Option<f64>,
    pub t_sample: f64,
    /// Keep every `thin`-th step.
    pub thin: usize,
}

impl ErgodicConfig {
    pub fn burn_in(&self, r: &ReactionSystem) -> f64 {
        self.t_burn.unwrap_or(5.0 / r.dissipativity_gap())
    }
}

/// Samples `μ^x` by time averaging `v^{x,y0}` after burn-in.
pub fn ergodic_measure(
    x: &Field,
    y0: &Field,
    r: &ReactionSystem,
    cfg: &ErgodicConfig,
    ns: &mut NoiseStream,
) -> Result<MeasureEstimate> {
    let delta = r.dissipativity_gap();
    let t_burn = cfg.burn_in(r);
    if t_burn < 5.0 / delta * (1.0 - 1e-12) {
        return Err(Error::invalid("t_burn", alloc::format!("burn-in must be at least 5/δ = {}", 5.0 / delta)));
    }
    if !(cfg.dt > 0.0 && cfg.dt <= r.max_fast_step() * (1.0 + 1e-12)) {
        return Err(Error::invalid("dt", "fast step must be positive and ≤ 0.1 / L_nonlinear"));
    }
    let thin = cfg.thin.max(1);
    let burn_steps = libm::ceil(t_burn / cfg.dt) as usize;
    let sample_steps = libm::round(cfg.t_sample / cfg.dt) as usize;
    let mut stepper = FastStepper::new(r, x, cfg.dt, 1.0)?;
    let mut v = y0.clone();
    for _ in 0..burn_steps {
        stepper.step(v.coeffs_mut(), Some(ns));
    }
    let mut samples = Vec::with_capacity(sample_steps / thin + 1);
    for s in 1..=sample_steps {
        stepper.step(v.coeffs_mut(), Some(ns));
        if s % thin == 0 {
            samples.push(v.clone());
        }
    }
    let ess = min_mode_ess(&samples);
    let mut warnings = Vec::new();
    if ess < ESS_FLOOR {
        warnings.push(Warning::LowEffectiveSampleSize {
            ess,
            floor: ESS_FLOOR,
        });
    }
    Ok(MeasureEstimate {
        samples,
        provenance: Provenance::ErgodicAverage,
        x_frozen: x.clone(),
        diagnostics: MeasureDiagnostics {
            ess,
            acceptance_rate: None,
            beta: None,
            burn_in_steps: burn_steps,
            warnings,
        },
    })
}

/// pCN sampler settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcnConfig {
    pub n_samples: usize,
    /// Initial (or fixed, without adaptation) proposal parameter in `(0, 1)`.
    pub beta: f64,
    /// Robbins-Monro steps tuning `β` toward [`PcnConfig::target_acceptance`];
    /// zero disables adaptation.
    pub adapt_steps: usize,
    pub target_acceptance: f64,
    /// Minimum burn-in after adaptation; the sampler extends it to ten
    /// integrated autocorrelation times of `U` measured on a pilot run.
    pub min_burn_in: usize,
    pub thin: usize,
}

impl Default for PcnConfig {
    fn default() -> Self {
        Self {
            n_samples: 20_000,
            beta: 0.5,
            adapt_steps: 2_000,
            target_acceptance: 0.25,
            min_burn_in: 1_000,
            thin: 1,
        }
    }
}

const PILOT_STEPS: usize = 2_000;
const BETA_RANGE: (f64, f64) = (1e-3, 0.999);

struct PcnChain<'a> {
    r: &'a ReactionSystem,
    prior_sd: Vec<f64>,
    ws: crate::reaction::Workspace,
    y: Vec<f64>,
    u: f64,
    proposal: NoiseStream,
    accept: NoiseStream,
    z: Vec<f64>,
    y_new: Vec<f64>,
}

impl<'a> PcnChain<'a> {
    fn new(r: &'a ReactionSystem, x: &Field, seed: u64, replica: u64) -> Self {
        let n = r.fast_basis().n_modes;
        let prior_sd: Vec<f64> = r
            .fast_spectrum()
            .eigenvalues()
            .iter()
            .map(|a| sqrt(1.0 / (2.0 * a)))
            .collect();
        let mut ws = r.workspace();
        r.synthesize_slow(x, &mut ws.slow);
        let mut init = NoiseStream::with_channel(seed, replica, Channel::Initial, n);
        let mut z = vec![0.0; n];
        init.next_normals(&mut z);
        let y: Vec<f64> = z.iter().zip(&prior_sd).map(|(z, s)| z * s).collect();
        let mut chain = Self {
            r,
            prior_sd,
            ws,
            y,
            u: 0.0,
            proposal: NoiseStream::with_channel(seed, replica, Channel::Proposal, n),
            accept: NoiseStream::with_channel(seed, replica, Channel::Acceptance, n),
            z,
            y_new: vec![0.0; n],
        };
        chain.u = chain.potential_of(false);
        chain
    }

    fn potential_of(&mut self, proposal: bool) -> f64 {
        let y = if proposal { &self.y_new } else { &self.y };
        self.r.synthesize_fast_raw(y, &mut self.ws.fast);
        self.r.potential_nodal(&self.ws, y)
    }

    /// One pCN step; returns whether the proposal was accepted.
    fn step(&mut self, beta: f64) -> bool {
        let rho = sqrt(1.0 - beta * beta);
        self.proposal.next_normals(&mut self.z);
        for k in 0..self.y.len() {
            self.y_new[k] = rho * self.y[k] + beta * self.prior_sd[k] * self.z[k];
        }
        let u_new = self.potential_of(true);
        let log_ratio = 2.0 * (u_new - self.u);
        let uni = self.accept.next_uniform();
        if log_ratio >= 0.0 || ln(uni) < log_ratio {
            core::mem::swap(&mut self.y, &mut self.y_new);
            self.u = u_new;
            true
        } else {
            false
        }
    }
}

/// Samples `μ^x` with a pCN Metropolis chain (replica 0 of `seed`).
pub fn pcn_measure(x: &Field, r: &ReactionSystem, cfg: &PcnConfig, seed: u64) -> Result<MeasureEstimate> {
    pcn_measure_replica(x, r, cfg, seed, 0)
}

/// [`pcn_measure`] on an explicit replica stream.
pub fn pcn_measure_replica(
    x: &Field,
    r: &ReactionSystem,
    cfg: &PcnConfig,
    seed: u64,
    replica: u64,
) -> Result<MeasureEstimate> {
    if !(cfg.beta > 0.0 && cfg.beta < 1.0) {
        return Err(Error::invalid("beta", "must lie in (0, 1)"));
    }
    if cfg.n_samples < 2 {
        return Err(Error::invalid("n_samples", "need at least two samples"));
    }
    if x.basis() != r.slow_basis() {
        return Err(Error::BasisMismatch("frozen slow state not on the slow basis"));
    }
    let mut chain = PcnChain::new(r, x, seed, replica);
    let mut log_beta = ln(cfg.beta);
    for i in 0..cfg.adapt_steps {
        let acc = chain.step(exp(log_beta)) as u8 as f64;
        let gain = 1.0 / powf(1.0 + i as f64, 0.6);
        log_beta = (log_beta + gain * (acc - cfg.target_acceptance))
            .clamp(ln(BETA_RANGE.0), ln(BETA_RANGE.1));
    }
    let beta = exp(log_beta);

    let mut pilot = Vec::with_capacity(PILOT_STEPS);
    for _ in 0..PILOT_STEPS {
        chain.step(beta);
        pilot.push(chain.u);
    }
    let tau = stats::integrated_autocorrelation_time(&pilot);
    let target_burn = cfg.min_burn_in.max(libm::ceil(10.0 * tau) as usize);
    let extra = target_burn.saturating_sub(PILOT_STEPS);
    for _ in 0..extra {
        chain.step(beta);
    }
    let burn_in_steps = cfg.adapt_steps + PILOT_STEPS + extra;

    let thin = cfg.thin.max(1);
    let basis = r.fast_basis();
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut accepted = 0usize;
    let mut total = 0usize;
    while samples.len() < cfg.n_samples {
        for _ in 0..thin {
            accepted += chain.step(beta) as usize;
            total += 1;
        }
        samples.push(Field::new(basis, chain.y.clone())?);
    }
    let rate = accepted as f64 / total as f64;
    let ess = min_mode_ess(&samples);
    let mut warnings = Vec::new();
    if !(0.1..=0.6).contains(&rate) {
        let suggested = (beta * (rate / cfg.target_acceptance).clamp(0.25, 4.0))
            .clamp(BETA_RANGE.0, BETA_RANGE.1);
        warnings.push(Warning::AcceptanceOutOfRange {
            rate,
            suggested_beta: suggested,
        });
    }
    if ess < ESS_FLOOR {
        warnings.push(Warning::LowEffectiveSampleSize {
            ess,
            floor: ESS_FLOOR,
        });
    }
    Ok(MeasureEstimate {
        samples,
        provenance: Provenance::PcnGibbs,
        x_frozen: x.clone(),
        diagnostics: MeasureDiagnostics {
            ess,
            acceptance_rate: Some(rate),
            beta: Some(beta),
            burn_in_steps,
            warnings,
        },
    })
}

/// Mean of `μ^x` when `G(x, y) − κy` does not depend on `y`; `μ^x` is then
/// Gaussian with mode means `G₀_k / (α_k − κ)` and variances `1 / (2(α_k − κ))`.
pub fn gaussian_mean(r: &ReactionSystem, x: &Field) -> Result<Field> {
    if !r.residual_is_fast_independent() {
        return Err(Error::NoClosedForm("fast reaction is nonlinear in the fast variable"));
    }
    if x.basis() != r.slow_basis() {
        return Err(Error::BasisMismatch("slow state not on the slow basis"));
    }
    let mut ws = r.workspace();
    r.synthesize_slow(x, &mut ws.slow);
    let mut g0 = vec![0.0; r.fast_basis().n_modes];
    let zero = g0.clone();
    r.eval_g_residual(&mut ws, &zero, &mut g0);
    let coeffs = g0
        .iter()
        .zip(r.fast_operator().eigenvalues())
        .map(|(g, a)| g / a)
        .collect();
    Field::new(r.fast_basis(), coeffs)
}

/// Mode variances `1 / (2(α_k − κ))` of the Gaussian case.
pub fn gaussian_variances(r: &ReactionSystem) -> Vec<f64> {
    r.fast_operator()
        .eigenvalues()
        .iter()
        .map(|a| 1.0 / (2.0 * a))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftSource {
    ClosedForm,
    Ergodic,
    Pcn,
}

/// `F̄(x) = ∫ F(x, y) μ^x(dy)` with per-mode standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedDrift {
    pub x: Field,
    pub value: Field,
    pub std_error: Vec<f64>,
    pub source: DriftSource,
    pub n_samples: usize,
}

impl AveragedDrift {
    /// Monte Carlo mean of `F(x, y_i)` over the samples of `m`.
    pub fn from_measure(r: &ReactionSystem, m: &MeasureEstimate) -> Result<Self> {
        let x = &m.x_frozen;
        let n = r.slow_basis().n_modes;
        let mut ws = r.workspace();
        r.synthesize_slow(x, &mut ws.slow);
        let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(m.len()); n];
        let mut fy = vec![0.0; n];
        for y in &m.samples {
            r.synthesize_fast(y, &mut ws.fast);
            r.eval_f_nodal(&mut ws, &mut fy);
            for (c, v) in cols.iter_mut().zip(&fy) {
                c.push(*v);
            }
        }
        let mut value = Field::zeros(r.slow_basis());
        let mut std_error = Vec::with_capacity(n);
        for (k, col) in cols.iter().enumerate() {
            let e = Estimate::of_series(col);
            value.coeffs_mut()[k] = e.mean;
            std_error.push(e.std_error);
        }
        Ok(Self {
            x: x.clone(),
            value,
            std_error,
            source: match m.provenance {
                Provenance::ErgodicAverage => DriftSource::Ergodic,
                Provenance::PcnGibbs => DriftSource::Pcn,
            },
            n_samples: m.len(),
        })
    }

    /// `(Σ_k se_k²)^{1/2}`, the H-norm scale of the Monte Carlo error.
    pub fn error_norm(&self) -> f64 {
        sqrt(self.std_error.iter().map(|s| s * s).sum())
    }
}

/// Exact `F̄(x) = F(x, m(x))` for systems whose fast law is Gaussian and
/// whose `f` is affine in `σ2`.
pub fn closed_form_averaged_drift(r: &ReactionSystem, x: &Field) -> Result<AveragedDrift> {
    if !r.f().is_affine_in_fast() {
        return Err(Error::NoClosedForm("f is nonlinear in the fast variable"));
    }
    let value = if r.f().depends_on_fast() {
        let m = gaussian_mean(r, x)?;
        r.eval_f(x, &m)?
    } else {
        r.eval_f(x, &Field::zeros(r.fast_basis()))?
    };
    Ok(AveragedDrift {
        x: x.clone(),
        value,
        std_error: vec![0.0; r.slow_basis().n_modes],
        source: DriftSource::ClosedForm,
        n_samples: 0,
    })
}

/// How to evaluate `F̄`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriftEstimator {
    ClosedForm,
    Pcn { cfg: PcnConfig, seed: u64 },
    Ergodic { cfg: ErgodicConfig, seed: u64 },
}

pub fn averaged_drift(x: &Field, r: &ReactionSystem, est: &DriftEstimator) -> Result<AveragedDrift> {
    averaged_drift_replica(x, r, est, 0)
}

/// [`averaged_drift`] drawing its randomness from replica stream `replica`.
pub fn averaged_drift_replica(
    x: &Field,
    r: &ReactionSystem,
    est: &DriftEstimator,
    replica: u64,
) -> Result<AveragedDrift> {
    if !r.f().depends_on_fast() {
        // F(x, ·) is constant, so F̄(x) = F(x, 0) exactly
        let mut d = closed_form_averaged_drift(r, x)?;
        d.source = match est {
            DriftEstimator::ClosedForm => DriftSource::ClosedForm,
            DriftEstimator::Pcn { .. } => DriftSource::Pcn,
            DriftEstimator::Ergodic { .. } => DriftSource::Ergodic,
        };
        return Ok(d);
    }
    match est {
        DriftEstimator::ClosedForm => closed_form_averaged_drift(r, x),
        DriftEstimator::Pcn { cfg, seed } => {
            let m = pcn_measure_replica(x, r, cfg, *seed, replica)?;
            AveragedDrift::from_measure(r, &m)
        }
        DriftEstimator::Ergodic { cfg, seed } => {
            let mut ns = NoiseStream::new(*seed, replica, r.fast_basis().n_modes);
            let y0 = Field::zeros(r.fast_basis());
            let m = ergodic_measure(x, &y0, r, cfg, &mut ns)?;
            AveragedDrift::from_measure(r, &m)
        }
    }
}

/// `⟨DF̄(x) k, h⟩_H` from the covariance formula and its pieces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientEstimate {
    pub value: f64,
    pub std_error: f64,
    /// `∫ ⟨D_xF(x, y) k, h⟩ μ^x(dy)`.
    pub direct: f64,
    /// `2 Cov_{μ^x}(⟨U_x, k⟩, ⟨F, h⟩)`.
    pub covariance: f64,
}

/// `⟨DF̄(x)k, h⟩ = ∫⟨D_xF k, h⟩dμ^x + 2∫⟨U_x, k⟩⟨F, h⟩dμ^x − 2∫⟨U_x, k⟩dμ^x ∫⟨F, h⟩dμ^x`
/// evaluated over the samples of `m`.
pub fn averaged_drift_gradient(
    k: &Field,
    h: &Field,
    r: &ReactionSystem,
    m: &MeasureEstimate,
) -> Result<GradientEstimate> {
    let x = &m.x_frozen;
    if k.basis() != r.slow_basis() || h.basis() != r.slow_basis() {
        return Err(Error::BasisMismatch("directions must live on the slow basis"));
    }
    let g = r.grid().n_nodes;
    let mut ws = r.workspace();
    r.synthesize_slow(x, &mut ws.slow);
    let mut kn = vec![0.0; g];
    let mut hn = vec![0.0; g];
    r.synthesize_slow(k, &mut kn);
    r.synthesize_slow(h, &mut hn);
    let n = m.len();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    for y in &m.samples {
        r.synthesize_fast(y, &mut ws.fast);
        a.push(r.f_slow_derivative_pairing_nodal(&ws.slow, &ws.fast, &kn, &hn));
        b.push(r.potential_x_derivative_nodal(&ws.slow, &ws.fast, &kn));
        c.push(r.pair_f_nodal(&ws, &hn, h));
    }
    let (ma, mb, mc) = (stats::mean(&a), stats::mean(&b), stats::mean(&c));
    let cov = a
        .iter()
        .zip(&b)
        .zip(&c)
        .map(|((_, bi), ci)| (bi - mb) * (ci - mc))
        .sum::<f64>()
        / n as f64;
    let influence: Vec<f64> = a
        .iter()
        .zip(&b)
        .zip(&c)
        .map(|((ai, bi), ci)| ai + 2.0 * (bi - mb) * (ci - mc))
        .collect();
    let se = Estimate::of_series(&influence).std_error;
    Ok(GradientEstimate {
        value: ma + 2.0 * cov,
        std_error: se,
        direct: ma,
        covariance: 2.0 * cov,
    })
}

/// Exponential fit of `|P^x_t φ(y) − μ^x(φ)|`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingFit {
    pub rate: f64,
    pub prefactor: f64,
    pub times: Vec<f64>,
    pub gaps: Vec<Estimate>,
    /// Whether each time point was above the noise floor and entered the fit.
    pub used: Vec<bool>,
    pub warnings: Vec<Warning>,
}

/// Fits `|P^x_t φ(y) − μ^x(φ)| ≈ C e^{−ρt}` over `t_grid` (fast time), using
/// only points whose gap exceeds three combined standard errors.
#[allow(clippy::too_many_arguments)]
pub fn mixing_rate<E: Executor>(
    x: &Field,
    y: &Field,
    phi: &Functional,
    r: &ReactionSystem,
    t_grid: &[f64],
    mu_phi: Estimate,
    ens: &Ensemble,
    exec: &E,
) -> Result<MixingFit> {
    let steps: Vec<usize> = t_grid.iter().map(|t| libm::round(t / ens.dt) as usize).collect();
    if steps.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("t_grid", "times must be nondecreasing"));
    }
    let est = ensemble_observable(x, y, r, &steps, ens, exec, |v| phi.eval(v))?;
    let mut gaps = Vec::with_capacity(t_grid.len());
    let mut used = Vec::with_capacity(t_grid.len());
    let mut warnings = Vec::new();
    let (mut ts, mut ys) = (Vec::new(), Vec::new());
    for ((&t, &s), e) in t_grid.iter().zip(&steps).zip(&est) {
        let se = sqrt(e.std_error * e.std_error + mu_phi.std_error * mu_phi.std_error);
        let gap = Estimate {
            mean: (e.mean - mu_phi.mean).abs(),
            std_error: se,
            ess: e.ess,
        };
        let ok = s == 0 || gap.mean > 3.0 * se;
        if !ok && !warnings.iter().any(|w| matches!(w, Warning::BelowNoiseFloor { .. })) {
            warnings.push(Warning::BelowNoiseFloor { time: t });
        }
        if ok && gap.mean > 0.0 {
            ts.push(t);
            ys.push(gap.mean);
        }
        gaps.push(gap);
        used.push(ok);
    }
    let (prefactor, rate) = stats::exponential_decay_fit(&ts, &ys)
        .ok_or(Error::DegenerateFit("fewer than two points above the noise floor"))?;
    Ok(MixingFit {
        rate,
        prefactor,
        times: t_grid.to_vec(),
        gaps,
        used,
        warnings,
    })
}

/// One row of the `∫|z|^p dμ^x` versus `|x|_H` table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentGrowthRow {
    pub x_norm: f64,
    pub moment: Estimate,
}

/// `∫ |z|_H^p μ^x(dz)` for each slow state in `x_grid`, by pCN.
pub fn measure_moment_growth(
    r: &ReactionSystem,
    x_grid: &[Field],
    p: f64,
    cfg: &PcnConfig,
    seed: u64,
) -> Result<Vec<MomentGrowthRow>> {
    if ![1.0, 2.0, 4.0].contains(&p) {
        return Err(Error::invalid("p", "moment order must be 1, 2 or 4"));
    }
    x_grid
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let m = pcn_measure_replica(x, r, cfg, seed, i as u64)?;
            Ok(MomentGrowthRow {
                x_norm: x.norm(),
                moment: m.moment(p),
            })
        })
        .collect()
}

/// Smallest `c` with `moment ≤ c (1 + |x|^p)` over `rows`.
pub fn fit_growth_constant(rows: &[MomentGrowthRow], p: f64) -> f64 {
    rows.iter()
        .map(|row| row.moment.mean / (1.0 + powf(row.x_norm, p)))
        .fold(0.0, f64::max)
}
