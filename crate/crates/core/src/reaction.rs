//! Reaction terms `f`, `g`, their Nemytskii operators `F`, `G`, and the
//! potential `U(x, y) = ∫_0^L ∫_0^{y(ξ)} g(ξ, x(ξ), s) ds dξ` of the fast
//! gradient system.
//!
//! Reactions are sums of catalog [`Term`]s whose derivative bounds are known
//! in closed form, so the Lipschitz constants entering the hypothesis gate are
//! certified rather than estimated.
//!
//! Terms that depend on `ξ` only (constants, sine sources) are projected
//! analytically; everything else is evaluated pseudo-spectrally on the grid.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::Error;
use crate::math::{cos, ln_cosh, sech2, sin, sqrt, tanh, GaussLegendre, PI};
use crate::spectral::{Basis, Family, Field, Grid, OperatorSpectrum, Transform};
use crate::Result;

/// One catalog entry of a reaction `r(ξ, σ1, σ2)`; `σ1` is the slow
/// argument and `σ2` the fast one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Term {
    /// `slow·σ1 + fast·σ2 + constant`.
    Linear { slow: f64, fast: f64, constant: f64 },
    /// `a tanh(s σ1)`.
    SlowTanh { amplitude: f64, scale: f64 },
    /// `a sin(s σ1)`.
    SlowSin { amplitude: f64, scale: f64 },
    /// `a tanh(s σ2)`.
    FastTanh { amplitude: f64, scale: f64 },
    /// `a sin(s σ2)`.
    FastSin { amplitude: f64, scale: f64 },
    /// `a tanh(σ1 + σ2)`.
    SumTanh { amplitude: f64 },
    /// `a sin(k π ξ / L)`.
    SineSource { amplitude: f64, wavenumber: u32 },
    /// `a sin(σ1) σ2`; its `σ1`-derivative is unbounded.
    SinProduct { amplitude: f64 },
}

impl Term {
    /// Pointwise value excluding the `ξ`-only part.
    fn nodal(&self, s1: f64, s2: f64) -> f64 {
        match *self {
            Term::Linear { slow, fast, .. } => slow * s1 + fast * s2,
            Term::SlowTanh { amplitude, scale } => amplitude * tanh(scale * s1),
            Term::SlowSin { amplitude, scale } => amplitude * sin(scale * s1),
            Term::FastTanh { amplitude, scale } => amplitude * tanh(scale * s2),
            Term::FastSin { amplitude, scale } => amplitude * sin(scale * s2),
            Term::SumTanh { amplitude } => amplitude * tanh(s1 + s2),
            Term::SineSource { .. } => 0.0,
            Term::SinProduct { amplitude } => amplitude * sin(s1) * s2,
        }
    }

    fn source(&self, xi: f64, length: f64) -> f64 {
        match *self {
            Term::Linear { constant, .. } => constant,
            Term::SineSource {
                amplitude,
                wavenumber,
            } => amplitude * sin(wavenumber as f64 * PI * xi / length),
            _ => 0.0,
        }
    }

    fn d_slow(&self, s1: f64, s2: f64) -> f64 {
        match *self {
            Term::Linear { slow, .. } => slow,
            Term::SlowTanh { amplitude, scale } => amplitude * scale * sech2(scale * s1),
            Term::SlowSin { amplitude, scale } => amplitude * scale * cos(scale * s1),
            Term::SumTanh { amplitude } => amplitude * sech2(s1 + s2),
            Term::SinProduct { amplitude } => amplitude * cos(s1) * s2,
            _ => 0.0,
        }
    }

    fn d_fast(&self, s1: f64, s2: f64) -> f64 {
        match *self {
            Term::Linear { fast, .. } => fast,
            Term::FastTanh { amplitude, scale } => amplitude * scale * sech2(scale * s2),
            Term::FastSin { amplitude, scale } => amplitude * scale * cos(scale * s2),
            Term::SumTanh { amplitude } => amplitude * sech2(s1 + s2),
            Term::SinProduct { amplitude } => amplitude * sin(s1),
            _ => 0.0,
        }
    }

    /// `sup |∂/∂σ1|`.
    fn bound_slow(&self) -> f64 {
        match *self {
            Term::Linear { slow, .. } => slow.abs(),
            Term::SlowTanh { amplitude, scale } | Term::SlowSin { amplitude, scale } => {
                (amplitude * scale).abs()
            }
            Term::SumTanh { amplitude } => amplitude.abs(),
            Term::SinProduct { amplitude } if amplitude != 0.0 => f64::INFINITY,
            _ => 0.0,
        }
    }

    /// `sup |∂/∂σ2|`.
    fn bound_fast(&self) -> f64 {
        match *self {
            Term::Linear { fast, .. } => fast.abs(),
            Term::FastTanh { amplitude, scale } | Term::FastSin { amplitude, scale } => {
                (amplitude * scale).abs()
            }
            Term::SumTanh { amplitude } | Term::SinProduct { amplitude } => amplitude.abs(),
            _ => 0.0,
        }
    }

    /// `∫_0^y` of the nodal part in `σ2`, with `σ1 = s1` fixed.
    fn antiderivative(&self, s1: f64, y: f64) -> f64 {
        match *self {
            Term::Linear { slow, fast, .. } => slow * s1 * y + 0.5 * fast * y * y,
            Term::SlowTanh { amplitude, scale } => amplitude * tanh(scale * s1) * y,
            Term::SlowSin { amplitude, scale } => amplitude * sin(scale * s1) * y,
            Term::FastTanh { amplitude, scale } => amplitude * ln_cosh(scale * y) / scale,
            // a (1 − cos(s y)) / s = 2a sin²(s y / 2) / s
            Term::FastSin { amplitude, scale } => {
                let h = sin(0.5 * scale * y);
                2.0 * amplitude * h * h / scale
            }
            Term::SumTanh { amplitude } => amplitude * (ln_cosh(s1 + y) - ln_cosh(s1)),
            Term::SineSource { .. } => 0.0,
            Term::SinProduct { amplitude } => 0.5 * amplitude * sin(s1) * y * y,
        }
    }

    fn depends_on_fast(&self) -> bool {
        match *self {
            Term::Linear { fast, .. } => fast != 0.0,
            Term::FastTanh { amplitude, .. }
            | Term::FastSin { amplitude, .. }
            | Term::SumTanh { amplitude }
            | Term::SinProduct { amplitude } => amplitude != 0.0,
            _ => false,
        }
    }

    fn depends_on_slow(&self) -> bool {
        match *self {
            Term::Linear { slow, .. } => slow != 0.0,
            Term::SlowTanh { amplitude, .. }
            | Term::SlowSin { amplitude, .. }
            | Term::SumTanh { amplitude }
            | Term::SinProduct { amplitude } => amplitude != 0.0,
            _ => false,
        }
    }

    /// Nonlinear in `σ2` (anything beyond an affine dependence).
    fn nonlinear_in_fast(&self) -> bool {
        !matches!(self, Term::Linear { .. }) && self.depends_on_fast()
    }

    /// `⟨source, e_k⟩_H` in closed form.
    fn source_coefficient(&self, basis: &Basis, k: usize) -> f64 {
        let l = basis.length;
        match (*self, basis.family) {
            (Term::Linear { constant, .. }, Family::Sine) => {
                // √(2/L) · L (1 − cos kπ) / (kπ)
                if k % 2 == 1 {
                    constant * sqrt(2.0 / l) * 2.0 * l / (k as f64 * PI)
                } else {
                    0.0
                }
            }
            (Term::Linear { constant, .. }, Family::Cosine) => {
                if k == 1 {
                    constant * sqrt(l)
                } else {
                    0.0
                }
            }
            (
                Term::SineSource {
                    amplitude,
                    wavenumber,
                },
                Family::Sine,
            ) => {
                if wavenumber as usize == k {
                    amplitude * sqrt(l / 2.0)
                } else {
                    0.0
                }
            }
            (
                Term::SineSource {
                    amplitude,
                    wavenumber,
                },
                Family::Cosine,
            ) => {
                // ∫_0^L sin(wπξ/L) cos(jπξ/L) dξ = L/π · w (1 − (−1)^{w+j}) / (w² − j²)
                let w = wavenumber as i64;
                let j = (k - 1) as i64;
                let integral = if (w + j) % 2 == 0 || w == j {
                    0.0
                } else {
                    l / PI * 2.0 * w as f64 / ((w * w - j * j) as f64)
                };
                let norm = if k == 1 { 1.0 / sqrt(l) } else { sqrt(2.0 / l) };
                amplitude * norm * integral
            }
            _ => 0.0,
        }
    }
}

/// A reaction function: a finite sum of catalog terms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReactionFn {
    terms: Vec<Term>,
}

impl ReactionFn {
    pub fn new(terms: Vec<Term>) -> Self {
        Self { terms }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// `−a σ2`.
    pub fn linear_damped(a: f64) -> Self {
        Self::new(vec![Term::Linear {
            slow: 0.0,
            fast: -a,
            constant: 0.0,
        }])
    }

    pub fn linear(slow: f64, fast: f64, constant: f64) -> Self {
        Self::new(vec![Term::Linear {
            slow,
            fast,
            constant,
        }])
    }

    pub fn plus(mut self, term: Term) -> Self {
        self.terms.push(term);
        self
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Full pointwise value `r(ξ, σ1, σ2)` on `(0, length)`.
    pub fn value(&self, xi: f64, length: f64, s1: f64, s2: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| t.nodal(s1, s2) + t.source(xi, length))
            .sum()
    }

    fn nodal(&self, s1: f64, s2: f64) -> f64 {
        self.terms.iter().map(|t| t.nodal(s1, s2)).sum()
    }

    pub fn d_slow(&self, s1: f64, s2: f64) -> f64 {
        self.terms.iter().map(|t| t.d_slow(s1, s2)).sum()
    }

    pub fn d_fast(&self, s1: f64, s2: f64) -> f64 {
        self.terms.iter().map(|t| t.d_fast(s1, s2)).sum()
    }

    fn antiderivative(&self, s1: f64, y: f64) -> f64 {
        self.terms.iter().map(|t| t.antiderivative(s1, y)).sum()
    }

    /// Certified `sup |∂r/∂σ1|`.
    pub fn bound_slow(&self) -> f64 {
        self.terms.iter().map(Term::bound_slow).sum()
    }

    /// Certified `sup |∂r/∂σ2|`.
    pub fn bound_fast(&self) -> f64 {
        self.terms.iter().map(Term::bound_fast).sum()
    }

    /// Lipschitz constant for `|r(σ) − r(ρ)| ≤ L (|σ1 − ρ1| + |σ2 − ρ2|)`.
    pub fn lipschitz(&self) -> f64 {
        self.bound_slow().max(self.bound_fast())
    }

    /// Sum of the `σ2` coefficients of linear terms.
    pub fn fast_linear_coefficient(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| match t {
                Term::Linear { fast, .. } => *fast,
                _ => 0.0,
            })
            .sum()
    }

    /// Sum of the `σ1` coefficients of linear terms.
    pub fn slow_linear_coefficient(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| match t {
                Term::Linear { slow, .. } => *slow,
                _ => 0.0,
            })
            .sum()
    }

    pub fn depends_on_fast(&self) -> bool {
        self.terms.iter().any(Term::depends_on_fast)
    }

    pub fn depends_on_slow(&self) -> bool {
        self.terms.iter().any(Term::depends_on_slow)
    }

    /// Affine in `σ2` with a `σ2`-coefficient independent of `σ1`.
    pub fn is_affine_in_fast(&self) -> bool {
        !self.terms.iter().any(Term::nonlinear_in_fast)
    }

    /// Closed-form `⟨source, e_k⟩_H` for `k = 1..=N`.
    pub fn source_coefficients(&self, basis: &Basis) -> Vec<f64> {
        (1..=basis.n_modes)
            .map(|k| {
                self.terms
                    .iter()
                    .map(|t| t.source_coefficient(basis, k))
                    .sum()
            })
            .collect()
    }

    fn unbounded_term(&self) -> Option<&Term> {
        self.terms
            .iter()
            .find(|t| !t.bound_slow().is_finite() || !t.bound_fast().is_finite())
    }
}

/// Nemytskii operator of a bare reaction: `ξ ↦ r(ξ, x(ξ), y(ξ))` projected
/// onto the basis of `x` using a grid of `n_nodes` points.
pub fn nemytskii(r: &ReactionFn, x: &Field, y: &Field, n_nodes: usize) -> Result<Field> {
    if x.basis().length != y.basis().length {
        return Err(Error::BasisMismatch("fields live on different domains"));
    }
    let grid = Grid::new(x.basis().length, n_nodes);
    let tx = Transform::new(x.basis(), grid)?;
    let ty = Transform::new(y.basis(), grid)?;
    let xn = tx.synthesize(x)?;
    let yn = ty.synthesize(y)?;
    let vals: Vec<f64> = xn.iter().zip(&yn).map(|(&a, &b)| r.nodal(a, b)).collect();
    let mut out = tx.analyze(&vals)?;
    for (c, s) in out.coeffs_mut().iter_mut().zip(r.source_coefficients(&x.basis())) {
        *c += s;
    }
    Ok(out)
}

/// Scratch buffers for nodal evaluation; one per worker.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub(crate) slow: Vec<f64>,
    pub(crate) fast: Vec<f64>,
    pub(crate) vals: Vec<f64>,
}

impl Workspace {
    pub fn new(n_nodes: usize) -> Self {
        Self {
            slow: vec![0.0; n_nodes],
            fast: vec![0.0; n_nodes],
            vals: vec![0.0; n_nodes],
        }
    }
}

/// Validated pair `(f, g)` bound to the fast operator `B` and the slow basis.
#[derive(Debug, Clone)]
pub struct ReactionSystem {
    f: ReactionFn,
    g: ReactionFn,
    fast_spectrum: OperatorSpectrum,
    fast_operator: OperatorSpectrum,
    fast_linear: f64,
    grid: Grid,
    slow_tf: Transform,
    fast_tf: Transform,
    f_source: Vec<f64>,
    g_source: Vec<f64>,
    lipschitz_f: f64,
    lipschitz_g: f64,
    coupling_g: f64,
    theta_rule: GaussLegendre,
}

/// Validates `(f, g)` against the fast spectrum, with the slow component on
/// the same basis.
pub fn make_reaction(f: ReactionFn, g: ReactionFn, fast: &OperatorSpectrum) -> Result<ReactionSystem> {
    ReactionSystem::new(f, g, fast, fast.basis())
}

impl ReactionSystem {
    /// Hypothesis gate: `f` and `g` must have bounded first derivatives and
    /// `L_g = sup|∂g/∂σ2| < λ`.
    pub fn new(
        f: ReactionFn,
        g: ReactionFn,
        fast: &OperatorSpectrum,
        slow_basis: Basis,
    ) -> Result<Self> {
        let m = slow_basis.min_grid_nodes().max(fast.basis().min_grid_nodes());
        Self::with_grid(f, g, fast, slow_basis, m)
    }

    pub fn with_grid(
        f: ReactionFn,
        g: ReactionFn,
        fast: &OperatorSpectrum,
        slow_basis: Basis,
        n_nodes: usize,
    ) -> Result<Self> {
        for r in [&f, &g] {
            if let Some(t) = r.unbounded_term() {
                return Err(Error::NonLipschitz {
                    term: format!("{}", TermDisplay(t)),
                });
            }
        }
        let lipschitz_g = g.bound_fast();
        let lambda = fast.spectral_gap();
        if !(lipschitz_g < lambda) {
            return Err(Error::HypothesisViolation {
                lipschitz_g,
                spectral_gap: lambda,
            });
        }
        if slow_basis.length != fast.length() {
            return Err(Error::BasisMismatch("slow and fast domains differ"));
        }
        let grid = Grid::new(fast.length(), n_nodes);
        let slow_tf = Transform::new(slow_basis, grid)?;
        let fast_tf = Transform::new(fast.basis(), grid)?;
        let fast_linear = g.fast_linear_coefficient();
        // |κ| ≤ L_g < λ, so B + κ stays dissipative
        let fast_operator = fast.shifted(fast_linear)?;
        Ok(Self {
            f_source: f.source_coefficients(&slow_basis),
            g_source: g.source_coefficients(&fast.basis()),
            lipschitz_f: f.lipschitz(),
            lipschitz_g,
            coupling_g: g.bound_slow(),
            f,
            g,
            fast_spectrum: fast.clone(),
            fast_operator,
            fast_linear,
            grid,
            slow_tf,
            fast_tf,
            theta_rule: GaussLegendre::new(8),
        })
    }

    pub fn f(&self) -> &ReactionFn {
        &self.f
    }

    pub fn g(&self) -> &ReactionFn {
        &self.g
    }

    /// The spectrum of `B`.
    pub fn fast_spectrum(&self) -> &OperatorSpectrum {
        &self.fast_spectrum
    }

    /// The spectrum of `B + κ` where `κ` is the linear `σ2`-coefficient of
    /// `g`; the fast stepper treats this part exactly.
    pub fn fast_operator(&self) -> &OperatorSpectrum {
        &self.fast_operator
    }

    pub fn fast_linear_coefficient(&self) -> f64 {
        self.fast_linear
    }

    pub fn slow_basis(&self) -> Basis {
        self.slow_tf.basis()
    }

    pub fn fast_basis(&self) -> Basis {
        self.fast_tf.basis()
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(self.grid.n_nodes)
    }

    pub fn lipschitz_f(&self) -> f64 {
        self.lipschitz_f
    }

    /// `L_g = sup |∂g/∂σ2|`.
    pub fn lipschitz_g(&self) -> f64 {
        self.lipschitz_g
    }

    /// `sup |∂g/∂σ1|`.
    pub fn coupling_bound_g(&self) -> f64 {
        self.coupling_g
    }

    /// Lipschitz constant of `G` in both arguments.
    pub fn lipschitz_g_total(&self) -> f64 {
        self.lipschitz_g.max(self.coupling_g)
    }

    /// `δ = (λ − L_g) / 2`.
    pub fn dissipativity_gap(&self) -> f64 {
        0.5 * (self.fast_spectrum.spectral_gap() - self.lipschitz_g)
    }

    fn check_pair(&self, x: &Field, y: &Field) -> Result<()> {
        if x.basis() != self.slow_basis() {
            return Err(Error::BasisMismatch("slow argument not on the slow basis"));
        }
        if y.basis() != self.fast_basis() {
            return Err(Error::BasisMismatch("fast argument not on the fast basis"));
        }
        Ok(())
    }

    pub fn synthesize_slow(&self, x: &Field, out: &mut [f64]) {
        self.slow_tf.synthesize_into(x, out);
    }

    pub fn synthesize_fast(&self, y: &Field, out: &mut [f64]) {
        self.fast_tf.synthesize_into(y, out);
    }

    /// Synthesis from raw fast coefficients.
    pub(crate) fn synthesize_fast_raw(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (k, &c) in y.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (o, e) in out.iter_mut().zip(self.fast_tf.mode_row(k + 1)) {
                *o += c * e;
            }
        }
    }

    /// `F(x, y)` on the slow basis.
    pub fn eval_f(&self, x: &Field, y: &Field) -> Result<Field> {
        self.check_pair(x, y)?;
        let mut ws = self.workspace();
        self.synthesize_slow(x, &mut ws.slow);
        self.synthesize_fast(y, &mut ws.fast);
        let mut out = Field::zeros(self.slow_basis());
        self.eval_f_nodal(&mut ws, out.coeffs_mut());
        Ok(out)
    }

    /// `F` from nodal values already in `ws.slow` / `ws.fast`.
    pub(crate) fn eval_f_nodal(&self, ws: &mut Workspace, out: &mut [f64]) {
        for ((v, &a), &b) in ws.vals.iter_mut().zip(&ws.slow).zip(&ws.fast) {
            *v = self.f.nodal(a, b);
        }
        self.slow_tf.analyze_into(&ws.vals, out);
        for (c, s) in out.iter_mut().zip(&self.f_source) {
            *c += s;
        }
    }

    /// `⟨F(x, y), h⟩_H` from nodal values in `ws` and nodal `h`.
    pub(crate) fn pair_f_nodal(&self, ws: &Workspace, h_nodal: &[f64], h: &Field) -> f64 {
        let q: f64 = ws
            .slow
            .iter()
            .zip(&ws.fast)
            .zip(h_nodal)
            .map(|((&a, &b), &hv)| self.f.nodal(a, b) * hv)
            .sum();
        q * self.grid.weight()
            + self
                .f_source
                .iter()
                .zip(h.coeffs())
                .map(|(s, c)| s * c)
                .sum::<f64>()
    }

    /// `G(x, y)` on the fast basis, including the linear `σ2` part.
    pub fn eval_g(&self, x: &Field, y: &Field) -> Result<Field> {
        self.check_pair(x, y)?;
        let mut ws = self.workspace();
        self.synthesize_slow(x, &mut ws.slow);
        self.synthesize_fast(y, &mut ws.fast);
        let mut out = Field::zeros(self.fast_basis());
        for ((v, &a), &b) in ws.vals.iter_mut().zip(&ws.slow).zip(&ws.fast) {
            *v = self.g.nodal(a, b);
        }
        self.fast_tf.analyze_into(&ws.vals, out.coeffs_mut());
        for (c, s) in out.coeffs_mut().iter_mut().zip(&self.g_source) {
            *c += s;
        }
        Ok(out)
    }

    /// `G(x, y) − κ y` from nodal slow values in `ws.slow`; overwrites
    /// `ws.fast` with the synthesis of `y`.
    pub(crate) fn eval_g_residual(&self, ws: &mut Workspace, y: &[f64], out: &mut [f64]) {
        self.synthesize_fast_raw(y, &mut ws.fast);
        let y_field_tf = &self.fast_tf;
        let kappa = self.fast_linear;
        for ((v, &a), &b) in ws.vals.iter_mut().zip(&ws.slow).zip(&ws.fast) {
            *v = self.g.nodal(a, b) - kappa * b;
        }
        y_field_tf.analyze_into(&ws.vals, out);
        for (c, s) in out.iter_mut().zip(&self.g_source) {
            *c += s;
        }
    }

    /// Lipschitz constant in `y` of `G(x, y) − κ y`.
    pub fn residual_lipschitz(&self) -> f64 {
        self.g
            .terms()
            .iter()
            .filter(|t| !matches!(t, Term::Linear { .. }))
            .map(Term::bound_fast)
            .sum()
    }

    /// Largest fast step (in fast time units) for the frozen-drift scheme:
    /// `0.1 / L` with `L` the Lipschitz constant of the nonlinear remainder.
    pub fn max_fast_step(&self) -> f64 {
        let l = self.residual_lipschitz();
        if l > 0.0 {
            0.1 / l
        } else {
            f64::INFINITY
        }
    }

    /// True when `G(x, y) − κ y` does not depend on `y`.
    pub fn residual_is_fast_independent(&self) -> bool {
        self.g.is_affine_in_fast()
    }

    /// `U(x, y)`.
    pub fn potential(&self, x: &Field, y: &Field) -> Result<f64> {
        self.check_pair(x, y)?;
        let mut ws = self.workspace();
        self.synthesize_slow(x, &mut ws.slow);
        self.synthesize_fast(y, &mut ws.fast);
        Ok(self.potential_nodal(&ws, y.coeffs()))
    }

    /// `U` from nodal values in `ws.slow` / `ws.fast` and the coefficients of `y`.
    pub(crate) fn potential_nodal(&self, ws: &Workspace, y: &[f64]) -> f64 {
        let q: f64 = ws
            .slow
            .iter()
            .zip(&ws.fast)
            .map(|(&a, &b)| self.g.antiderivative(a, b))
            .sum();
        q * self.grid.weight() + self.g_source.iter().zip(y).map(|(s, c)| s * c).sum::<f64>()
    }

    /// `(⟨G(x, y), k⟩_H, [U(x, y + τk) − U(x, y − τk)] / 2τ)`.
    pub fn potential_gradient_check(
        &self,
        x: &Field,
        y: &Field,
        k: &Field,
        tau: f64,
    ) -> Result<(f64, f64)> {
        if k.basis() != self.fast_basis() {
            return Err(Error::BasisMismatch("direction not on the fast basis"));
        }
        let analytic = self.eval_g(x, y)?.dot(k);
        let mut yp = y.clone();
        yp.axpy(tau, k);
        let mut ym = y.clone();
        ym.axpy(-tau, k);
        let numeric = (self.potential(x, &yp)? - self.potential(x, &ym)?) / (2.0 * tau);
        Ok((analytic, numeric))
    }

    /// `⟨U_x(x, y), k⟩_H = ∫_0^1 ⟨G_x(x, θy) k, y⟩_H dθ`, with an 8-point
    /// Gauss rule in `θ`.
    pub fn potential_x_derivative(&self, x: &Field, y: &Field, k: &Field) -> Result<f64> {
        self.check_pair(x, y)?;
        if k.basis() != self.slow_basis() {
            return Err(Error::BasisMismatch("direction not on the slow basis"));
        }
        let mut ws = self.workspace();
        self.synthesize_slow(x, &mut ws.slow);
        self.synthesize_fast(y, &mut ws.fast);
        self.synthesize_slow(k, &mut ws.vals);
        Ok(self.potential_x_derivative_nodal(&ws.slow, &ws.fast, &ws.vals))
    }

    pub(crate) fn potential_x_derivative_nodal(&self, xn: &[f64], yn: &[f64], kn: &[f64]) -> f64 {
        if !self.g.depends_on_slow() {
            return 0.0;
        }
        let q: f64 = xn
            .iter()
            .zip(yn)
            .zip(kn)
            .map(|((&a, &b), &kv)| {
                let inner = self.theta_rule.integrate(|th| self.g.d_slow(a, th * b));
                inner * kv * b
            })
            .sum();
        q * self.grid.weight()
    }

    /// `⟨D_xF(x, y) k, h⟩_H` from nodal values.
    pub(crate) fn f_slow_derivative_pairing_nodal(
        &self,
        xn: &[f64],
        yn: &[f64],
        kn: &[f64],
        hn: &[f64],
    ) -> f64 {
        let q: f64 = xn
            .iter()
            .zip(yn)
            .zip(kn.iter().zip(hn))
            .map(|((&a, &b), (&kv, &hv))| self.f.d_slow(a, b) * kv * hv)
            .sum();
        q * self.grid.weight()
    }

    /// `⟨D_xF(x, y) k, h⟩_H`.
    pub fn f_slow_derivative_pairing(&self, x: &Field, y: &Field, k: &Field, h: &Field) -> Result<f64> {
        self.check_pair(x, y)?;
        let m = self.grid.n_nodes;
        let (mut xn, mut yn, mut kn, mut hn) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        self.synthesize_slow(x, &mut xn);
        self.synthesize_fast(y, &mut yn);
        self.synthesize_slow(k, &mut kn);
        self.synthesize_slow(h, &mut hn);
        Ok(self.f_slow_derivative_pairing_nodal(&xn, &yn, &kn, &hn))
    }
}

struct TermDisplay<'a>(&'a Term);

impl fmt::Display for TermDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self.0 {
            Term::Linear {
                slow,
                fast,
                constant,
            } => write!(f, "linear(slow={slow}, fast={fast}, constant={constant})"),
            Term::SlowTanh { amplitude, scale } => write!(f, "slow_tanh(a={amplitude}, s={scale})"),
            Term::SlowSin { amplitude, scale } => write!(f, "slow_sin(a={amplitude}, s={scale})"),
            Term::FastTanh { amplitude, scale } => write!(f, "fast_tanh(a={amplitude}, s={scale})"),
            Term::FastSin { amplitude, scale } => write!(f, "fast_sin(a={amplitude}, s={scale})"),
            Term::SumTanh { amplitude } => write!(f, "sum_tanh(a={amplitude})"),
            Term::SineSource {
                amplitude,
                wavenumber,
            } => write!(f, "sine_source(a={amplitude}, k={wavenumber})"),
            Term::SinProduct { amplitude } => write!(f, "sin_product(a={amplitude})"),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        TermDisplay(self).fmt(f)
    }
}

impl fmt::Display for ReactionFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("zero");
        }
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Catalog grammar: `term ("+" term)*` with `term = name [ "(" key=value, … ")" ]`.
///
/// Names: `zero`, `linear(slow, fast, constant)`, `linear_damped(a)`,
/// `constant(c)`, `slow_tanh(a, s)`, `slow_sin(a, s)`, `fast_tanh(a, s)`,
/// `fast_sin(a, s)`, `sum_tanh(a)`, `sine_source(a, k)`, `sin_product(a)`.
/// Omitted keys default to `0`, except scales `s` and wavenumber `k` which
/// default to `1`.
impl FromStr for ReactionFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut terms = Vec::new();
        let mut offset = 0;
        for piece in split_top_level(s) {
            let trimmed = piece.trim();
            let lead = piece.len() - piece.trim_start().len();
            if let Some(t) = parse_term(trimmed, offset + lead)? {
                terms.push(t);
            }
            offset += piece.len() + 1;
        }
        Ok(ReactionFn { terms })
    }
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    let bytes = s.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'(' => depth += 1,
            b')' => depth -= 1,
            // exponent signs sit inside parentheses
            b'+' if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

fn catalog_err(offset: usize, message: String) -> Error {
    Error::Catalog { offset, message }
}

fn parse_term(s: &str, offset: usize) -> Result<Option<Term>> {
    if s.is_empty() {
        return Err(catalog_err(offset, "empty term".into()));
    }
    let (name, args) = match s.find('(') {
        Some(open) => {
            if !s.ends_with(')') {
                return Err(catalog_err(offset + s.len(), "missing closing ')'".into()));
            }
            (s[..open].trim(), Some((&s[open + 1..s.len() - 1], offset + open + 1)))
        }
        None => (s, None),
    };
    let mut params: Vec<(&str, f64, usize)> = Vec::new();
    if let Some((body, body_off)) = args {
        let mut pos = body_off;
        for arg in body.split(',') {
            let a = arg.trim();
            if !a.is_empty() {
                let eq = a
                    .find('=')
                    .ok_or_else(|| catalog_err(pos, format!("expected key=value, got `{a}`")))?;
                let key = a[..eq].trim();
                let val_s = a[eq + 1..].trim();
                let val: f64 = val_s
                    .parse()
                    .map_err(|_| catalog_err(pos, format!("`{val_s}` is not a number")))?;
                params.push((key, val, pos));
            }
            pos += arg.len() + 1;
        }
    }
    let allowed: &[&str] = match name {
        "zero" => &[],
        "linear" => &["slow", "fast", "constant"],
        "linear_damped" => &["a"],
        "constant" => &["c"],
        "slow_tanh" | "slow_sin" | "fast_tanh" | "fast_sin" => &["a", "s"],
        "sum_tanh" | "sin_product" => &["a"],
        "sine_source" => &["a", "k"],
        other => {
            return Err(catalog_err(offset, format!("unknown catalog entry `{other}`")));
        }
    };
    for (key, _, pos) in &params {
        if !allowed.contains(key) {
            return Err(catalog_err(*pos, format!("unknown parameter `{key}` for `{name}`")));
        }
    }
    let get = |key: &str, default: f64| {
        params
            .iter()
            .rev()
            .find(|(k, _, _)| *k == key)
            .map(|(_, v, _)| *v)
            .unwrap_or(default)
    };
    let term = match name {
        "zero" => return Ok(None),
        "linear" => Term::Linear {
            slow: get("slow", 0.0),
            fast: get("fast", 0.0),
            constant: get("constant", 0.0),
        },
        "linear_damped" => Term::Linear {
            slow: 0.0,
            fast: -get("a", 0.0),
            constant: 0.0,
        },
        "constant" => Term::Linear {
            slow: 0.0,
            fast: 0.0,
            constant: get("c", 0.0),
        },
        "slow_tanh" => Term::SlowTanh {
            amplitude: get("a", 0.0),
            scale: get("s", 1.0),
        },
        "slow_sin" => Term::SlowSin {
            amplitude: get("a", 0.0),
            scale: get("s", 1.0),
        },
        "fast_tanh" => Term::FastTanh {
            amplitude: get("a", 0.0),
            scale: get("s", 1.0),
        },
        "fast_sin" => Term::FastSin {
            amplitude: get("a", 0.0),
            scale: get("s", 1.0),
        },
        "sum_tanh" => Term::SumTanh {
            amplitude: get("a", 0.0),
        },
        "sin_product" => Term::SinProduct {
            amplitude: get("a", 0.0),
        },
        "sine_source" => {
            let k = get("k", 1.0);
            if !(k >= 1.0 && libm::trunc(k) == k) {
                return Err(catalog_err(offset, "sine_source wavenumber must be a positive integer".into()));
            }
            Term::SineSource {
                amplitude: get("a", 0.0),
                wavenumber: k as u32,
            }
        }
        _ => unreachable!(),
    };
    if let Term::FastTanh { scale, .. } | Term::FastSin { scale, .. } = term {
        if scale == 0.0 {
            return Err(catalog_err(offset, "scale must be nonzero".into()));
        }
    }
    Ok(Some(term))
}
