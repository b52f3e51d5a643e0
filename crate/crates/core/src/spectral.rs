//! Analytic eigenbases of constant-coefficient dissipative operators on
//! `(0, L)` and the spectral representation of `H = L²(0, L)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::math::{cos, exp, powf, sin, sqrt, PI};
use crate::Result;

/// Default trace exponent for second-order operators in one space dimension.
pub const DEFAULT_TRACE_EXPONENT: f64 = 0.51;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryCondition {
    /// `Δ` with zero boundary values; `α_k = (kπ/L)²`.
    Dirichlet,
    /// `Δ − m` with zero flux; `α_k = ((k−1)π/L)² + m`.
    ShiftedNeumann { mass: f64 },
}

/// Eigenfunction family of a spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Sine,
    Cosine,
}

/// Identity of an orthonormal basis `{e_1, …, e_N}` of a subspace of `H`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Basis {
    pub family: Family,
    pub length: f64,
    pub n_modes: usize,
}

impl Basis {
    /// `e_k(ξ)` for `k` in `1..=n_modes`.
    pub fn eigenfunction(&self, k: usize, xi: f64) -> f64 {
        debug_assert!(k >= 1);
        let l = self.length;
        match self.family {
            Family::Sine => sqrt(2.0 / l) * sin(k as f64 * PI * xi / l),
            Family::Cosine if k == 1 => 1.0 / sqrt(l),
            Family::Cosine => sqrt(2.0 / l) * cos((k - 1) as f64 * PI * xi / l),
        }
    }

    /// Smallest admissible grid: `2N + 1` nodes.
    pub fn min_grid_nodes(&self) -> usize {
        2 * self.n_modes + 1
    }

    pub fn default_grid(&self) -> Grid {
        Grid {
            length: self.length,
            n_nodes: self.min_grid_nodes(),
        }
    }
}

/// Eigenpairs `(α_k, e_k)` of a dissipative operator, `B e_k = −α_k e_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSpectrum {
    bc: BoundaryCondition,
    basis: Basis,
    eigenvalues: Vec<f64>,
    trace_exponent: f64,
}

impl OperatorSpectrum {
    /// Analytic eigenpairs of the catalog operator on `(0, length)`.
    pub fn build(length: f64, bc: BoundaryCondition, n_modes: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::invalid("n_modes", "need at least one mode"));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::invalid("length", "domain length must be positive"));
        }
        let (family, eigenvalues): (Family, Vec<f64>) = match bc {
            BoundaryCondition::Dirichlet => (
                Family::Sine,
                (1..=n_modes)
                    .map(|k| {
                        let w = k as f64 * PI / length;
                        w * w
                    })
                    .collect(),
            ),
            BoundaryCondition::ShiftedNeumann { mass } => (
                Family::Cosine,
                (1..=n_modes)
                    .map(|k| {
                        let w = (k - 1) as f64 * PI / length;
                        w * w + mass
                    })
                    .collect(),
            ),
        };
        let basis = Basis {
            family,
            length,
            n_modes,
        };
        Self::from_parts(bc, basis, eigenvalues)
    }

    fn from_parts(bc: BoundaryCondition, basis: Basis, eigenvalues: Vec<f64>) -> Result<Self> {
        let min = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) {
            return Err(Error::NonPositiveSpectrum {
                min_eigenvalue: min,
            });
        }
        Ok(Self {
            bc,
            basis,
            eigenvalues,
            trace_exponent: DEFAULT_TRACE_EXPONENT,
        })
    }

    /// The spectrum of `B + shift`, i.e. eigenvalues `α_k − shift`.
    pub fn shifted(&self, shift: f64) -> Result<Self> {
        let eigenvalues = self.eigenvalues.iter().map(|a| a - shift).collect();
        let mut s = Self::from_parts(self.bc, self.basis, eigenvalues)?;
        s.trace_exponent = self.trace_exponent;
        Ok(s)
    }

    pub fn with_trace_exponent(mut self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid("trace_exponent", "must lie in (0, 1)"));
        }
        self.trace_exponent = gamma;
        Ok(self)
    }

    pub fn boundary_condition(&self) -> BoundaryCondition {
        self.bc
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn n_modes(&self) -> usize {
        self.basis.n_modes
    }

    pub fn length(&self) -> f64 {
        self.basis.length
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `α_k`, 1-based.
    pub fn eigenvalue(&self, k: usize) -> f64 {
        self.eigenvalues[k - 1]
    }

    /// `λ = min_k α_k`.
    pub fn spectral_gap(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn trace_exponent(&self) -> f64 {
        self.trace_exponent
    }

    pub fn conforms(&self, x: &Field) -> bool {
        x.basis == self.basis
    }

    fn check(&self, x: &Field) -> Result<()> {
        if self.conforms(x) {
            Ok(())
        } else {
            Err(Error::BasisMismatch("field does not belong to this spectrum"))
        }
    }

    /// `e^{tB} x`.
    pub fn apply_semigroup(&self, x: &Field, t: f64) -> Result<Field> {
        self.check(x)?;
        if !(t >= 0.0) {
            return Err(Error::invalid("t", "semigroup time must be nonnegative"));
        }
        let coeffs = x
            .coeffs
            .iter()
            .zip(&self.eigenvalues)
            .map(|(c, a)| c * exp(-a * t))
            .collect();
        Ok(Field {
            basis: self.basis,
            coeffs,
        })
    }

    /// `Σ_k e^{−t α_k}`, the truncated trace of `e^{tB}`.
    pub fn trace_sum(&self, t: f64) -> f64 {
        self.eigenvalues.iter().map(|a| exp(-a * t)).sum()
    }

    /// `(Σ_k e^{−2 α_k t})^{1/2}`, the truncated Hilbert-Schmidt norm of `e^{tB}`.
    pub fn hilbert_schmidt_decay(&self, t: f64) -> f64 {
        sqrt(self.trace_sum(2.0 * t))
    }

    /// `(t∧1)^{−γ} e^{−λt}`, the shape of the trace bound.
    pub fn trace_envelope(&self, t: f64) -> f64 {
        powf(t.min(1.0), -self.trace_exponent) * exp(-self.spectral_gap() * t)
    }

    /// Smallest `c` with `Σ e^{−tα_k} ≤ c (t∧1)^{−γ} e^{−λt}` on `times`.
    pub fn fit_trace_constant(&self, times: &[f64]) -> f64 {
        times
            .iter()
            .map(|&t| self.trace_sum(t) / self.trace_envelope(t))
            .fold(0.0, f64::max)
    }

    /// Smallest `c` with `|e^{tB}|_2 ≤ c (t∧1)^{−γ/2} e^{−λt}` on `times`.
    pub fn fit_hilbert_schmidt_constant(&self, times: &[f64]) -> f64 {
        let g = self.trace_exponent;
        let lam = self.spectral_gap();
        times
            .iter()
            .map(|&t| self.hilbert_schmidt_decay(t) / (powf(t.min(1.0), -g / 2.0) * exp(-lam * t)))
            .fold(0.0, f64::max)
    }

    /// Range of `α_k / k²` over the stored modes.
    pub fn quadratic_growth_range(&self) -> (f64, f64) {
        self.eigenvalues
            .iter()
            .enumerate()
            .map(|(i, a)| a / ((i + 1) as f64 * (i + 1) as f64))
            .fold((f64::INFINITY, 0.0), |(lo, hi), r| (lo.min(r), hi.max(r)))
    }

    /// `|(I − B)^{a/2} x|_H`.
    pub fn sobolev_norm(&self, x: &Field, a: f64) -> Result<f64> {
        self.check(x)?;
        if !(0.0..=2.0).contains(&a) {
            return Err(Error::invalid("a", "Sobolev exponent must lie in [0, 2]"));
        }
        let s: f64 = x
            .coeffs
            .iter()
            .zip(&self.eigenvalues)
            .map(|(c, al)| powf(1.0 + al, a) * c * c)
            .sum();
        Ok(sqrt(s))
    }

    pub fn zero_field(&self) -> Field {
        Field::zeros(self.basis)
    }
}

/// An element of `H` stored by its coefficients against `{e_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    basis: Basis,
    coeffs: Vec<f64>,
}

impl Field {
    pub fn new(basis: Basis, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != basis.n_modes {
            return Err(Error::BasisMismatch("coefficient count differs from n_modes"));
        }
        Ok(Self { basis, coeffs })
    }

    /// Pads or truncates `leading` to the basis size.
    pub fn from_leading(basis: Basis, leading: &[f64]) -> Self {
        let mut coeffs = vec![0.0; basis.n_modes];
        for (c, v) in coeffs.iter_mut().zip(leading) {
            *c = *v;
        }
        Self { basis, coeffs }
    }

    pub fn zeros(basis: Basis) -> Self {
        Self {
            basis,
            coeffs: vec![0.0; basis.n_modes],
        }
    }

    /// `e_k`, 1-based.
    pub fn unit(basis: Basis, k: usize) -> Self {
        let mut f = Self::zeros(basis);
        f.coeffs[k - 1] = 1.0;
        f
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn n_modes(&self) -> usize {
        self.coeffs.len()
    }

    /// `|x|_H² = Σ c_k²` by orthonormality.
    pub fn norm_sq(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }

    pub fn norm(&self) -> f64 {
        sqrt(self.norm_sq())
    }

    pub fn dot(&self, other: &Field) -> f64 {
        debug_assert_eq!(self.basis, other.basis);
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b).sum()
    }

    pub fn distance(&self, other: &Field) -> f64 {
        debug_assert_eq!(self.basis, other.basis);
        sqrt(
            self.coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| (a - b) * (a - b))
                .sum(),
        )
    }

    /// `P_n x`: keeps the first `n` coefficients.
    pub fn project(&self, n: usize) -> Result<Field> {
        if n == 0 || n > self.n_modes() {
            return Err(Error::ProjectionOutOfRange {
                n,
                n_modes: self.n_modes(),
            });
        }
        let mut out = self.clone();
        for c in &mut out.coeffs[n..] {
            *c = 0.0;
        }
        Ok(out)
    }

    pub fn scaled(&self, s: f64) -> Field {
        Field {
            basis: self.basis,
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &Field) {
        debug_assert_eq!(self.basis, other.basis);
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += s * b;
        }
    }

    pub fn add(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }
}

/// Equispaced midpoint nodes `ξ_j = (j + ½) L / M` with equal weights `L / M`.
///
/// The rule integrates products of two basis functions of index `≤ N`
/// exactly whenever `M ≥ 2N + 1`, for both sine and cosine families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub length: f64,
    pub n_nodes: usize,
}

impl Grid {
    pub fn new(length: f64, n_nodes: usize) -> Self {
        Self { length, n_nodes }
    }

    pub fn node(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.length / self.n_nodes as f64
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_nodes).map(|j| self.node(j))
    }

    pub fn weight(&self) -> f64 {
        self.length / self.n_nodes as f64
    }

    /// Quadrature `Σ_j w f(ξ_j)`.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weight() * values.iter().sum::<f64>()
    }
}

/// Pseudo-spectral transform between coefficients and nodal values.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    basis: Basis,
    grid: Grid,
    // row-major: table[k * M + j] = e_{k+1}(ξ_j)
    table: Vec<f64>,
}

impl Transform {
    pub fn new(basis: Basis, grid: Grid) -> Result<Self> {
        if grid.length != basis.length {
            return Err(Error::BasisMismatch("grid length differs from basis length"));
        }
        if grid.n_nodes < basis.min_grid_nodes() {
            return Err(Error::GridTooCoarse {
                nodes: grid.n_nodes,
                required: basis.min_grid_nodes(),
            });
        }
        let m = grid.n_nodes;
        let mut table = Vec::with_capacity(basis.n_modes * m);
        for k in 1..=basis.n_modes {
            table.extend(grid.nodes().map(|xi| basis.eigenfunction(k, xi)));
        }
        Ok(Self { basis, grid, table })
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Nodal values `Σ_k c_k e_k(ξ_j)` written into `out`.
    pub fn synthesize_into(&self, x: &Field, out: &mut [f64]) {
        debug_assert_eq!(x.basis, self.basis);
        let m = self.grid.n_nodes;
        out[..m].fill(0.0);
        for (row, &c) in self.table.chunks_exact(m).zip(&x.coeffs) {
            if c == 0.0 {
                continue;
            }
            for (o, e) in out.iter_mut().zip(row) {
                *o += c * e;
            }
        }
    }

    pub fn synthesize(&self, x: &Field) -> Result<Vec<f64>> {
        if x.basis != self.basis {
            return Err(Error::BasisMismatch("field basis differs from transform basis"));
        }
        let mut out = vec![0.0; self.grid.n_nodes];
        self.synthesize_into(x, &mut out);
        Ok(out)
    }

    /// Coefficients `Σ_j w v_j e_k(ξ_j)` written into `out`.
    pub fn analyze_into(&self, values: &[f64], out: &mut [f64]) {
        let m = self.grid.n_nodes;
        let w = self.grid.weight();
        for (o, row) in out.iter_mut().zip(self.table.chunks_exact(m)) {
            *o = w * row.iter().zip(values).map(|(e, v)| e * v).sum::<f64>();
        }
    }

    pub fn analyze(&self, values: &[f64]) -> Result<Field> {
        if values.len() != self.grid.n_nodes {
            return Err(Error::BasisMismatch("nodal vector length differs from grid"));
        }
        let mut f = Field::zeros(self.basis);
        self.analyze_into(values, &mut f.coeffs);
        Ok(f)
    }

    /// `e_k(ξ_j)` row for mode `k` (1-based).
    pub fn mode_row(&self, k: usize) -> &[f64] {
        let m = self.grid.n_nodes;
        &self.table[(k - 1) * m..k * m]
    }
}

/// One-shot synthesis on `grid`.
pub fn synthesize(x: &Field, grid: Grid) -> Result<Vec<f64>> {
    Transform::new(x.basis, grid)?.synthesize(x)
}

/// One-shot analysis of nodal `values` on `grid` against the basis of `spectrum`.
pub fn analyze(values: &[f64], grid: Grid, spectrum: &OperatorSpectrum) -> Result<Field> {
    Transform::new(spectrum.basis, grid)?.analyze(values)
}
