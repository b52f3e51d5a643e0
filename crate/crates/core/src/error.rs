use alloc::string::String;

/// Failure modes of the numerical core.
///
/// Hypothesis violations are kept apart from ordinary argument errors so
/// front ends can map them to a dedicated exit status.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// The dissipative operator must have a strictly positive spectral gap.
    #[error("spectral gap violation: smallest eigenvalue {min_eigenvalue} must be > 0")]
    NonPositiveSpectrum { min_eigenvalue: f64 },

    /// The fast reaction is not dominated by the spectral gap (`L_g < λ`).
    #[error("hypothesis violation: L_g = {lipschitz_g} must be < λ = {spectral_gap}")]
    HypothesisViolation { lipschitz_g: f64, spectral_gap: f64 },

    /// The reaction `f` must be globally Lipschitz.
    #[error("hypothesis violation: f has an unbounded derivative ({term})")]
    NonLipschitz { term: String },

    #[error("basis mismatch: {0}")]
    BasisMismatch(&'static str),

    #[error("grid has {nodes} nodes, need at least {required}")]
    GridTooCoarse { nodes: usize, required: usize },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("projection index {n} outside 1..={n_modes}")]
    ProjectionOutOfRange { n: usize, n_modes: usize },

    #[error("degenerate fit: {0}")]
    DegenerateFit(&'static str),

    #[error("no closed form available: {0}")]
    NoClosedForm(&'static str),

    #[error("catalog parse error at byte {offset}: {message}")]
    Catalog { offset: usize, message: String },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    /// True for violations of the standing hypotheses of the averaging theory.
    pub fn is_hypothesis_violation(&self) -> bool {
        matches!(
            self,
            Error::NonPositiveSpectrum { .. }
                | Error::HypothesisViolation { .. }
                | Error::NonLipschitz { .. }
        )
    }
}

/// Non-fatal diagnostics attached to estimates.
#[derive(Debug, Clone, PartialEq)]
pub enum Warning {
    /// Effective sample size below the reliability floor.
    LowEffectiveSampleSize { ess: f64, floor: f64 },
    /// pCN acceptance settled outside `[0.1, 0.6]`.
    AcceptanceOutOfRange { rate: f64, suggested_beta: f64 },
    /// Monte Carlo error of an averaged drift exceeded 10% of its norm.
    DriftBudgetExhausted { relative_error: f64, step: usize },
    /// Laplace-transform truncation error exceeded the Monte Carlo error.
    TruncationDominated { truncation: f64, std_error: f64 },
    /// Signal fell below the Monte Carlo noise floor in a rate fit.
    BelowNoiseFloor { time: f64 },
}

impl core::fmt::Display for Warning {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Warning::LowEffectiveSampleSize { ess, floor } => {
                write!(f, "effective sample size {ess:.1} below {floor}")
            }
            Warning::AcceptanceOutOfRange {
                rate,
                suggested_beta,
            } => write!(
                f,
                "pCN acceptance {rate:.3} outside [0.1, 0.6]; try beta = {suggested_beta:.4}"
            ),
            Warning::DriftBudgetExhausted {
                relative_error,
                step,
            } => write!(
                f,
                "averaged drift relative standard error {relative_error:.3} > 0.1 at step {step}"
            ),
            Warning::TruncationDominated {
                truncation,
                std_error,
            } => write!(
                f,
                "truncation error {truncation:.3e} exceeds standard error {std_error:.3e}"
            ),
            Warning::BelowNoiseFloor { time } => {
                write!(f, "signal below Monte Carlo noise floor from t = {time}")
            }
        }
    }
}
