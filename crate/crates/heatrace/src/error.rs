//! Error type shared by all modules.
//!
//! Numerical failure modes are first-class: every refusal carries the
//! quantitative evidence (residuals, bounds, suggested remedies) needed to
//! act on it, so callers and CI logs never see a bare "did not converge".

use thiserror::Error;

/// Errors produced by geometry construction, spectral computation,
/// quadrature, and fitting.
#[derive(Debug, Error)]
pub enum HeatraceError {
    /// Manifold or grid data violates a structural requirement.
    #[error("invalid model data: {0}")]
    InvalidModel(String),

    /// Two objects that must share a manifold/grid do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A matrix that must be Hermitian (or anti-Hermitian) deviates beyond
    /// tolerance after symmetrization.
    #[error("hermiticity violation in {context}: correction norm {correction:.3e} exceeds {tolerance:.3e}")]
    Hermiticity {
        context: String,
        correction: f64,
        tolerance: f64,
    },

    /// A pointwise positivity requirement failed (metric not positive
    /// definite, Morse phase not nonnegative, ...).
    #[error("positivity violation in {context} at point {point:?}: {detail}")]
    Positivity {
        context: String,
        point: Vec<f64>,
        detail: String,
    },

    /// An internal cross-check between two independent computation routes
    /// disagreed beyond tolerance.
    #[error("consistency check '{check}' failed: |diff| = {deviation:.3e}, tolerance {tolerance:.3e}")]
    Consistency {
        check: String,
        deviation: f64,
        tolerance: f64,
    },

    /// A truncated spectral sum cannot deliver the requested accuracy.
    #[error(
        "trace tail bound {bound:.3e} exceeds {tolerance:.3e} x |value| at (t,s)=({t:.3e},{s:.3e}); \
         increase mode cutoff to at least {suggested_cutoff}"
    )]
    TailBound {
        t: f64,
        s: f64,
        bound: f64,
        tolerance: f64,
        suggested_cutoff: usize,
    },

    /// An iterative solve (Newton shooting, adaptive quadrature) failed to
    /// converge; the history records the residual per iteration or the
    /// refinement trace.
    #[error("{context} did not converge after {iterations} iterations; residual history {history:?}")]
    NoConvergence {
        context: String,
        iterations: usize,
        history: Vec<f64>,
    },

    /// A least-squares fit is numerically unreliable.
    #[error("ill-conditioned fit ({context}): condition number {condition:.3e} exceeds {limit:.3e}")]
    IllConditioned {
        context: String,
        condition: f64,
        limit: f64,
    },

    /// Input data does not cover the range a quadrature needs.
    #[error(
        "insufficient grid support for {context}: need [{need_lo:.3e}, {need_hi:.3e}], have [{have_lo:.3e}, {have_hi:.3e}]"
    )]
    Support {
        context: String,
        need_lo: f64,
        need_hi: f64,
        have_lo: f64,
        have_hi: f64,
    },

    /// A precondition of a formula is not met by the supplied data.
    #[error("precondition violated for {context}: {detail}")]
    Precondition { context: String, detail: String },

    /// Linear-algebra backend failure (eigensolve did not converge, ...).
    #[error("linear algebra failure in {context}: {detail}")]
    Linalg { context: String, detail: String },

    /// Configuration file is structurally valid JSON but semantically wrong.
    #[error("config error at {path}: {detail}")]
    Config { path: String, detail: String },

    /// I/O failure while reading inputs or writing artifacts.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HeatraceError {
    /// Shorthand for a failed consistency check.
    pub fn consistency(check: &str, deviation: f64, tolerance: f64) -> Self {
        HeatraceError::Consistency {
            check: check.to_string(),
            deviation,
            tolerance,
        }
    }

    /// Shorthand for an invalid-model error.
    pub fn model(msg: impl Into<String>) -> Self {
        HeatraceError::InvalidModel(msg.into())
    }
}
