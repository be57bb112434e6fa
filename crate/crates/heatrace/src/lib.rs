//! Relative spectral invariants of pairs of elliptic operators.
//!
//! Given two self-adjoint Laplace-type operators `L+`, `L-` (or two Dirac-type
//! operators `D+`, `D-`) acting on sections of a vector bundle over a compact
//! flat manifold, this crate computes the combined heat traces
//!
//! ```text
//! X(t,s) = Tr exp(-t L+) exp(-s L-)
//! Y(t,s) = Tr D+ exp(-t D+^2) D- exp(-s D-^2)
//! ```
//!
//! and the relative invariants built from them,
//!
//! ```text
//! Psi(t,s) = Tr [exp(-t L+) - exp(-t L-)] [exp(-s L+) - exp(-s L-)]
//! Phi(t,s) = Tr [D+ exp(-t D+^2) - D- exp(-t D-^2)]
//!              [D+ exp(-s D+^2) - D- exp(-s D-^2)]
//! ```
//!
//! on two independent routes:
//!
//! * **Spectral route** ([`spectral_engine`]): pseudospectral discretization on
//!   periodic grids, dense Hermitian eigendecomposition, overlap matrices
//!   between the two eigenbases, and truncated double sums with rigorous tail
//!   bounds.
//! * **Geometric route** ([`tensor_core`], [`coeff_engine`]): the short-time
//!   expansion coefficients of `X` and `Y` as integrals of local invariants of
//!   the two geometries, built from the parameter-dependent combined metric
//!   `g^{ij}(t,s) = t g+^{ij} + s g-^{ij}`.
//!
//! The supporting numerical machinery is exposed as its own modules:
//! Laplace-type asymptotics of Gaussian integrals ([`laplace_asym`]), the
//! two-point geometry laboratory for Synge-function coincidence limits
//! ([`synge_lab`]), thermal-kernel quadratures for Bogolyubov invariants
//! ([`bogolyubov`]), and least-squares extraction of expansion coefficients
//! from computed traces ([`fit_harness`]).
//!
//! Conventions used throughout:
//!
//! * Operators act on half-densities, so all L2 inner products are plain
//!   Lebesgue integrals with no metric weight.
//! * Connections are anti-Hermitian matrices per coordinate direction (the
//!   factor `i` is carried inside), potentials are Hermitian.
//! * Heat coefficients are normalized so that
//!   `Tr exp(-eps L) ~ (4 pi eps)^{-n/2} Sum_k eps^k A_k`.

#![forbid(unsafe_code)]

pub mod bogolyubov;
pub mod coeff_engine;
pub mod config;
pub mod error;
pub mod fiber;
pub mod fit_harness;
pub mod grid;
pub mod laplace_asym;
pub mod spectral_engine;
pub mod synge_lab;
pub mod tensor_core;
pub mod tensors;

pub use error::HeatraceError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, HeatraceError>;
