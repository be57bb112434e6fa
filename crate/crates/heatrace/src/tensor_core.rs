//! Combined geometry of an operator pair on a flat periodic manifold.
//!
//! Two Laplace- or Dirac-type operators live on the same model manifold but
//! carry independent inverse metrics `g+^{ij}`, `g-^{ij}`, connections
//! `A+_i`, `A-_i`, and potentials `Q+`, `Q-`. The mixed heat trace
//! `Tr exp(-t L+) exp(-s L-)` is controlled by a two-parameter family of
//! tensors built from both operators at once:
//!
//! ```text
//! g^{ij}(t,s) = t g+^{ij} + s g-^{ij}                combined inverse metric
//! G_{ij}(t,s) = s g+_{ij} + t g-_{ij}                dual metric
//! A_i(t,s)    = g_{ij} (t g+^{jk} A+_k + s g-^{jk} A-_k)
//! C±_i        = A±_i - A_i
//! ```
//!
//! together with the non-compatibility tensors of each input metric relative
//! to the Levi-Civita connection `∇` of `g(t,s)`,
//!
//! ```text
//! K±_{ijk}  = ∇_i g±_{jk}
//! W±^i_{jk} = ½ g±^{im} (K±_{jkm} + K±_{kjm} - K±_{mjk})
//! W±        = ½ log(det g±_{ij} / det g_{ij})
//! W±_j      = W±^i_{ij} = ∇_j W±
//! ```
//!
//! the totally symmetric third- and fourth-order jets `Σ_{ijk}`, `Σ_{ijkl}`
//! of the combined phase function, the auxiliary contractions `N^{jkl}`,
//! `M^{kl}`, `V_{pqijkl}` that enter the second expansion coefficients, and
//! the effective potential `Q(t,s)` of the interpolating operator
//! `t L+ + s L-`.
//!
//! Structural identities are checked at build time rather than assumed:
//! both factorizations `G_{ij} = g+_{ik} g^{kl} g-_{lj} = g-_{ik} g^{kl}
//! g+_{lj}`, the determinant identity `det G = g+ g- / g`, the connection
//! identity `t g+^{ij} C+_j + s g-^{ij} C-_j = 0`, and the agreement of the
//! trace route `W±^i_{ij}` with the gradient route `∇_j W±`. The family is
//! degree-homogeneous: rebuilding at `(λt, λs)` scales `g^{ij}`, `Σ_{ijk}`,
//! `Σ_{ijkl}`, and `Q` by `λ`, scales `N`, `M` by `λ^{-2}`, and leaves
//! `W±^i_{jk}`, `A_i`, and `V` unchanged. Swapping `(t, +) <-> (s, -)`
//! leaves `g`, `G`, `A`, `Σ`, `N`, `M`, and `Q` invariant and swaps the
//! labels of `K±`, `W±`, `C±`.
//!
//! Conventions: connections are anti-Hermitian per coordinate direction (the
//! factor `i` is carried inside them), potentials are Hermitian, and `W±`
//! takes the real logarithm of the ratio of determinants, which is positive
//! because both metrics are positive definite.

use num_complex::Complex64;

use crate::error::HeatraceError;
use crate::fiber::{CMat, EndoField};
use crate::grid::Grid;
use crate::tensors::{for_each_index, Tab, TensorField};
use crate::Result;

/// Relative tolerance for consistency checks that compare two independent
/// differentiation routes of the same field. Violations indicate an
/// under-resolved grid rather than a programming error.
pub const CONSISTENCY_TOL: f64 = 1e-9;

/// Relative tolerance for identities that hold to rounding error because no
/// differentiation is involved (factorizations, determinant identity,
/// connection identity).
const ALGEBRAIC_TOL: f64 = 1e-11;

/// Absolute-scale tolerance for Dirac-structure checks that involve one
/// spectral derivative.
const DIRAC_TOL: f64 = 1e-8;

fn re(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

/// Topological type of the model manifold.
#[derive(Debug, Clone, PartialEq)]
pub enum ManifoldKind {
    /// Circle of the given circumference.
    Circle { circumference: f64 },
    /// Flat torus with the given period lattice.
    FlatTorus { periods: Vec<f64> },
}

/// A compact flat manifold (circle or torus) with its sampling grid.
#[derive(Debug, Clone)]
pub struct ModelManifold {
    kind: ManifoldKind,
    grid: Grid,
}

impl ModelManifold {
    /// Circle of the given circumference, sampled at `points` points.
    pub fn circle(points: usize, circumference: f64) -> Result<ModelManifold> {
        Ok(ModelManifold {
            kind: ManifoldKind::Circle { circumference },
            grid: Grid::circle(points, circumference)?,
        })
    }

    /// Flat torus with `shape[d]` points and period `periods[d]` per axis.
    pub fn flat_torus(shape: &[usize], periods: &[f64]) -> Result<ModelManifold> {
        Ok(ModelManifold {
            kind: ManifoldKind::FlatTorus {
                periods: periods.to_vec(),
            },
            grid: Grid::new(shape, periods)?,
        })
    }

    /// Topological type.
    pub fn kind(&self) -> &ManifoldKind {
        &self.kind
    }

    /// Sampling grid.
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Manifold dimension (1 or 2).
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// Total number of grid points.
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    /// Always false; a valid grid has at least eight points per axis.
    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Whether another manifold is sampled on an identical grid.
    pub fn same_layout(&self, other: &ModelManifold) -> bool {
        self.grid.shape() == other.grid.shape() && self.grid.periods() == other.grid.periods()
    }
}

/// Dirac structure attached to an operator geometry.
///
/// `gammas[a]` are constant frame matrices with `γ^a γ^b + γ^b γ^a =
/// 2 δ^{ab} I`. The frame field `e^i_a(x)` converts them to coordinate
/// Dirac matrices `γ^i(x) = e^i_a(x) γ^a` with `γ^i γ^j + γ^j γ^i =
/// 2 g^{ij} I`, and `s_field` is the Hermitian zero-order term, which
/// anticommutes with every `γ^i`.
#[derive(Debug, Clone)]
pub struct DiracData {
    /// Constant frame Dirac matrices, one per dimension.
    pub gammas: Vec<CMat>,
    /// Frame field `e^i_a`, rank-2 slots `(i, a)`.
    pub frame: TensorField,
    /// Hermitian zero-order term.
    pub s_field: EndoField,
}

/// One operator's geometric data on a model manifold.
///
/// Construction sanitizes the inputs: the inverse metric is symmetrized,
/// connection components are projected onto their anti-Hermitian parts, the
/// potential (and the Dirac zero-order term) onto their Hermitian parts.
/// Every correction norm is recorded and available via [`corrections`].
///
/// [`corrections`]: OperatorGeometry::corrections
#[derive(Debug, Clone)]
pub struct OperatorGeometry {
    manifold: ModelManifold,
    inverse_metric: TensorField,
    metric: TensorField,
    det: Vec<f64>,
    christoffel: TensorField,
    connection: Vec<EndoField>,
    potential: EndoField,
    fiber_dim: usize,
    dirac: Option<DiracData>,
    corrections: Vec<(String, f64)>,
}

impl OperatorGeometry {
    /// Validate and store an operator geometry.
    ///
    /// # Errors
    ///
    /// [`HeatraceError::InvalidModel`] when field shapes do not match the
    /// manifold, [`HeatraceError::Positivity`] when the inverse metric fails
    /// to be positive definite at some grid point (the point is reported),
    /// and [`HeatraceError::Consistency`] when a Dirac structure violates
    /// the frame anticommutation relations, fails to reproduce the inverse
    /// metric, does not anticommute with the zero-order term, or is not
    /// covariantly constant for the stated connection.
    pub fn new(
        manifold: ModelManifold,
        inverse_metric: TensorField,
        connection: Vec<EndoField>,
        potential: EndoField,
        dirac: Option<DiracData>,
    ) -> Result<OperatorGeometry> {
        let n = manifold.dim();
        let npts = manifold.len();
        if inverse_metric.len() != npts || inverse_metric.n() != n || inverse_metric.rank() != 2 {
            return Err(HeatraceError::model(format!(
                "inverse metric must be a rank-2 field with {npts} points in dimension {n}, \
                 got {} points, dimension {}, rank {}",
                inverse_metric.len(),
                inverse_metric.n(),
                inverse_metric.rank()
            )));
        }
        if connection.len() != n {
            return Err(HeatraceError::model(format!(
                "need one connection component per dimension ({n}), got {}",
                connection.len()
            )));
        }
        let fiber_dim = potential.fiber();
        if potential.len() != npts {
            return Err(HeatraceError::model(format!(
                "potential has {} points, manifold has {npts}",
                potential.len()
            )));
        }
        for (d, a) in connection.iter().enumerate() {
            if a.len() != npts || a.fiber() != fiber_dim {
                return Err(HeatraceError::model(format!(
                    "connection[{d}] has {} points and fiber {}, expected {npts} and {fiber_dim}",
                    a.len(),
                    a.fiber()
                )));
            }
        }

        let mut corrections = Vec::new();
        let mut inverse_metric = inverse_metric;
        let sym = symmetrize_rank2(&mut inverse_metric);
        corrections.push(("inverse metric symmetrization".to_string(), sym));
        let (metric, det_inv) =
            invert_spd_field(manifold.grid(), &inverse_metric, "operator inverse metric")?;
        let det: Vec<f64> = det_inv.iter().map(|&d| 1.0 / d).collect();

        let mut connection = connection;
        for (d, a) in connection.iter_mut().enumerate() {
            let corr = a.anti_hermitize();
            corrections.push((format!("connection[{d}] anti-Hermitian projection"), corr));
        }
        let mut potential = potential;
        let corr = potential.hermitize();
        corrections.push(("potential Hermitian projection".to_string(), corr));

        let christoffel = christoffel_field(manifold.grid(), &inverse_metric, &metric);

        let dirac = match dirac {
            None => None,
            Some(mut d) => {
                validate_dirac(
                    &manifold,
                    &inverse_metric,
                    &christoffel,
                    &connection,
                    fiber_dim,
                    &mut d,
                    &mut corrections,
                )?;
                Some(d)
            }
        };

        Ok(OperatorGeometry {
            manifold,
            inverse_metric,
            metric,
            det,
            christoffel,
            connection,
            potential,
            fiber_dim,
            dirac,
            corrections,
        })
    }

    /// Underlying manifold.
    pub fn manifold(&self) -> &ModelManifold {
        &self.manifold
    }

    /// Sampling grid.
    pub fn grid(&self) -> &Grid {
        self.manifold.grid()
    }

    /// Inverse metric field `g^{ij}`.
    pub fn inverse_metric(&self) -> &TensorField {
        &self.inverse_metric
    }

    /// Metric field `g_{ij}`.
    pub fn metric(&self) -> &TensorField {
        &self.metric
    }

    /// Determinant `det g_{ij}` per grid point.
    pub fn det(&self) -> &[f64] {
        &self.det
    }

    /// Half-density weight `(det g_{ij})^{1/2}` per grid point.
    pub fn sqrt_det(&self) -> Vec<f64> {
        self.det.iter().map(|&d| d.sqrt()).collect()
    }

    /// Christoffel symbols `Γ^k_{ij}` of this operator's own metric,
    /// rank-3 slots `(k, i, j)`.
    pub fn christoffel(&self) -> &TensorField {
        &self.christoffel
    }

    /// Connection components `A_i`, anti-Hermitian.
    pub fn connection(&self) -> &[EndoField] {
        &self.connection
    }

    /// Potential `Q`, Hermitian.
    pub fn potential(&self) -> &EndoField {
        &self.potential
    }

    /// Fiber dimension.
    pub fn fiber_dim(&self) -> usize {
        self.fiber_dim
    }

    /// Dirac structure, when present.
    pub fn dirac(&self) -> Option<&DiracData> {
        self.dirac.as_ref()
    }

    /// Recorded sanitization corrections, one `(label, norm)` entry per
    /// projected input field.
    pub fn corrections(&self) -> &[(String, f64)] {
        &self.corrections
    }

    /// Coordinate Dirac matrices `γ^i(x) = e^i_a(x) γ^a`, one field per
    /// direction, when a Dirac structure is present.
    pub fn gamma_field(&self) -> Option<Vec<EndoField>> {
        self.dirac
            .as_ref()
            .map(|d| build_gamma_field(&d.frame, &d.gammas, self.fiber_dim))
    }
}

/// Every `(t,s)`-dependent tensor of an operator pair.
///
/// Rank-3 and higher fields document their slot order; an upper index is
/// always stored before lower ones.
#[derive(Debug, Clone)]
pub struct CombinedGeometry {
    /// Weight of the `+` operator.
    pub t: f64,
    /// Weight of the `-` operator.
    pub s: f64,
    /// Fiber dimension shared by both operators.
    pub fiber_dim: usize,
    /// Sampling grid shared by both operators.
    pub grid: Grid,
    /// Combined inverse metric `g^{ij}(t,s)`.
    pub g_inv: TensorField,
    /// Combined metric `g_{ij}(t,s)`.
    pub g_met: TensorField,
    /// Determinant `det g_{ij}` per point.
    pub g_det: Vec<f64>,
    /// Half-density weight `(det g_{ij})^{1/2}` per point.
    pub g_half: Vec<f64>,
    /// Dual metric `G_{ij} = s g+_{ij} + t g-_{ij}`.
    pub dual_met: TensorField,
    /// Inverse dual metric `G^{ij}`.
    pub dual_inv: TensorField,
    /// Determinant `det G_{ij}` per point.
    pub dual_det: Vec<f64>,
    /// Christoffel symbols `Γ^k_{ij}` of `g(t,s)`, slots `(k, i, j)`.
    pub christoffel: TensorField,
    /// Combined connection `A_i(t,s)`, anti-Hermitian.
    pub a_comb: Vec<EndoField>,
    /// Difference `C+_i = A+_i - A_i`.
    pub c_plus: Vec<EndoField>,
    /// Difference `C-_i = A-_i - A_i`.
    pub c_minus: Vec<EndoField>,
    /// Non-compatibility `K+_{ijk} = ∇_i g+_{jk}`, slots `(i, j, k)`,
    /// symmetric in `(j, k)`.
    pub k_plus: TensorField,
    /// Non-compatibility `K-_{ijk}`, slots `(i, j, k)`.
    pub k_minus: TensorField,
    /// Connection difference `W+^i_{jk}`, slots `(i, j, k)`; equals the
    /// Christoffel symbols of `g+` minus those of `g(t,s)`.
    pub w_conn_plus: TensorField,
    /// Connection difference `W-^i_{jk}`, slots `(i, j, k)`.
    pub w_conn_minus: TensorField,
    /// Trace vector `W+_j = W+^i_{ij}`.
    pub w_vec_plus: TensorField,
    /// Trace vector `W-_j`.
    pub w_vec_minus: TensorField,
    /// Scalar `W+ = ½ log(det g+_{ij} / det g_{ij})` per point.
    pub w_plus: Vec<f64>,
    /// Scalar `W-` per point.
    pub w_minus: Vec<f64>,
    /// Mean vector `W_i = ½ (W+_i + W-_i)`.
    pub w_vec: TensorField,
    /// Covariant Hessian `W_{ij} = ½ ∇_i ∇_j (W+ + W-)`, symmetric.
    pub w_hess: TensorField,
    /// Totally symmetric third jet `Σ_{ijk} = (3/2)(s K+ + t K-)_{(ijk)}`.
    pub sigma3: TensorField,
    /// Totally symmetric fourth jet `Σ_{ijkl} = s S+_{ijkl} + t S-_{ijkl}`.
    pub sigma4: TensorField,
    /// Auxiliary tensor `N^{jkl}`, stored totally symmetrized.
    pub n_aux: TensorField,
    /// Auxiliary tensor `M^{kl}`, stored symmetrized.
    pub m_aux: TensorField,
    /// Auxiliary tensor `V_{pqijkl}`, slots `(p, q, i, j, k, l)`,
    /// symmetrized over `(i, j, k, l)`.
    pub v6: TensorField,
    /// Effective potential `Q(t,s)` of `t L+ + s L-`, Hermitian.
    pub q_comb: EndoField,
}

impl CombinedGeometry {
    /// Build every `(t,s)`-dependent tensor for an operator pair.
    ///
    /// Boundary weights are allowed: `t >= 0`, `s >= 0` with `t + s > 0`,
    /// and `(t,s) = (1,0)` reproduces the `+` geometry exactly.
    ///
    /// # Errors
    ///
    /// [`HeatraceError::GridMismatch`] when the two operators live on
    /// different grids or fibers, [`HeatraceError::Precondition`] for
    /// out-of-domain weights, [`HeatraceError::Consistency`] when an
    /// internal cross-check fails (for smooth inputs this indicates an
    /// under-resolved grid), and [`HeatraceError::Positivity`] when a
    /// derived metric loses positivity.
    pub fn build(
        plus: &OperatorGeometry,
        minus: &OperatorGeometry,
        t: f64,
        s: f64,
    ) -> Result<CombinedGeometry> {
        if !plus.manifold.same_layout(&minus.manifold) {
            return Err(HeatraceError::GridMismatch(format!(
                "operator pair lives on different grids: shape {:?} periods {:?} vs shape {:?} periods {:?}",
                plus.grid().shape(),
                plus.grid().periods(),
                minus.grid().shape(),
                minus.grid().periods()
            )));
        }
        if plus.fiber_dim != minus.fiber_dim {
            return Err(HeatraceError::GridMismatch(format!(
                "fiber dimensions differ: {} vs {}",
                plus.fiber_dim, minus.fiber_dim
            )));
        }
        if !t.is_finite() || !s.is_finite() || t < 0.0 || s < 0.0 || t + s <= 0.0 {
            return Err(HeatraceError::Precondition {
                context: "combined geometry weights".to_string(),
                detail: format!("need t >= 0, s >= 0, t + s > 0, got t = {t}, s = {s}"),
            });
        }

        let grid = plus.grid().clone();
        let n = grid.dim();
        let npts = grid.len();
        let fiber = plus.fiber_dim;
        let gp_inv = &plus.inverse_metric;
        let gm_inv = &minus.inverse_metric;
        let gp_met = &plus.metric;
        let gm_met = &minus.metric;

        // Combined metric family.
        let g_inv = TensorField::from_fn(npts, n, 2, |p, idx| {
            t * gp_inv.at(p, idx) + s * gm_inv.at(p, idx)
        });
        let (g_met, g_inv_det) = invert_spd_field(&grid, &g_inv, "combined inverse metric")?;
        let g_det: Vec<f64> = g_inv_det.iter().map(|&d| 1.0 / d).collect();
        let g_half: Vec<f64> = g_det.iter().map(|&d| d.sqrt()).collect();

        // Dual metric, with both sandwich factorizations cross-checked
        // against the sum form.
        let dual_met = TensorField::from_fn(npts, n, 2, |p, idx| {
            s * gp_met.at(p, idx) + t * gm_met.at(p, idx)
        });
        let scale = dual_met.max_abs().max(1.0);
        let mut worst = 0.0f64;
        for p in 0..npts {
            for_each_index(n, 2, |ij| {
                let (i, j) = (ij[0], ij[1]);
                let mut f1 = 0.0;
                let mut f2 = 0.0;
                for k in 0..n {
                    for l in 0..n {
                        f1 += gp_met.at(p, &[i, k]) * g_inv.at(p, &[k, l]) * gm_met.at(p, &[l, j]);
                        f2 += gm_met.at(p, &[i, k]) * g_inv.at(p, &[k, l]) * gp_met.at(p, &[l, j]);
                    }
                }
                let g = dual_met.at(p, ij);
                worst = worst.max((f1 - g).abs()).max((f2 - g).abs());
            });
        }
        if worst > ALGEBRAIC_TOL * scale {
            return Err(HeatraceError::consistency(
                "dual metric sandwich factorizations",
                worst,
                ALGEBRAIC_TOL * scale,
            ));
        }
        let (dual_inv, dual_det) = invert_spd_field(&grid, &dual_met, "dual metric")?;
        let scale_up = dual_inv.max_abs().max(1.0);
        let mut worst = 0.0f64;
        for p in 0..npts {
            for_each_index(n, 2, |ij| {
                let (i, j) = (ij[0], ij[1]);
                let mut f1 = 0.0;
                let mut f2 = 0.0;
                for k in 0..n {
                    for l in 0..n {
                        f1 += gm_inv.at(p, &[i, k]) * g_met.at(p, &[k, l]) * gp_inv.at(p, &[l, j]);
                        f2 += gp_inv.at(p, &[i, k]) * g_met.at(p, &[k, l]) * gm_inv.at(p, &[l, j]);
                    }
                }
                let g = dual_inv.at(p, ij);
                worst = worst.max((f1 - g).abs()).max((f2 - g).abs());
            });
        }
        if worst > ALGEBRAIC_TOL * scale_up {
            return Err(HeatraceError::consistency(
                "inverse dual metric sandwich factorizations",
                worst,
                ALGEBRAIC_TOL * scale_up,
            ));
        }
        let mut worst = 0.0f64;
        for p in 0..npts {
            let expect = plus.det[p] * minus.det[p] / g_det[p];
            worst = worst.max((dual_det[p] - expect).abs() / expect.abs().max(1e-300));
        }
        if worst > ALGEBRAIC_TOL {
            return Err(HeatraceError::consistency(
                "det G = det g+ det g- / det g",
                worst,
                ALGEBRAIC_TOL,
            ));
        }

        // Combined connection and the differences C±.
        let mut a_comb = Vec::with_capacity(n);
        for i in 0..n {
            a_comb.push(EndoField::from_fn(npts, fiber, |p| {
                let mut m = CMat::zeros(fiber);
                for j in 0..n {
                    for k in 0..n {
                        let gij = g_met.at(p, &[i, j]);
                        m.axpy(
                            re(t * gij * gp_inv.at(p, &[j, k])),
                            &plus.connection[k].get(p),
                        );
                        m.axpy(
                            re(s * gij * gm_inv.at(p, &[j, k])),
                            &minus.connection[k].get(p),
                        );
                    }
                }
                m
            }));
        }
        let diff = |base: &[EndoField], comb: &[EndoField]| -> Vec<EndoField> {
            (0..n)
                .map(|i| {
                    EndoField::from_fn(npts, fiber, |p| {
                        let mut m = base[i].get(p);
                        m.axpy(re(-1.0), &comb[i].get(p));
                        m
                    })
                })
                .collect()
        };
        let c_plus = diff(&plus.connection, &a_comb);
        let c_minus = diff(&minus.connection, &a_comb);
        let conn_scale = 1.0
            + plus
                .connection
                .iter()
                .chain(&minus.connection)
                .map(|a| a.max_norm())
                .fold(0.0, f64::max);
        let mut worst = 0.0f64;
        for p in 0..npts {
            for i in 0..n {
                let mut m = CMat::zeros(fiber);
                for j in 0..n {
                    m.axpy(re(t * gp_inv.at(p, &[i, j])), &c_plus[j].get(p));
                    m.axpy(re(s * gm_inv.at(p, &[i, j])), &c_minus[j].get(p));
                }
                worst = worst.max(m.norm());
            }
        }
        if worst > 1e-12 * conn_scale {
            return Err(HeatraceError::consistency(
                "t g+^{ij} C+_j + s g-^{ij} C-_j = 0",
                worst,
                1e-12 * conn_scale,
            ));
        }

        // Levi-Civita connection of g(t,s) and the non-compatibility
        // tensors of the two input metrics.
        let christoffel = christoffel_field(&grid, &g_inv, &g_met);
        let dgp: Vec<TensorField> = (0..n).map(|d| deriv_tensor(&grid, gp_met, d)).collect();
        let dgm: Vec<TensorField> = (0..n).map(|d| deriv_tensor(&grid, gm_met, d)).collect();
        let k_plus = noncompat_k(gp_met, &dgp, &christoffel);
        let k_minus = noncompat_k(gm_met, &dgm, &christoffel);
        let w_conn_plus = w_connection(gp_inv, &k_plus);
        let w_conn_minus = w_connection(gm_inv, &k_minus);

        let w_plus: Vec<f64> = (0..npts)
            .map(|p| 0.5 * (plus.det[p] / g_det[p]).ln())
            .collect();
        let w_minus: Vec<f64> = (0..npts)
            .map(|p| 0.5 * (minus.det[p] / g_det[p]).ln())
            .collect();
        let trace_vec = |w: &TensorField| {
            TensorField::from_fn(npts, n, 1, |p, idx| {
                (0..n).map(|i| w.at(p, &[i, i, idx[0]])).sum()
            })
        };
        let w_vec_plus = trace_vec(&w_conn_plus);
        let w_vec_minus = trace_vec(&w_conn_minus);
        check_w_routes(&grid, &w_plus, &w_vec_plus, "W+")?;
        check_w_routes(&grid, &w_minus, &w_vec_minus, "W-")?;

        let w_vec = TensorField::from_fn(npts, n, 1, |p, idx| {
            0.5 * (w_vec_plus.at(p, idx) + w_vec_minus.at(p, idx))
        });
        let omega: Vec<f64> = (0..npts).map(|p| w_plus[p] + w_minus[p]).collect();
        let domega: Vec<Vec<f64>> = (0..n).map(|d| grid.deriv(&omega, d)).collect();
        let mut w_hess = TensorField::zeros(npts, n, 2);
        for i in 0..n {
            for j in 0..n {
                let d2 = grid.deriv(&domega[j], i);
                for p in 0..npts {
                    let mut v = d2[p];
                    for k in 0..n {
                        v -= christoffel.at(p, &[k, i, j]) * domega[k][p];
                    }
                    w_hess.set(p, &[i, j], 0.5 * v);
                }
            }
        }
        w_hess.symmetrize(&[0, 1]);

        // Symmetric jets of the combined phase function.
        let mut sigma3 = TensorField::from_fn(npts, n, 3, |p, idx| {
            1.5 * (s * k_plus.at(p, idx) + t * k_minus.at(p, idx))
        });
        sigma3.symmetrize(&[0, 1, 2]);
        let cdw_plus = covariant_dw(&grid, &w_conn_plus, &christoffel);
        let cdw_minus = covariant_dw(&grid, &w_conn_minus, &christoffel);
        let s4_plus = s_tensor(gp_met, &w_conn_plus, &cdw_plus);
        let s4_minus = s_tensor(gm_met, &w_conn_minus, &cdw_minus);
        let sigma4 = TensorField::from_fn(npts, n, 4, |p, idx| {
            s * s4_plus.at(p, idx) + t * s4_minus.at(p, idx)
        });

        // Auxiliary contractions.
        let n_aux = aux_n_field(&dual_inv, &w_vec, &sigma3);
        let m_aux = aux_m_field(&dual_inv, &w_vec, &w_hess, &sigma3, &sigma4);
        let v6 = aux_v_field(
            gp_met,
            gm_met,
            &w_conn_plus,
            &w_conn_minus,
            &cdw_plus,
            &cdw_minus,
        );

        // Effective potential of t L+ + s L-.
        let divergence = |ginv_op: &TensorField, wv: &TensorField| -> Vec<f64> {
            let mut div = vec![0.0; npts];
            for j in 0..n {
                let mut comp = vec![0.0; npts];
                for (p, c) in comp.iter_mut().enumerate() {
                    let mut x = 0.0;
                    for i in 0..n {
                        x += ginv_op.at(p, &[j, i]) * wv.at(p, &[i]);
                    }
                    *c = g_half[p] * x;
                }
                let d = grid.deriv(&comp, j);
                for (p, acc) in div.iter_mut().enumerate() {
                    *acc += d[p] / g_half[p];
                }
            }
            div
        };
        let div_p = divergence(gp_inv, &w_vec_plus);
        let div_m = divergence(gm_inv, &w_vec_minus);
        let quad = |ginv_op: &TensorField, wv: &TensorField, p: usize| -> f64 {
            let mut x = 0.0;
            for i in 0..n {
                for j in 0..n {
                    x += ginv_op.at(p, &[i, j]) * wv.at(p, &[i]) * wv.at(p, &[j]);
                }
            }
            x
        };
        let mut q_comb = EndoField::from_fn(npts, fiber, |p| {
            let mut m = plus.potential.get(p).scale_re(t);
            m.axpy(re(s), &minus.potential.get(p));
            for i in 0..n {
                for j in 0..n {
                    let cp = &c_plus[i].get(p) * &c_plus[j].get(p);
                    m.axpy(re(-t * gp_inv.at(p, &[i, j])), &cp);
                    let cm = &c_minus[i].get(p) * &c_minus[j].get(p);
                    m.axpy(re(-s * gm_inv.at(p, &[i, j])), &cm);
                }
            }
            let w_scalar = 0.5 * t * div_p[p]
                + 0.25 * t * quad(gp_inv, &w_vec_plus, p)
                + 0.5 * s * div_m[p]
                + 0.25 * s * quad(gm_inv, &w_vec_minus, p);
            m.axpy(re(w_scalar), &CMat::identity(fiber));
            m
        });
        let q_scale = q_comb.max_norm().max(1.0);
        let herm = q_comb.hermitize();
        if herm > 1e-10 * q_scale {
            return Err(HeatraceError::Hermiticity {
                context: "combined effective potential".to_string(),
                correction: herm,
                tolerance: 1e-10 * q_scale,
            });
        }

        Ok(CombinedGeometry {
            t,
            s,
            fiber_dim: fiber,
            grid,
            g_inv,
            g_met,
            g_det,
            g_half,
            dual_met,
            dual_inv,
            dual_det,
            christoffel,
            a_comb,
            c_plus,
            c_minus,
            k_plus,
            k_minus,
            w_conn_plus,
            w_conn_minus,
            w_vec_plus,
            w_vec_minus,
            w_plus,
            w_minus,
            w_vec,
            w_hess,
            sigma3,
            sigma4,
            n_aux,
            m_aux,
            v6,
            q_comb,
        })
    }
}

/// Combined inverse metric, metric, and half-density weight.
pub fn combined_metric(
    plus: &OperatorGeometry,
    minus: &OperatorGeometry,
    t: f64,
    s: f64,
) -> Result<(TensorField, TensorField, Vec<f64>)> {
    let cg = CombinedGeometry::build(plus, minus, t, s)?;
    Ok((cg.g_inv, cg.g_met, cg.g_half))
}

/// Dual metric and its inverse.
pub fn dual_metric(
    plus: &OperatorGeometry,
    minus: &OperatorGeometry,
    t: f64,
    s: f64,
) -> Result<(TensorField, TensorField)> {
    let cg = CombinedGeometry::build(plus, minus, t, s)?;
    Ok((cg.dual_met, cg.dual_inv))
}

/// Combined connection and the two differences `C±_i`.
#[allow(clippy::type_complexity)]
pub fn combined_connection(
    plus: &OperatorGeometry,
    minus: &OperatorGeometry,
    t: f64,
    s: f64,
) -> Result<(Vec<EndoField>, Vec<EndoField>, Vec<EndoField>)> {
    let cg = CombinedGeometry::build(plus, minus, t, s)?;
    Ok((cg.a_comb, cg.c_plus, cg.c_minus))
}

/// Non-compatibility tensors of an operator pair.
#[derive(Debug, Clone)]
pub struct NoncompatTensors {
    /// `K+_{ijk}`, slots `(i, j, k)`.
    pub k_plus: TensorField,
    /// `K-_{ijk}`, slots `(i, j, k)`.
    pub k_minus: TensorField,
    /// `W+^i_{jk}`, slots `(i, j, k)`.
    pub w_conn_plus: TensorField,
    /// `W-^i_{jk}`, slots `(i, j, k)`.
    pub w_conn_minus: TensorField,
    /// `W+_j`.
    pub w_vec_plus: TensorField,
    /// `W-_j`.
    pub w_vec_minus: TensorField,
    /// Scalar `W+` per point.
    pub w_plus: Vec<f64>,
    /// Scalar `W-` per point.
    pub w_minus: Vec<f64>,
    /// Mean vector `W_i`.
    pub w_vec: TensorField,
    /// Covariant Hessian `W_{ij}`.
    pub w_hess: TensorField,
}

/// Non-compatibility tensors `K±`, `W±`, and the derived mean fields.
pub fn noncompat_tensors(
    plus: &OperatorGeometry,
    minus: &OperatorGeometry,
    t: f64,
    s: f64,
) -> Result<NoncompatTensors> {
    let cg = CombinedGeometry::build(plus, minus, t, s)?;
    Ok(NoncompatTensors {
        k_plus: cg.k_plus,
        k_minus: cg.k_minus,
        w_conn_plus: cg.w_conn_plus,
        w_conn_minus: cg.w_conn_minus,
        w_vec_plus: cg.w_vec_plus,
        w_vec_minus: cg.w_vec_minus,
        w_plus: cg.w_plus,
        w_minus: cg.w_minus,
        w_vec: cg.w_vec,
        w_hess: cg.w_hess,
    })
}

/// Totally symmetric jets `Σ_{ijk}` and `Σ_{ijkl}`.
pub fn sigma_tensors(
    plus: &OperatorGeometry,
    minus: &OperatorGeometry,
    t: f64,
    s: f64,
) -> Result<(TensorField, TensorField)> {
    let cg = CombinedGeometry::build(plus, minus, t, s)?;
    Ok((cg.sigma3, cg.sigma4))
}

/// Auxiliary contractions `N^{jkl}`, `M^{kl}`, `V_{pqijkl}`.
pub fn aux_tensors(
    plus: &OperatorGeometry,
    minus: &OperatorGeometry,
    t: f64,
    s: f64,
) -> Result<(TensorField, TensorField, TensorField)> {
    let cg = CombinedGeometry::build(plus, minus, t, s)?;
    Ok((cg.n_aux, cg.m_aux, cg.v6))
}

/// Effective potential `Q(t,s)` of `t L+ + s L-`.
pub fn effective_potential(
    plus: &OperatorGeometry,
    minus: &OperatorGeometry,
    t: f64,
    s: f64,
) -> Result<EndoField> {
    let cg = CombinedGeometry::build(plus, minus, t, s)?;
    Ok(cg.q_comb)
}

/// Christoffel symbols `Γ^k_{ij} = ½ g^{kl} (∂_i g_{jl} + ∂_j g_{il} -
/// ∂_l g_{ij})` of a metric field, rank-3 slots `(k, i, j)`.
pub fn christoffel_field(grid: &Grid, g_inv: &TensorField, g_met: &TensorField) -> TensorField {
    let n = grid.dim();
    let npts = grid.len();
    let dg: Vec<TensorField> = (0..n).map(|d| deriv_tensor(grid, g_met, d)).collect();
    let mut out = TensorField::zeros(npts, n, 3);
    for p in 0..npts {
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for l in 0..n {
                        acc += g_inv.at(p, &[k, l])
                            * (dg[i].at(p, &[j, l]) + dg[j].at(p, &[i, l]) - dg[l].at(p, &[i, j]));
                    }
                    out.set(p, &[k, i, j], 0.5 * acc);
                }
            }
        }
    }
    out
}

/// Componentwise spectral derivative of a tensor field along `dim`.
fn deriv_tensor(grid: &Grid, f: &TensorField, dim: usize) -> TensorField {
    let n = f.n();
    let rank = f.rank();
    let npts = f.len();
    let mut out = TensorField::zeros(npts, n, rank);
    for_each_index(n, rank, |idx| {
        let comp = f.component(idx);
        let d = grid.deriv(&comp, dim);
        for (p, v) in d.iter().enumerate() {
            out.set(p, idx, *v);
        }
    });
    out
}

/// Entrywise spectral derivative of an endomorphism field along `dim`.
pub(crate) fn deriv_endo(grid: &Grid, f: &EndoField, dim: usize) -> EndoField {
    let fib = f.fiber();
    let npts = f.len();
    let per_entry: Vec<Vec<Complex64>> = (0..fib * fib)
        .map(|e| {
            let col: Vec<Complex64> = (0..npts).map(|p| f.block(p)[e]).collect();
            grid.deriv_c(&col, dim)
        })
        .collect();
    EndoField::from_fn(npts, fib, |p| {
        CMat::from_fn(fib, |r, c| per_entry[r * fib + c][p])
    })
}

/// Average the off-diagonal pair of a rank-2 field in place; returns the
/// largest adjustment.
fn symmetrize_rank2(f: &mut TensorField) -> f64 {
    if f.n() == 1 {
        return 0.0;
    }
    let mut worst = 0.0f64;
    for p in 0..f.len() {
        let a = f.at(p, &[0, 1]);
        let b = f.at(p, &[1, 0]);
        let m = 0.5 * (a + b);
        worst = worst.max((a - m).abs());
        f.set(p, &[0, 1], m);
        f.set(p, &[1, 0], m);
    }
    worst
}

/// Pointwise inverse of a symmetric positive definite rank-2 field.
/// Returns the inverse field and the determinant of the input per point.
fn invert_spd_field(grid: &Grid, f: &TensorField, context: &str) -> Result<(TensorField, Vec<f64>)> {
    let n = f.n();
    let npts = f.len();
    let mut inv = TensorField::zeros(npts, n, 2);
    let mut det = vec![0.0; npts];
    for p in 0..npts {
        if n == 1 {
            let a = f.at(p, &[0, 0]);
            if !(a > 0.0) {
                return Err(HeatraceError::Positivity {
                    context: context.to_string(),
                    point: grid.coords(p),
                    detail: format!("diagonal entry {a:.6e} is not positive"),
                });
            }
            det[p] = a;
            inv.set(p, &[0, 0], 1.0 / a);
        } else {
            let a = f.at(p, &[0, 0]);
            let b = 0.5 * (f.at(p, &[0, 1]) + f.at(p, &[1, 0]));
            let c = f.at(p, &[1, 1]);
            let d = a * c - b * b;
            if !(a > 0.0 && d > 0.0) {
                return Err(HeatraceError::Positivity {
                    context: context.to_string(),
                    point: grid.coords(p),
                    detail: format!(
                        "leading minor {a:.6e} and determinant {d:.6e} must both be positive"
                    ),
                });
            }
            det[p] = d;
            inv.set(p, &[0, 0], c / d);
            inv.set(p, &[0, 1], -b / d);
            inv.set(p, &[1, 0], -b / d);
            inv.set(p, &[1, 1], a / d);
        }
    }
    Ok((inv, det))
}

/// `K_{ijk} = ∂_i g_{jk} - Γ^l_{ij} g_{lk} - Γ^l_{ik} g_{jl}` for a fixed
/// metric `g±` against the Christoffel symbols of the combined metric.
fn noncompat_k(metric: &TensorField, dmetric: &[TensorField], gamma: &TensorField) -> TensorField {
    let n = metric.n();
    let npts = metric.len();
    let mut out = TensorField::zeros(npts, n, 3);
    for p in 0..npts {
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let mut acc = dmetric[i].at(p, &[j, k]);
                    for l in 0..n {
                        acc -= gamma.at(p, &[l, i, j]) * metric.at(p, &[l, k]);
                        acc -= gamma.at(p, &[l, i, k]) * metric.at(p, &[j, l]);
                    }
                    out.set(p, &[i, j, k], acc);
                }
            }
        }
    }
    out
}

/// `W^i_{jk} = ½ g^{im} (K_{jkm} + K_{kjm} - K_{mjk})`.
fn w_connection(inv: &TensorField, k: &TensorField) -> TensorField {
    let n = inv.n();
    let npts = inv.len();
    let mut out = TensorField::zeros(npts, n, 3);
    for p in 0..npts {
        for i in 0..n {
            for j in 0..n {
                for kk in 0..n {
                    let mut acc = 0.0;
                    for m in 0..n {
                        acc += inv.at(p, &[i, m])
                            * (k.at(p, &[j, kk, m]) + k.at(p, &[kk, j, m]) - k.at(p, &[m, j, kk]));
                    }
                    out.set(p, &[i, j, kk], 0.5 * acc);
                }
            }
        }
    }
    out
}

/// Trace route `W^i_{ij}` versus gradient route `∂_j W`; they agree up to
/// differentiation error for adequately resolved fields.
fn check_w_routes(grid: &Grid, w_scalar: &[f64], w_vec: &TensorField, label: &str) -> Result<()> {
    let n = grid.dim();
    let scale = w_vec.max_abs().max(1.0);
    let mut worst = 0.0f64;
    for d in 0..n {
        let grad = grid.deriv(w_scalar, d);
        let comp = w_vec.component(&[d]);
        for p in 0..grad.len() {
            worst = worst.max((grad[p] - comp[p]).abs());
        }
    }
    if worst > CONSISTENCY_TOL * scale {
        return Err(HeatraceError::consistency(
            &format!("{label} trace route vs gradient route (refine the grid if the coefficient fields are smooth)"),
            worst,
            CONSISTENCY_TOL * scale,
        ));
    }
    Ok(())
}

/// Covariant derivative `∇_k W^m_{ij}` of a connection-difference tensor,
/// rank-4 slots `(k, m, i, j)`.
fn covariant_dw(grid: &Grid, w: &TensorField, gamma: &TensorField) -> TensorField {
    let n = w.n();
    let npts = w.len();
    let dw: Vec<TensorField> = (0..n).map(|d| deriv_tensor(grid, w, d)).collect();
    let mut out = TensorField::zeros(npts, n, 4);
    for p in 0..npts {
        for k in 0..n {
            for m in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        let mut acc = dw[k].at(p, &[m, i, j]);
                        for q in 0..n {
                            acc += gamma.at(p, &[m, k, q]) * w.at(p, &[q, i, j]);
                            acc -= gamma.at(p, &[q, k, i]) * w.at(p, &[m, q, j]);
                            acc -= gamma.at(p, &[q, k, j]) * w.at(p, &[m, i, q]);
                        }
                        out.set(p, &[k, m, i, j], acc);
                    }
                }
            }
        }
    }
    out
}

/// Totally symmetric fourth-order tensor of one metric,
///
/// ```text
/// S_{ijkl} = 4 g_{m(i} ∇_j W^m_{kl)} + 4 g_{m(i} W^n_{jk} W^m_{l)n}
///          + 3 g_{nm} W^n_{(ij} W^m_{kl)}
/// ```
fn s_tensor(metric: &TensorField, w: &TensorField, cdw: &TensorField) -> TensorField {
    let n = metric.n();
    let npts = metric.len();
    let mut out = TensorField::zeros(npts, n, 4);
    for p in 0..npts {
        let mut tab = Tab::zeros(n, 4);
        for_each_index(n, 4, |ix| {
            let (i, j, k, l) = (ix[0], ix[1], ix[2], ix[3]);
            let mut acc = 0.0;
            for m in 0..n {
                acc += 4.0 * metric.at(p, &[m, i]) * cdw.at(p, &[j, m, k, l]);
                for q in 0..n {
                    acc += 4.0 * metric.at(p, &[m, i]) * w.at(p, &[q, j, k]) * w.at(p, &[m, l, q]);
                    acc += 3.0 * metric.at(p, &[q, m]) * w.at(p, &[q, i, j]) * w.at(p, &[m, k, l]);
                }
            }
            tab.set(ix, acc);
        });
        tab.symmetrize_all();
        out.set_tab(p, &tab);
    }
    out
}

/// Auxiliary tensor
///
/// ```text
/// N^{jkl} = 2 G^{ij} G^{kl} W_i
///         - (1/3) (2 G^{ij} G^{qk} + 3 G^{iq} G^{jk}) G^{pl} Σ_{ipq}
/// ```
///
/// stored totally symmetrized over `(j, k, l)`; only the symmetric part
/// enters any contraction it is used in.
fn aux_n_field(dual_inv: &TensorField, w_vec: &TensorField, sigma3: &TensorField) -> TensorField {
    let n = dual_inv.n();
    let npts = dual_inv.len();
    let mut out = TensorField::zeros(npts, n, 3);
    for p in 0..npts {
        let g = dual_inv.tab(p);
        let sig = sigma3.tab(p);
        let mut wup = vec![0.0; n];
        let mut sigv = vec![0.0; n];
        for a in 0..n {
            for b in 0..n {
                wup[a] += g.at(&[a, b]) * w_vec.at(p, &[b]);
                for c in 0..n {
                    sigv[a] += g.at(&[b, c]) * sig.at(&[a, b, c]);
                }
            }
        }
        let mut sigv_up = vec![0.0; n];
        for a in 0..n {
            for b in 0..n {
                sigv_up[a] += g.at(&[a, b]) * sigv[b];
            }
        }
        let mut tab = Tab::zeros(n, 3);
        for_each_index(n, 3, |ix| {
            let (j, k, l) = (ix[0], ix[1], ix[2]);
            let mut raised = 0.0;
            for a in 0..n {
                for b in 0..n {
                    for c in 0..n {
                        raised += g.at(&[a, j]) * g.at(&[b, k]) * g.at(&[c, l]) * sig.at(&[a, b, c]);
                    }
                }
            }
            let val = 2.0 * wup[j] * g.at(&[k, l]) - (2.0 / 3.0) * raised - g.at(&[j, k]) * sigv_up[l];
            tab.set(ix, val);
        });
        tab.symmetrize_all();
        out.set_tab(p, &tab);
    }
    out
}

/// Rank-2 contraction `out^{kl} = Σ_{abc} Σ_{abc-jet}[a,b,c] G^{bk} G^{cl}
/// v^a` shared by two blocks of `M^{kl}`.
fn contract_sig_vec(sig: &Tab, g: &Tab, v_up: &[f64]) -> Tab {
    let n = g.n();
    let mut out = Tab::zeros(n, 2);
    for_each_index(n, 2, |kl| {
        let (k, l) = (kl[0], kl[1]);
        let mut acc = 0.0;
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    acc += sig.at(&[a, b, c]) * g.at(&[b, k]) * g.at(&[c, l]) * v_up[a];
                }
            }
        }
        out.set(kl, acc);
    });
    out
}

/// Auxiliary tensor
///
/// ```text
/// M^{kl} = (G^{kl} G^{ij} + 2 G^{ik} G^{jl}) (W_{ij} + W_i W_j)
///        - (2 G^{ij} G^{mk} G^{pl} + 2 G^{im} G^{jk} G^{pl}
///               + G^{kl} G^{im} G^{pj}) Σ_{pim} W_j
///        - (1/4) (G^{pq} G^{kl} + 4 G^{kp} G^{lq}) G^{rs} Σ_{pqrs}
///        + (1/12) (2 G^{ij} G^{pr} G^{qs} G^{kl} + 3 G^{ij} G^{pq} G^{rs} G^{kl}
///               + 6 G^{ik} G^{jl} G^{pq} G^{rs} + 12 G^{ij} G^{pq} G^{kr} G^{ls}
///               + 12 G^{ij} G^{pr} G^{kq} G^{sl}) Σ_{ipq} Σ_{jrs}
/// ```
///
/// stored symmetrized over `(k, l)`.
fn aux_m_field(
    dual_inv: &TensorField,
    w_vec: &TensorField,
    w_hess: &TensorField,
    sigma3: &TensorField,
    sigma4: &TensorField,
) -> TensorField {
    let n = dual_inv.n();
    let npts = dual_inv.len();
    let mut out = TensorField::zeros(npts, n, 2);
    for p in 0..npts {
        let g = dual_inv.tab(p);
        let sig = sigma3.tab(p);
        let sig4 = sigma4.tab(p);

        let mut wup = vec![0.0; n];
        let mut sigv = vec![0.0; n];
        for a in 0..n {
            for b in 0..n {
                wup[a] += g.at(&[a, b]) * w_vec.at(p, &[b]);
                for c in 0..n {
                    sigv[a] += g.at(&[b, c]) * sig.at(&[a, b, c]);
                }
            }
        }
        let mut sigv_up = vec![0.0; n];
        for a in 0..n {
            for b in 0..n {
                sigv_up[a] += g.at(&[a, b]) * sigv[b];
            }
        }
        let mut pmat = Tab::zeros(n, 2);
        for_each_index(n, 2, |ij| {
            pmat.set(
                ij,
                w_hess.at(p, ij) + w_vec.at(p, &[ij[0]]) * w_vec.at(p, &[ij[1]]),
            );
        });
        let mut tr_p = 0.0;
        for i in 0..n {
            for j in 0..n {
                tr_p += g.at(&[i, j]) * pmat.at(&[i, j]);
            }
        }

        // Third-jet contractions shared across blocks.
        let a2 = contract_sig_vec(&sig, &g, &wup);
        let b4 = contract_sig_vec(&sig, &g, &sigv_up);
        let mut tr_sig_w = 0.0;
        for a in 0..n {
            tr_sig_w += sigv[a] * wup[a];
        }
        let mut exch = 0.0;
        let mut trace2 = 0.0;
        for i in 0..n {
            for j in 0..n {
                trace2 += g.at(&[i, j]) * sigv[i] * sigv[j];
                for a in 0..n {
                    for b in 0..n {
                        for c in 0..n {
                            for d in 0..n {
                                exch += sig.at(&[i, a, b])
                                    * sig.at(&[j, c, d])
                                    * g.at(&[i, j])
                                    * g.at(&[a, c])
                                    * g.at(&[b, d]);
                            }
                        }
                    }
                }
            }
        }

        // Fourth-jet contractions.
        let mut s4tr = Tab::zeros(n, 2);
        for_each_index(n, 2, |pq| {
            let mut acc = 0.0;
            for r in 0..n {
                for ss in 0..n {
                    acc += g.at(&[r, ss]) * sig4.at(&[pq[0], pq[1], r, ss]);
                }
            }
            s4tr.set(pq, acc);
        });
        let mut tr_s4 = 0.0;
        for a in 0..n {
            for b in 0..n {
                tr_s4 += g.at(&[a, b]) * s4tr.at(&[a, b]);
            }
        }

        let mut tab = Tab::zeros(n, 2);
        for_each_index(n, 2, |kl| {
            let (k, l) = (kl[0], kl[1]);
            let mut pup = 0.0;
            let mut s4up = 0.0;
            let mut c5 = 0.0;
            for a in 0..n {
                for b in 0..n {
                    pup += g.at(&[a, k]) * g.at(&[b, l]) * pmat.at(&[a, b]);
                    s4up += g.at(&[a, k]) * g.at(&[b, l]) * s4tr.at(&[a, b]);
                }
            }
            for_each_index(n, 6, |ix| {
                let (i, pp, q, j, r, ss) = (ix[0], ix[1], ix[2], ix[3], ix[4], ix[5]);
                c5 += sig.at(&[i, pp, q])
                    * sig.at(&[j, r, ss])
                    * g.at(&[i, j])
                    * g.at(&[pp, r])
                    * g.at(&[q, k])
                    * g.at(&[ss, l]);
            });
            let block1 = g.at(&[k, l]) * tr_p + 2.0 * pup;
            let block2 =
                -(2.0 * a2.at(&[k, l]) + 2.0 * wup[k] * sigv_up[l] + g.at(&[k, l]) * tr_sig_w);
            let block3 = -0.25 * (g.at(&[k, l]) * tr_s4 + 4.0 * s4up);
            let block4 = (1.0 / 12.0)
                * (2.0 * exch * g.at(&[k, l])
                    + 3.0 * trace2 * g.at(&[k, l])
                    + 6.0 * sigv_up[k] * sigv_up[l]
                    + 12.0 * b4.at(&[k, l])
                    + 12.0 * c5);
            tab.set(kl, block1 + block2 + block3 + block4);
        });
        tab.symmetrize_all();
        out.set_tab(p, &tab);
    }
    out
}

/// Auxiliary tensor `V_{pqijkl}`, symmetrized over `(i, j, k, l)`:
///
/// ```text
/// V = Sym(i,j,k,l) {
///     [ 4 g+_{mp} ∇_k W+^m_{ij} + 4 g+_{mp} W+^n_{jk} W+^m_{in}
///       + 12 g+_{mi} W+^m_{nk} W+^n_{jp} - 6 g+_{mi} W+^n_{kj} W+^m_{np} ] g-_{lq}
///   + g+_{lp} [ same with + -> -, p -> q ]
///   + 6 g+_{mp} W+^m_{ij} g-_{nq} W-^n_{kl} }
/// ```
fn aux_v_field(
    gp_met: &TensorField,
    gm_met: &TensorField,
    wp: &TensorField,
    wm: &TensorField,
    cdwp: &TensorField,
    cdwm: &TensorField,
) -> TensorField {
    let n = gp_met.n();
    let npts = gp_met.len();
    let mut out = TensorField::zeros(npts, n, 6);
    for p in 0..npts {
        let mut tab = Tab::zeros(n, 6);
        for_each_index(n, 6, |ix| {
            let (pp, qq, i, j, k, l) = (ix[0], ix[1], ix[2], ix[3], ix[4], ix[5]);
            let mut plus_half = 0.0;
            let mut minus_half = 0.0;
            let mut cross = 0.0;
            for m in 0..n {
                plus_half += 4.0 * gp_met.at(p, &[m, pp]) * cdwp.at(p, &[k, m, i, j]);
                minus_half += 4.0 * gm_met.at(p, &[m, qq]) * cdwm.at(p, &[k, m, i, j]);
                for q in 0..n {
                    plus_half += 4.0
                        * gp_met.at(p, &[m, pp])
                        * wp.at(p, &[q, j, k])
                        * wp.at(p, &[m, i, q]);
                    plus_half += 12.0
                        * gp_met.at(p, &[m, i])
                        * wp.at(p, &[m, q, k])
                        * wp.at(p, &[q, j, pp]);
                    plus_half -= 6.0
                        * gp_met.at(p, &[m, i])
                        * wp.at(p, &[q, k, j])
                        * wp.at(p, &[m, q, pp]);
                    minus_half += 4.0
                        * gm_met.at(p, &[m, qq])
                        * wm.at(p, &[q, j, k])
                        * wm.at(p, &[m, i, q]);
                    minus_half += 12.0
                        * gm_met.at(p, &[m, i])
                        * wm.at(p, &[m, q, k])
                        * wm.at(p, &[q, j, qq]);
                    minus_half -= 6.0
                        * gm_met.at(p, &[m, i])
                        * wm.at(p, &[q, k, j])
                        * wm.at(p, &[m, q, qq]);
                    cross += 6.0
                        * gp_met.at(p, &[m, pp])
                        * wp.at(p, &[m, i, j])
                        * gm_met.at(p, &[q, qq])
                        * wm.at(p, &[q, k, l]);
                }
            }
            let val = plus_half * gm_met.at(p, &[l, qq]) + gp_met.at(p, &[l, pp]) * minus_half + cross;
            tab.set(ix, val);
        });
        tab.symmetrize(&[2, 3, 4, 5]);
        out.set_tab(p, &tab);
    }
    out
}

/// Coordinate Dirac matrices from a frame field and constant frame
/// matrices.
fn build_gamma_field(frame: &TensorField, gammas: &[CMat], fiber: usize) -> Vec<EndoField> {
    let n = frame.n();
    let npts = frame.len();
    (0..n)
        .map(|i| {
            EndoField::from_fn(npts, fiber, |p| {
                let mut m = CMat::zeros(fiber);
                for (a, gamma) in gammas.iter().enumerate() {
                    m.axpy(re(frame.at(p, &[i, a])), gamma);
                }
                m
            })
        })
        .collect()
}

/// Validate a Dirac structure against its operator geometry.
fn validate_dirac(
    manifold: &ModelManifold,
    inverse_metric: &TensorField,
    christoffel: &TensorField,
    connection: &[EndoField],
    fiber_dim: usize,
    dirac: &mut DiracData,
    corrections: &mut Vec<(String, f64)>,
) -> Result<()> {
    let n = manifold.dim();
    let npts = manifold.len();
    let grid = manifold.grid();
    if dirac.gammas.len() != n {
        return Err(HeatraceError::model(format!(
            "need one frame Dirac matrix per dimension ({n}), got {}",
            dirac.gammas.len()
        )));
    }
    for (a, g) in dirac.gammas.iter().enumerate() {
        if g.dim() != fiber_dim {
            return Err(HeatraceError::model(format!(
                "frame Dirac matrix {a} has fiber {}, expected {fiber_dim}",
                g.dim()
            )));
        }
    }
    if dirac.frame.len() != npts || dirac.frame.n() != n || dirac.frame.rank() != 2 {
        return Err(HeatraceError::model(
            "frame field must be rank-2 with slots (i, a) on the manifold grid".to_string(),
        ));
    }
    if dirac.s_field.len() != npts || dirac.s_field.fiber() != fiber_dim {
        return Err(HeatraceError::model(
            "Dirac zero-order term has the wrong shape".to_string(),
        ));
    }

    // Frame matrices obey the flat Clifford relations.
    let gamma_scale = dirac
        .gammas
        .iter()
        .map(CMat::norm)
        .fold(1.0f64, f64::max);
    let mut worst = 0.0f64;
    for a in 0..n {
        for b in 0..n {
            let anti = dirac.gammas[a].anticommutator(&dirac.gammas[b]);
            let delta = if a == b { 2.0 } else { 0.0 };
            let mut expect = CMat::identity(fiber_dim).scale_re(delta);
            expect.axpy(re(-1.0), &anti);
            worst = worst.max(expect.norm());
        }
    }
    if worst > 1e-12 * gamma_scale * gamma_scale {
        return Err(HeatraceError::consistency(
            "frame Dirac matrices anticommutation",
            worst,
            1e-12 * gamma_scale * gamma_scale,
        ));
    }

    // The frame reproduces the inverse metric.
    let metric_scale = inverse_metric.max_abs().max(1.0);
    let mut worst = 0.0f64;
    for p in 0..npts {
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for a in 0..n {
                    acc += dirac.frame.at(p, &[i, a]) * dirac.frame.at(p, &[j, a]);
                }
                worst = worst.max((acc - inverse_metric.at(p, &[i, j])).abs());
            }
        }
    }
    if worst > 1e-10 * metric_scale {
        return Err(HeatraceError::consistency(
            "frame reproduces the inverse metric",
            worst,
            1e-10 * metric_scale,
        ));
    }

    let corr = dirac.s_field.hermitize();
    corrections.push(("Dirac zero-order term Hermitian projection".to_string(), corr));

    // The zero-order term anticommutes with every coordinate Dirac matrix.
    let gammas = build_gamma_field(&dirac.frame, &dirac.gammas, fiber_dim);
    let s_scale = 1.0 + dirac.s_field.max_norm() * gamma_scale;
    let mut worst = 0.0f64;
    for p in 0..npts {
        let sp = dirac.s_field.get(p);
        for g in &gammas {
            worst = worst.max(sp.anticommutator(&g.get(p)).norm());
        }
    }
    if worst > 1e-10 * s_scale {
        return Err(HeatraceError::consistency(
            "Dirac zero-order term anticommutes with the Dirac matrices",
            worst,
            1e-10 * s_scale,
        ));
    }

    // Covariant constancy: ∂_i γ^k + Γ^k_{ij} γ^j + [A_i, γ^k] = 0.
    let gamma_max = gammas.iter().map(EndoField::max_norm).fold(1.0f64, f64::max);
    let conn_max = connection.iter().map(EndoField::max_norm).fold(0.0f64, f64::max);
    let chris_max = christoffel.max_abs();
    let compat_scale = gamma_max * (1.0 + conn_max + chris_max);
    let mut worst = 0.0f64;
    for i in 0..n {
        for k in 0..n {
            let dgam = deriv_endo(grid, &gammas[k], i);
            for p in 0..npts {
                let mut m = dgam.get(p);
                for j in 0..n {
                    m.axpy(re(christoffel.at(p, &[k, i, j])), &gammas[j].get(p));
                }
                m.axpy(re(1.0), &connection[i].get(p).commutator(&gammas[k].get(p)));
                worst = worst.max(m.norm());
            }
        }
    }
    if worst > DIRAC_TOL * compat_scale {
        return Err(HeatraceError::consistency(
            "Dirac matrix covariant constancy (refine the grid if the coefficient fields are smooth)",
            worst,
            DIRAC_TOL * compat_scale,
        ));
    }
    Ok(())
}
