//! Laplace-method asymptotics for Gaussian-dominated integrals.
//!
//! The central object is the family of integrals
//!
//! ```text
//! F(eps) = (4 pi eps)^(-n/2) Int_U exp(-Sigma(y) / (2 eps)) phi(y) dy
//! ```
//!
//! where `Sigma >= 0` has a unique interior minimum `Sigma(0) = 0` with
//! positive definite Hessian `G_ij = Sigma_,ij(0)`. As `eps -> 0` the
//! integral admits an asymptotic expansion `F(eps) ~ sum_k eps^k F_k`
//! whose coefficients are polynomial contractions of the Taylor data of
//! `Sigma` and `phi` at the minimum. This module provides
//!
//! * Gaussian moments `<y^{i_1} ... y^{i_2k}>` of the weight
//!   `exp(-G_ij y^i y^j / 4)`, computed two independent ways (Wick
//!   pairings and the symmetrized-product closed form),
//! * the associated Hermite polynomials and their orthogonality Gram
//!   matrices,
//! * the flat expansion coefficients `c_k` for quadratic `Sigma`,
//! * the general coefficients `F_0, F_1, F_2` from the symmetrized
//!   Taylor tables of `Sigma` and `phi`, with optional base-curvature
//!   corrections for tables formed from covariant derivatives,
//! * an adaptive-quadrature oracle evaluating `F(eps)` directly, used
//!   to validate every coefficient formula against the integral itself.
//!
//! Index conventions: `G_ij` is the full Hessian of `Sigma` (so a 1D
//! `Sigma = y^2` has `G = 2`), `G^ij` its inverse, and the Gaussian
//! average is normalized so that `<1> = 1` and `<y^i y^j> = 2 G^ij`.
//! The `phi` tables are derivatives of the density-weighted symbol
//! `phihat = g^(-1/2) phi` when a base metric `g` is supplied, and of
//! `phi` itself in flat mode.

use std::collections::BTreeMap;

use itertools::Itertools;

use crate::error::HeatraceError;
use crate::tensors::{for_each_index, Tab};
use crate::Result;

/// Nonnegative quadratic form data: Hessian, verified inverse, determinant.
#[derive(Debug, Clone)]
pub struct GaussianModel {
    n: usize,
    hessian: Vec<f64>,
    inverse: Vec<f64>,
    det: f64,
}

impl GaussianModel {
    /// Builds the model from the row-major Hessian `G_ij`.
    ///
    /// The matrix must be symmetric positive definite; the inverse is
    /// computed by Cholesky solves and verified against the identity.
    pub fn new(n: usize, hessian: &[f64]) -> Result<Self> {
        if n == 0 || hessian.len() != n * n {
            return Err(HeatraceError::model(format!(
                "Hessian must be {n} x {n}, got {} entries",
                hessian.len()
            )));
        }
        let scale = hessian.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            for j in 0..i {
                if (hessian[i * n + j] - hessian[j * n + i]).abs() > 1e-12 * scale {
                    return Err(HeatraceError::model(format!(
                        "Hessian is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        // Cholesky factor L with G = L L^T; failure of a pivot means the
        // matrix is not positive definite.
        let mut l = vec![0.0_f64; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = hessian[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(HeatraceError::model(format!(
                            "Hessian is not positive definite (pivot {i} gave {s:.3e})"
                        )));
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        let mut det = 1.0;
        for i in 0..n {
            det *= l[i * n + i] * l[i * n + i];
        }
        // Inverse column by column: solve L z = e_j, then L^T x = z.
        let mut inverse = vec![0.0_f64; n * n];
        for j in 0..n {
            let mut z = vec![0.0_f64; n];
            for i in 0..n {
                let mut s = if i == j { 1.0 } else { 0.0 };
                for k in 0..i {
                    s -= l[i * n + k] * z[k];
                }
                z[i] = s / l[i * n + i];
            }
            let mut x = vec![0.0_f64; n];
            for i in (0..n).rev() {
                let mut s = z[i];
                for k in i + 1..n {
                    s -= l[k * n + i] * x[k];
                }
                x[i] = s / l[i * n + i];
            }
            for i in 0..n {
                inverse[i * n + j] = x[i];
            }
        }
        // Residual check `G G^{-1} = I` guards against ill conditioning.
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += hessian[i * n + k] * inverse[k * n + j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((s - target).abs());
            }
        }
        if worst > 1e-10 {
            return Err(HeatraceError::IllConditioned {
                context: "Hessian inversion".into(),
                condition: worst / f64::EPSILON,
                limit: 1e-10 / f64::EPSILON,
            });
        }
        Ok(Self {
            n,
            hessian: hessian.to_vec(),
            inverse,
            det,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Hessian entry `G_ij`.
    pub fn hessian(&self, i: usize, j: usize) -> f64 {
        self.hessian[i * self.n + j]
    }

    /// Inverse entry `G^ij`.
    pub fn inverse(&self, i: usize, j: usize) -> f64 {
        self.inverse[i * self.n + j]
    }

    pub fn det(&self) -> f64 {
        self.det
    }
}

fn check_moment_order(idx: &[usize], n: usize) -> Result<()> {
    if idx.len() > 8 {
        return Err(HeatraceError::Precondition {
            context: "gaussian moment".into(),
            detail: format!("moments are supported up to order 8, got {}", idx.len()),
        });
    }
    if let Some(&i) = idx.iter().find(|&&i| i >= n) {
        return Err(HeatraceError::model(format!(
            "moment index {i} out of range for dimension {n}"
        )));
    }
    Ok(())
}

/// Gaussian moment `<y^{i_1} ... y^{i_m}>` by Wick pairing enumeration.
///
/// The pair value is `<y^i y^j> = 2 G^ij`; odd orders vanish.
pub fn gaussian_moment(model: &GaussianModel, idx: &[usize]) -> Result<f64> {
    check_moment_order(idx, model.n)?;
    fn wick(model: &GaussianModel, idx: &[usize]) -> f64 {
        match idx.len() {
            0 => 1.0,
            m if m % 2 == 1 => 0.0,
            _ => {
                let mut total = 0.0;
                let mut rest: Vec<usize> = Vec::with_capacity(idx.len() - 2);
                for j in 1..idx.len() {
                    rest.clear();
                    rest.extend_from_slice(&idx[1..j]);
                    rest.extend_from_slice(&idx[j + 1..]);
                    total += 2.0 * model.inverse(idx[0], idx[j]) * wick(model, &rest);
                }
                total
            }
        }
    }
    Ok(wick(model, idx))
}

/// Gaussian moment by the closed form `(2k)!/k!` times the fully
/// symmetrized product of `G^ij`, an independent route for cross checks.
pub fn gaussian_moment_formula(model: &GaussianModel, idx: &[usize]) -> Result<f64> {
    check_moment_order(idx, model.n)?;
    let m = idx.len();
    if m % 2 == 1 {
        return Ok(0.0);
    }
    if m == 0 {
        return Ok(1.0);
    }
    let k = m / 2;
    // (2k)!/k! times the (1/(2k)!)-normalized permutation sum collapses
    // to (1/k!) times the raw permutation sum over pair products.
    let mut sum = 0.0;
    for perm in (0..m).permutations(m) {
        let mut prod = 1.0;
        for p in 0..k {
            prod *= model.inverse(idx[perm[2 * p]], idx[perm[2 * p + 1]]);
        }
        sum += prod;
    }
    let mut kfact = 1.0;
    for i in 1..=k {
        kfact *= i as f64;
    }
    Ok(sum / kfact)
}

/// Sparse multivariate polynomial in `y^1 ... y^n`, exponent-keyed.
#[derive(Debug, Clone)]
pub struct Poly {
    n: usize,
    terms: BTreeMap<Vec<u8>, f64>,
}

impl Poly {
    pub fn zero(n: usize) -> Self {
        Self {
            n,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(n: usize, c: f64) -> Self {
        let mut p = Self::zero(n);
        p.insert(vec![0; n], c);
        p
    }

    /// The coordinate monomial `y^i`.
    pub fn var(n: usize, i: usize) -> Self {
        assert!(i < n, "variable index out of range");
        let mut e = vec![0u8; n];
        e[i] = 1;
        let mut p = Self::zero(n);
        p.insert(e, 1.0);
        p
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn insert(&mut self, exp: Vec<u8>, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        let slot = self.terms.entry(exp.clone()).or_insert(0.0);
        *slot += coeff;
        if *slot == 0.0 {
            self.terms.remove(&exp);
        }
    }

    pub fn add(&self, other: &Poly) -> Poly {
        assert_eq!(self.n, other.n, "dimension mismatch");
        let mut out = self.clone();
        for (e, &c) in &other.terms {
            out.insert(e.clone(), c);
        }
        out
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        assert_eq!(self.n, other.n, "dimension mismatch");
        let mut out = Poly::zero(self.n);
        for (ea, &ca) in &self.terms {
            for (eb, &cb) in &other.terms {
                let exp: Vec<u8> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.insert(exp, ca * cb);
            }
        }
        out
    }

    pub fn scale(&self, c: f64) -> Poly {
        let mut out = Poly::zero(self.n);
        for (e, &v) in &self.terms {
            out.insert(e.clone(), c * v);
        }
        out
    }

    /// Partial derivative with respect to `y^i`.
    pub fn diff(&self, i: usize) -> Poly {
        assert!(i < self.n, "variable index out of range");
        let mut out = Poly::zero(self.n);
        for (e, &v) in &self.terms {
            if e[i] > 0 {
                let mut exp = e.clone();
                exp[i] -= 1;
                out.insert(exp, v * f64::from(e[i]));
            }
        }
        out
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        assert_eq!(y.len(), self.n, "dimension mismatch");
        let mut total = 0.0;
        for (e, &c) in &self.terms {
            let mut prod = c;
            for (yi, &ei) in y.iter().zip(e) {
                prod *= yi.powi(i32::from(ei));
            }
            total += prod;
        }
        total
    }

    pub fn degree(&self) -> usize {
        self.terms
            .keys()
            .map(|e| e.iter().map(|&x| usize::from(x)).sum())
            .max()
            .unwrap_or(0)
    }
}

/// Gaussian average `<p>` of a polynomial, term by term via moments.
pub fn gaussian_average(model: &GaussianModel, p: &Poly) -> Result<f64> {
    if p.n != model.n {
        return Err(HeatraceError::model(format!(
            "polynomial dimension {} does not match model dimension {}",
            p.n, model.n
        )));
    }
    let mut total = 0.0;
    for (e, &c) in &p.terms {
        let mut idx = Vec::new();
        for (i, &ei) in e.iter().enumerate() {
            for _ in 0..ei {
                idx.push(i);
            }
        }
        total += c * gaussian_moment(model, &idx)?;
    }
    Ok(total)
}

/// Hermite polynomial `H_{i_1 ... i_k}` of the Gaussian weight.
///
/// ```text
/// H_{i_1 ... i_k}(y) = (-1)^k D_{i_1} ... D_{i_k} 1,
/// D_i = d/dy^i - (1/2) G_ij y^j
/// ```
///
/// The operators `D_i` commute, so the result is symmetric in its
/// indices. `H_i = (1/2) G_ij y^j`.
pub fn hermite(model: &GaussianModel, indices: &[usize]) -> Result<Poly> {
    if indices.len() > 4 {
        return Err(HeatraceError::Precondition {
            context: "hermite polynomial".into(),
            detail: format!("supported up to rank 4, got {}", indices.len()),
        });
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= model.n) {
        return Err(HeatraceError::model(format!(
            "Hermite index {i} out of range for dimension {}",
            model.n
        )));
    }
    let n = model.n;
    let mut p = Poly::constant(n, 1.0);
    for &i in indices.iter().rev() {
        // D_i p = dp/dy^i - (1/2) (G_ij y^j) p
        let mut gy = Poly::zero(n);
        for j in 0..n {
            gy = gy.add(&Poly::var(n, j).scale(model.hessian(i, j)));
        }
        p = p.diff(i).sub(&gy.mul(&p).scale(0.5));
    }
    Ok(p.scale(if indices.len() % 2 == 0 { 1.0 } else { -1.0 }))
}

/// Evaluates `H_{i_1 ... i_k}(y)`.
pub fn hermite_eval(model: &GaussianModel, indices: &[usize], y: &[f64]) -> Result<f64> {
    Ok(hermite(model, indices)?.eval(y))
}

/// Orthogonality Gram data for rank-`k` Hermite polynomials.
///
/// Both matrices are `n^k x n^k` over row-major index tuples: `computed`
/// holds the Gaussian averages `<H_I H_J>`, `reference` the closed form
/// `(k!/2^k) G_{i_1 (j_1} ... G_{i_k j_k)}` symmetrized over the second
/// index block.
#[derive(Debug, Clone)]
pub struct HermiteGram {
    pub dim: usize,
    pub computed: Vec<f64>,
    pub reference: Vec<f64>,
}

impl HermiteGram {
    pub fn max_deviation(&self) -> f64 {
        self.computed
            .iter()
            .zip(&self.reference)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Computes the rank-`k` Hermite Gram matrix along with its closed form.
pub fn hermite_orthogonality(model: &GaussianModel, k: usize) -> Result<HermiteGram> {
    if k == 0 || k > 4 {
        return Err(HeatraceError::Precondition {
            context: "hermite orthogonality".into(),
            detail: format!("rank must be 1..=4, got {k}"),
        });
    }
    let n = model.n;
    let mut tuples = Vec::new();
    for_each_index(n, k, |idx| tuples.push(idx.to_vec()));
    let polys: Vec<Poly> = tuples
        .iter()
        .map(|t| hermite(model, t))
        .collect::<Result<_>>()?;
    let dim = tuples.len();
    let mut computed = vec![0.0_f64; dim * dim];
    let mut reference = vec![0.0_f64; dim * dim];
    for (a, ia) in tuples.iter().enumerate() {
        for (b, jb) in tuples.iter().enumerate() {
            computed[a * dim + b] = gaussian_average(model, &polys[a].mul(&polys[b]))?;
            // (k!/2^k) times the symmetrization over the second block is
            // (1/2^k) times the permanent-style sum over pairings.
            let mut sum = 0.0;
            for perm in (0..k).permutations(k) {
                let mut prod = 1.0;
                for m in 0..k {
                    prod *= model.hessian(ia[m], jb[perm[m]]);
                }
                sum += prod;
            }
            reference[a * dim + b] = sum / 2f64.powi(k as i32);
        }
    }
    Ok(HermiteGram {
        dim,
        computed,
        reference,
    })
}

fn check_symmetric(tab: &Tab, what: &str) -> Result<()> {
    let mut sym = tab.clone();
    sym.symmetrize_all();
    let scale = tab.max_abs().max(1.0);
    if tab.distance(&sym) > 1e-12 * scale {
        return Err(HeatraceError::model(format!("{what} table is not symmetric")));
    }
    Ok(())
}

/// Expansion coefficients `c_k` of a Gaussian-phase integral
/// `(4 pi eps)^(-n/2) Int exp(-G_ij y^i y^j / 4 eps) phi` from the jets
/// of `phi` at the minimum: `phi_jets[r]` is the symmetric table of
/// `r`-th partial derivatives, `r = 0 ..= 2 k_max`.
///
/// `c_k = (det G)^(-1/2) (1/k!) G^{i_1 i_2} ... G^{i_2k-1 i_2k}
/// phi_{i_1 ... i_2k}`.
pub fn flat_expansion(model: &GaussianModel, phi_jets: &[Tab], k_max: usize) -> Result<Vec<f64>> {
    if phi_jets.len() < 2 * k_max + 1 {
        return Err(HeatraceError::Precondition {
            context: "flat expansion".into(),
            detail: format!(
                "need phi jets through order {}, got {}",
                2 * k_max,
                phi_jets.len().saturating_sub(1)
            ),
        });
    }
    for (r, tab) in phi_jets.iter().enumerate().take(2 * k_max + 1) {
        if tab.n() != model.n || tab.rank() != r {
            return Err(HeatraceError::model(format!(
                "phi jet {r} has dimension {} rank {}, expected {} rank {r}",
                tab.n(),
                tab.rank(),
                model.n
            )));
        }
        check_symmetric(tab, "phi jet")?;
    }
    let norm = model.det.sqrt().recip();
    let mut out = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let tab = &phi_jets[2 * k];
        let mut sum = 0.0;
        for_each_index(model.n, 2 * k, |idx| {
            let mut g = 1.0;
            for p in 0..k {
                g *= model.inverse(idx[2 * p], idx[2 * p + 1]);
            }
            sum += g * tab.at(idx);
        });
        let mut kfact = 1.0;
        for i in 1..=k {
            kfact *= i as f64;
        }
        out.push(norm * sum / kfact);
    }
    Ok(out)
}

/// Same coefficients via the operator form `c_k = (1/k!) (L^k phi)(0)`
/// with `L = G^ij d_i d_j`, an independent route for cross checks.
pub fn flat_expansion_poly(model: &GaussianModel, phi: &Poly, k_max: usize) -> Result<Vec<f64>> {
    if phi.n != model.n {
        return Err(HeatraceError::model(format!(
            "polynomial dimension {} does not match model dimension {}",
            phi.n, model.n
        )));
    }
    let norm = model.det.sqrt().recip();
    let origin = vec![0.0; model.n];
    let mut out = Vec::with_capacity(k_max + 1);
    let mut p = phi.clone();
    let mut kfact = 1.0;
    for k in 0..=k_max {
        if k > 0 {
            kfact *= k as f64;
            let mut next = Poly::zero(model.n);
            for i in 0..model.n {
                for j in 0..model.n {
                    next = next.add(&p.diff(i).diff(j).scale(model.inverse(i, j)));
                }
            }
            p = next;
        }
        out.push(norm * p.eval(&origin) / kfact);
    }
    Ok(out)
}

/// Base-manifold curvature data entering the expansion when the Taylor
/// tables are symmetrized covariant derivatives of a base metric `g`.
#[derive(Debug, Clone)]
pub struct BaseCurvature {
    /// Metric `g_ij` at the expansion point.
    pub metric: Tab,
    /// Ricci tensor `R_ij` of `g` at the expansion point.
    pub ricci: Tab,
    /// Scalar curvature `R = g^ij R_ij`, carried for consistency checks.
    pub scalar: f64,
}

/// Symmetrized Taylor tables of the phase `Sigma` and the amplitude
/// `phi` at the minimum of `Sigma`.
///
/// In flat mode (`base = None`) the tables are ordinary symmetrized
/// partial derivatives. With a base metric they are symmetrized
/// covariant derivatives and the curvature terms of the expansion are
/// switched on; the amplitude tables are then derivatives of
/// `g^(-1/2) phi`.
#[derive(Debug, Clone)]
pub struct TaylorData {
    pub n: usize,
    /// Full Hessian `Sigma_,ij(0)`, rank 2.
    pub hessian: Tab,
    /// Third derivatives, rank 3, totally symmetric.
    pub sigma3: Tab,
    /// Fourth derivatives, rank 4, totally symmetric.
    pub sigma4: Tab,
    pub phi0: f64,
    pub phi1: Tab,
    pub phi2: Tab,
    pub phi3: Tab,
    pub phi4: Tab,
    pub base: Option<BaseCurvature>,
}

impl TaylorData {
    /// Flat-mode data with all tables zero except the Hessian; the
    /// amplitude is the constant `phi0`.
    pub fn gaussian(n: usize, hessian: Tab, phi0: f64) -> Self {
        Self {
            n,
            hessian,
            sigma3: Tab::zeros(n, 3),
            sigma4: Tab::zeros(n, 4),
            phi0,
            phi1: Tab::zeros(n, 1),
            phi2: Tab::zeros(n, 2),
            phi3: Tab::zeros(n, 3),
            phi4: Tab::zeros(n, 4),
            base: None,
        }
    }

    fn validate(&self) -> Result<GaussianModel> {
        let n = self.n;
        let tables: [(&Tab, usize, &str); 7] = [
            (&self.hessian, 2, "Hessian"),
            (&self.sigma3, 3, "sigma3"),
            (&self.sigma4, 4, "sigma4"),
            (&self.phi1, 1, "phi1"),
            (&self.phi2, 2, "phi2"),
            (&self.phi3, 3, "phi3"),
            (&self.phi4, 4, "phi4"),
        ];
        for (tab, rank, what) in tables {
            if tab.n() != n || tab.rank() != rank {
                return Err(HeatraceError::model(format!(
                    "{what} table has dimension {} rank {}, expected {n} rank {rank}",
                    tab.n(),
                    tab.rank()
                )));
            }
            check_symmetric(tab, what)?;
        }
        let mut hess = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                hess[i * n + j] = self.hessian.at(&[i, j]);
            }
        }
        let model = GaussianModel::new(n, &hess)?;
        if let Some(base) = &self.base {
            if base.metric.n() != n || base.metric.rank() != 2 {
                return Err(HeatraceError::model("base metric table must have rank 2"));
            }
            if base.ricci.n() != n || base.ricci.rank() != 2 {
                return Err(HeatraceError::model("base Ricci table must have rank 2"));
            }
            check_symmetric(&base.metric, "base metric")?;
            check_symmetric(&base.ricci, "base Ricci")?;
            let mut g = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    g[i * n + j] = base.metric.at(&[i, j]);
                }
            }
            let gm = GaussianModel::new(n, &g)?;
            let mut scalar = 0.0;
            for i in 0..n {
                for j in 0..n {
                    scalar += gm.inverse(i, j) * base.ricci.at(&[i, j]);
                }
            }
            if (scalar - base.scalar).abs() > 1e-10 * scalar.abs().max(1.0) {
                return Err(HeatraceError::consistency(
                    "scalar curvature vs trace of Ricci",
                    (scalar - base.scalar).abs(),
                    1e-10 * scalar.abs().max(1.0),
                ));
            }
        }
        Ok(model)
    }
}

/// Expansion coefficients `F_0 ..= F_kmax` (`k_max <= 2`) of the
/// Laplace integral from symmetrized Taylor tables.
///
/// ```text
/// F_0 = g^(1/2) (det G)^(-1/2) [phihat]
/// F_1 = g^(1/2) (det G)^(-1/2) { G^ij phihat_ij
///       - G^ij G^pq Sigma_ipq phihat_j
///       + [ -(1/3) G^ij R_ij
///           + (1/12)(2 G^il G^jm + 3 G^ij G^lm) G^kn Sigma_ijk Sigma_lmn
///           - (1/4) G^ij G^kl Sigma_ijkl ] phihat }
/// ```
///
/// `F_2` carries the analogous quartic blocks and requires the
/// amplitude and its first derivatives to vanish at the minimum; the
/// coefficients are then independent of the integration domain.
pub fn morse_expansion(data: &TaylorData, k_max: usize) -> Result<Vec<f64>> {
    if k_max > 2 {
        return Err(HeatraceError::Precondition {
            context: "morse expansion".into(),
            detail: format!("coefficients are implemented through order 2, got k_max={k_max}"),
        });
    }
    let model = data.validate()?;
    let n = data.n;
    let gi = |i: usize, j: usize| model.inverse(i, j);
    let amp_scale = [
        data.phi0.abs(),
        data.phi1.max_abs(),
        data.phi2.max_abs(),
        data.phi3.max_abs(),
        data.phi4.max_abs(),
    ]
    .into_iter()
    .fold(1.0_f64, f64::max);
    if k_max >= 2 && (data.phi0.abs() > 1e-12 * amp_scale || data.phi1.max_abs() > 1e-12 * amp_scale)
    {
        return Err(HeatraceError::Precondition {
            context: "morse expansion order 2".into(),
            detail: "amplitude and its first derivatives must vanish at the minimum".into(),
        });
    }

    let (dens, ricci): (f64, Option<&Tab>) = match &data.base {
        Some(base) => {
            let det = if n == 1 {
                base.metric.at(&[0, 0])
            } else if n == 2 {
                base.metric.at(&[0, 0]) * base.metric.at(&[1, 1])
                    - base.metric.at(&[0, 1]) * base.metric.at(&[1, 0])
            } else {
                return Err(HeatraceError::model(
                    "base curvature mode supports dimensions 1 and 2",
                ));
            };
            (det.sqrt(), Some(&base.ricci))
        }
        None => (1.0, None),
    };
    let norm = dens / model.det.sqrt();

    let mut out = Vec::with_capacity(k_max + 1);
    out.push(norm * data.phi0);
    if k_max == 0 {
        return Ok(out);
    }

    // First-order coefficient.
    let mut b1 = 0.0;
    for_each_index(n, 2, |idx| {
        b1 += gi(idx[0], idx[1]) * data.phi2.at(idx);
    });
    for_each_index(n, 4, |idx| {
        let (i, j, p, q) = (idx[0], idx[1], idx[2], idx[3]);
        b1 -= gi(i, j) * gi(p, q) * data.sigma3.at(&[i, p, q]) * data.phi1.at(&[j]);
    });
    let mut bracket = 0.0;
    if let Some(r) = ricci {
        for_each_index(n, 2, |idx| {
            bracket -= gi(idx[0], idx[1]) * r.at(idx) / 3.0;
        });
    }
    for_each_index(n, 6, |idx| {
        let (i, j, k, l, m, nn) = (idx[0], idx[1], idx[2], idx[3], idx[4], idx[5]);
        let pat = 2.0 * gi(i, l) * gi(j, m) + 3.0 * gi(i, j) * gi(l, m);
        bracket += pat * gi(k, nn) * data.sigma3.at(&[i, j, k]) * data.sigma3.at(&[l, m, nn]) / 12.0;
    });
    for_each_index(n, 4, |idx| {
        bracket -= gi(idx[0], idx[1]) * gi(idx[2], idx[3]) * data.sigma4.at(idx) / 4.0;
    });
    b1 += bracket * data.phi0;
    out.push(norm * b1);
    if k_max == 1 {
        return Ok(out);
    }

    // Second-order coefficient; the amplitude tables start at rank 2.
    let mut b2 = 0.0;
    for_each_index(n, 4, |idx| {
        b2 += 0.5 * gi(idx[0], idx[1]) * gi(idx[2], idx[3]) * data.phi4.at(idx);
    });
    for_each_index(n, 6, |idx| {
        let (i, j, q, k, p, l) = (idx[0], idx[1], idx[2], idx[3], idx[4], idx[5]);
        let pat = 2.0 * gi(i, j) * gi(q, k) + 3.0 * gi(i, q) * gi(j, k);
        b2 -= pat * gi(p, l) * data.sigma3.at(&[i, p, q]) * data.phi3.at(&[j, k, l]) / 3.0;
    });
    // Rank-2 kernel contracted with phihat_kl.
    let mut kernel = Tab::zeros(n, 2);
    if let Some(r) = ricci {
        let mut rtrace = 0.0;
        for_each_index(n, 2, |idx| {
            rtrace += gi(idx[0], idx[1]) * r.at(idx);
        });
        for_each_index(n, 2, |kl| {
            let (k, l) = (kl[0], kl[1]);
            let mut v = -rtrace * gi(k, l) / 3.0;
            for_each_index(n, 2, |ij| {
                let (i, j) = (ij[0], ij[1]);
                v -= 2.0 * gi(i, k) * gi(j, l) * r.at(&[i, j]) / 3.0;
            });
            kernel.add_at(kl, v);
        });
    }
    for_each_index(n, 2, |kl| {
        let (k, l) = (kl[0], kl[1]);
        let mut v = 0.0;
        for_each_index(n, 4, |pqrs| {
            let (p, q, r, s) = (pqrs[0], pqrs[1], pqrs[2], pqrs[3]);
            let pat = gi(p, q) * gi(k, l) + 4.0 * gi(k, p) * gi(l, q);
            v -= 0.25 * pat * gi(r, s) * data.sigma4.at(&[p, q, r, s]);
        });
        for_each_index(n, 6, |d| {
            let (i, j, p, q, r, s) = (d[0], d[1], d[2], d[3], d[4], d[5]);
            let pat = 2.0 * gi(i, j) * gi(p, r) * gi(q, s) * gi(k, l)
                + 3.0 * gi(i, j) * gi(p, q) * gi(r, s) * gi(k, l)
                + 6.0 * gi(i, k) * gi(j, l) * gi(p, q) * gi(r, s)
                + 12.0 * gi(i, j) * gi(p, q) * gi(k, r) * gi(l, s)
                + 12.0 * gi(i, j) * gi(p, r) * gi(k, q) * gi(s, l);
            v += pat * data.sigma3.at(&[i, p, q]) * data.sigma3.at(&[j, r, s]) / 12.0;
        });
        kernel.add_at(kl, v);
    });
    for_each_index(n, 2, |kl| {
        b2 += kernel.at(kl) * data.phi2.at(kl);
    });
    out.push(norm * b2);
    Ok(out)
}

/// Result of a direct quadrature evaluation of `F(eps)`.
#[derive(Debug, Clone, Copy)]
pub struct Quadrature {
    pub value: f64,
    /// Accumulated Richardson error estimate of the quadrature.
    pub error: f64,
    pub evals: usize,
}

struct AdaptState<'a> {
    f: &'a mut dyn FnMut(f64) -> f64,
    tol_scale: f64,
    /// Intervals wider than this are always subdivided; set to the
    /// width of the Gaussian bump so coarse panels cannot miss it.
    min_h: f64,
    evals: usize,
    err: f64,
}

fn adaptive_simpson(state: &mut AdaptState, a: f64, b: f64, tol: f64) -> Result<f64> {
    let fa = (state.f)(a);
    let fb = (state.f)(b);
    let m = 0.5 * (a + b);
    let fm = (state.f)(m);
    state.evals += 3;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    adaptive_step(state, a, fa, b, fb, m, fm, whole, tol, 48, &mut Vec::new())
}

#[allow(clippy::too_many_arguments)]
fn adaptive_step(
    state: &mut AdaptState,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    m: f64,
    fm: f64,
    whole: f64,
    tol: f64,
    depth: usize,
    trace: &mut Vec<f64>,
) -> Result<f64> {
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = (state.f)(lm);
    let frm = (state.f)(rm);
    state.evals += 2;
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    let resolved = (b - a) <= state.min_h;
    if (resolved && delta.abs() <= 15.0 * tol) || (b - a) < 1e-14 * state.tol_scale.max(1.0) {
        state.err += delta.abs() / 15.0;
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        trace.push(delta.abs());
        return Err(HeatraceError::NoConvergence {
            context: "adaptive quadrature".into(),
            iterations: 48,
            history: trace.clone(),
        });
    }
    trace.push(delta.abs());
    let l = adaptive_step(state, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1, trace)?;
    let r = adaptive_step(state, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1, trace)?;
    trace.pop();
    Ok(l + r)
}

/// Box half-widths along each coordinate axis such that `Sigma` reaches
/// `25 eps ln(1e14)` at the faces, so the truncated tail is negligible.
fn locate_box(
    n: usize,
    sigma: &dyn Fn(&[f64]) -> f64,
    eps: f64,
) -> Result<Vec<f64>> {
    let thresh = 25.0 * eps * (1e14_f64).ln();
    let mut radii = vec![0.0_f64; n];
    for d in 0..n {
        for sign in [1.0, -1.0] {
            let mut r = eps.sqrt().max(1e-8);
            let mut found = false;
            let mut prev = 0.0;
            for _ in 0..200 {
                let mut y = vec![0.0; n];
                y[d] = sign * r;
                let v = sigma(&y);
                if v >= thresh {
                    found = true;
                    break;
                }
                if v < prev - 1e-12 {
                    return Err(HeatraceError::Positivity {
                        context: "quadrature box search".into(),
                        point: y,
                        detail: "phase decreases away from the minimum".into(),
                    });
                }
                prev = v;
                r *= 1.5;
            }
            if !found {
                return Err(HeatraceError::Positivity {
                    context: "quadrature box search".into(),
                    point: vec![0.0; n],
                    detail: format!("phase never reaches the truncation level {thresh:.3e}"),
                });
            }
            radii[d] = radii[d].max(r);
        }
    }
    Ok(radii)
}

fn validate_phase(n: usize, sigma: &dyn Fn(&[f64]) -> f64, radii: &[f64]) -> Result<()> {
    let origin = vec![0.0; n];
    let s0 = sigma(&origin);
    if s0.abs() > 1e-10 {
        return Err(HeatraceError::Positivity {
            context: "quadrature phase".into(),
            point: origin,
            detail: format!("phase at the minimum is {s0:.3e}, expected 0"),
        });
    }
    // Coarse scan; catches sign violations and non-origin minima on the
    // sample grid only.
    let m = 33usize;
    let check = |y: &[f64]| -> Result<()> {
        let v = sigma(y);
        let at_origin = y.iter().all(|&c| c == 0.0);
        if !at_origin && v <= 0.0 {
            return Err(HeatraceError::Positivity {
                context: "quadrature phase".into(),
                point: y.to_vec(),
                detail: format!("phase is {v:.3e} away from the minimum"),
            });
        }
        Ok(())
    };
    match n {
        1 => {
            for i in 0..=m {
                let y = [-radii[0] + 2.0 * radii[0] * i as f64 / m as f64];
                check(&y)?;
            }
        }
        2 => {
            for i in 0..=m {
                for j in 0..=m {
                    let y = [
                        -radii[0] + 2.0 * radii[0] * i as f64 / m as f64,
                        -radii[1] + 2.0 * radii[1] * j as f64 / m as f64,
                    ];
                    check(&y)?;
                }
            }
        }
        _ => {
            return Err(HeatraceError::model(
                "quadrature oracle supports dimensions 1 and 2",
            ))
        }
    }
    Ok(())
}

/// Evaluates `F(eps)` on an explicit box `[-r_d, r_d]` by nested
/// adaptive Simpson quadrature with absolute tolerance `abs_tol` on the
/// final normalized value.
pub fn quadrature_on_box(
    n: usize,
    sigma: &dyn Fn(&[f64]) -> f64,
    phi: &dyn Fn(&[f64]) -> f64,
    eps: f64,
    abs_tol: f64,
    radii: &[f64],
) -> Result<Quadrature> {
    if !(n == 1 || n == 2) {
        return Err(HeatraceError::model(
            "quadrature oracle supports dimensions 1 and 2",
        ));
    }
    if radii.len() != n || radii.iter().any(|&r| !(r > 0.0)) {
        return Err(HeatraceError::model("box radii must be positive"));
    }
    if !(eps > 0.0) {
        return Err(HeatraceError::model("eps must be positive"));
    }
    let prefactor = (4.0 * std::f64::consts::PI * eps).powf(-(n as f64) / 2.0);
    let raw_tol = abs_tol / prefactor;
    match n {
        1 => {
            let mut f = |y: f64| {
                let p = [y];
                (-sigma(&p) / (2.0 * eps)).exp() * phi(&p)
            };
            let mut state = AdaptState {
                f: &mut f,
                tol_scale: radii[0],
                min_h: eps.sqrt(),
                evals: 0,
                err: 0.0,
            };
            let value = adaptive_simpson(&mut state, -radii[0], radii[0], raw_tol)?;
            Ok(Quadrature {
                value: prefactor * value,
                error: prefactor * state.err,
                evals: state.evals,
            })
        }
        _ => {
            let width0 = 2.0 * radii[0];
            let inner_tol = raw_tol / (2.0 * width0);
            let outer_tol = raw_tol / 2.0;
            let mut evals = 0usize;
            let mut inner_err = 0.0_f64;
            let mut failure: Option<HeatraceError> = None;
            let mut f0 = |x: f64| {
                if failure.is_some() {
                    return 0.0;
                }
                let mut f1 = |y: f64| {
                    let p = [x, y];
                    (-sigma(&p) / (2.0 * eps)).exp() * phi(&p)
                };
                let mut state = AdaptState {
                    f: &mut f1,
                    tol_scale: radii[1],
                    min_h: eps.sqrt(),
                    evals: 0,
                    err: 0.0,
                };
                match adaptive_simpson(&mut state, -radii[1], radii[1], inner_tol) {
                    Ok(v) => {
                        evals += state.evals;
                        inner_err = inner_err.max(state.err);
                        v
                    }
                    Err(e) => {
                        failure = Some(e);
                        0.0
                    }
                }
            };
            let mut state = AdaptState {
                f: &mut f0,
                tol_scale: radii[0],
                min_h: eps.sqrt(),
                evals: 0,
                err: 0.0,
            };
            let result = adaptive_simpson(&mut state, -radii[0], radii[0], outer_tol);
            let outer_evals = state.evals;
            let outer_err = state.err;
            if let Some(e) = failure {
                return Err(e);
            }
            let value = result?;
            Ok(Quadrature {
                value: prefactor * value,
                error: prefactor * (outer_err + width0 * inner_err),
                evals: evals + outer_evals,
            })
        }
    }
}

/// Evaluates `F(eps)` directly, choosing the integration box from the
/// decay of the phase and validating that the phase is nonnegative with
/// its minimum at the origin.
pub fn quadrature_oracle(
    n: usize,
    sigma: &dyn Fn(&[f64]) -> f64,
    phi: &dyn Fn(&[f64]) -> f64,
    eps: f64,
    abs_tol: f64,
) -> Result<Quadrature> {
    let radii = locate_box(n, sigma, eps)?;
    validate_phase(n, sigma, &radii)?;
    quadrature_on_box(n, sigma, phi, eps, abs_tol, &radii)
}

/// Verifies the cubic symmetrization identity used to reduce fully
/// symmetrized double contractions:
///
/// ```text
/// G^ij G^kl G^mn Sigma_(ijk Sigma_lmn) =
///   (1/5) G^ij G^kl G^mn (2 Sigma_ikm Sigma_jln + 3 Sigma_ijm Sigma_kln)
/// ```
///
/// Returns true when both sides agree to relative precision 1e-12.
pub fn symmetrization_identity_check(model: &GaussianModel, sigma3: &Tab) -> Result<bool> {
    if sigma3.n() != model.n || sigma3.rank() != 3 {
        return Err(HeatraceError::model("sigma3 table must have rank 3"));
    }
    check_symmetric(sigma3, "sigma3")?;
    let n = model.n;
    let mut prod = Tab::zeros(n, 6);
    for_each_index(n, 6, |idx| {
        let v = sigma3.at(&idx[0..3]) * sigma3.at(&idx[3..6]);
        prod.add_at(idx, v);
    });
    prod.symmetrize_all();
    let mut lhs = 0.0;
    let mut exchange = 0.0;
    let mut trace = 0.0;
    for_each_index(n, 6, |idx| {
        let (i, j, k, l, m, nn) = (idx[0], idx[1], idx[2], idx[3], idx[4], idx[5]);
        let g3 = model.inverse(i, j) * model.inverse(k, l) * model.inverse(m, nn);
        lhs += g3 * prod.at(idx);
        exchange += g3 * sigma3.at(&[i, k, m]) * sigma3.at(&[j, l, nn]);
        trace += g3 * sigma3.at(&[i, j, m]) * sigma3.at(&[k, l, nn]);
    });
    let rhs = (2.0 * exchange + 3.0 * trace) / 5.0;
    let scale = lhs.abs().max(rhs.abs()).max(1e-300);
    Ok((lhs - rhs).abs() <= 1e-12 * scale.max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn model_1d() -> GaussianModel {
        GaussianModel::new(1, &[2.0]).unwrap()
    }

    fn model_2d() -> GaussianModel {
        GaussianModel::new(2, &[2.0, 0.4, 0.4, 1.5]).unwrap()
    }

    #[test]
    fn hessian_must_be_positive_definite() {
        assert!(GaussianModel::new(1, &[-1.0]).is_err());
        assert!(GaussianModel::new(2, &[1.0, 2.0, 2.0, 1.0]).is_err());
        assert!(GaussianModel::new(2, &[1.0, 0.5, -0.5, 1.0]).is_err());
    }

    #[test]
    fn moments_match_the_one_dimensional_gaussian() {
        let m = model_1d();
        assert!((gaussian_moment(&m, &[0, 0]).unwrap() - 1.0).abs() < 1e-14);
        assert!((gaussian_moment(&m, &[0, 0, 0, 0]).unwrap() - 3.0).abs() < 1e-14);
        assert!((gaussian_moment(&m, &[0; 6]).unwrap() - 15.0).abs() < 1e-13);
    }

    #[test]
    fn moments_match_quadrature() {
        // <y^2> = sqrt(det G) * (4 pi)^(-1/2) Int y^2 exp(-G y^2 / 4).
        let m = model_1d();
        let sigma = |y: &[f64]| y[0] * y[0];
        for (pow, want) in [(2, 1.0), (4, 3.0)] {
            let phi = move |y: &[f64]| y[0].powi(pow);
            let q = quadrature_oracle(1, &sigma, &phi, 1.0, 1e-12).unwrap();
            let avg = m.det().sqrt() * q.value;
            let idx = vec![0usize; pow as usize];
            assert!((avg - gaussian_moment(&m, &idx).unwrap()).abs() < 1e-10);
            assert!((avg - want).abs() < 1e-10);
        }
    }

    #[test]
    fn odd_moments_vanish() {
        let m = model_2d();
        for idx in [vec![0], vec![0, 1, 1], vec![0, 0, 1, 1, 0]] {
            assert_eq!(gaussian_moment(&m, &idx).unwrap(), 0.0);
            assert_eq!(gaussian_moment_formula(&m, &idx).unwrap(), 0.0);
        }
    }

    #[test]
    fn moments_factorize_for_independent_coordinates() {
        let m = GaussianModel::new(2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let mixed = gaussian_moment(&m, &[0, 0, 1, 1]).unwrap();
        let first = gaussian_moment(&m, &[0, 0]).unwrap();
        let second = gaussian_moment(&m, &[1, 1]).unwrap();
        assert!((mixed - first * second).abs() < 1e-14);
        assert!((mixed - 4.0).abs() < 1e-14);
    }

    #[test]
    fn wick_route_agrees_with_symmetrized_product_formula() {
        let m = model_2d();
        let mut tuples: Vec<Vec<usize>> = Vec::new();
        for_each_index(2, 4, |idx| tuples.push(idx.to_vec()));
        tuples.push(vec![0, 0, 1, 1, 0, 1]);
        tuples.push(vec![0, 1, 1, 1, 0, 0]);
        tuples.push(vec![0, 0, 0, 0, 1, 1, 1, 1]);
        tuples.push(vec![0, 1, 0, 1, 0, 1, 0, 1]);
        for idx in tuples {
            let a = gaussian_moment(&m, &idx).unwrap();
            let b = gaussian_moment_formula(&m, &idx).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{idx:?}: {a} vs {b}");
        }
    }

    #[test]
    fn moment_order_is_capped() {
        let m = model_1d();
        assert!(gaussian_moment(&m, &[0; 10]).is_err());
    }

    #[test]
    fn first_hermite_polynomial_is_half_g_y() {
        let m = model_2d();
        let h0 = hermite(&m, &[0]).unwrap();
        for y in [[0.3, -0.7], [1.1, 0.2]] {
            let want = 0.5 * (m.hessian(0, 0) * y[0] + m.hessian(0, 1) * y[1]);
            assert!((h0.eval(&y) - want).abs() < 1e-14);
            assert!((hermite_eval(&m, &[0], &y).unwrap() - want).abs() < 1e-14);
        }
    }

    #[test]
    fn hermite_polynomials_are_orthogonal_to_lower_degree() {
        let m = model_2d();
        let one = Poly::constant(2, 1.0);
        for idx in [vec![0, 0], vec![0, 1], vec![1, 1]] {
            let h = hermite(&m, &idx).unwrap();
            let avg = gaussian_average(&m, &h.mul(&one)).unwrap();
            assert!(avg.abs() < 1e-14, "H_{idx:?} against 1: {avg}");
        }
        let h3 = hermite(&m, &[0, 1, 1]).unwrap();
        let linear = Poly::var(2, 0).add(&Poly::var(2, 1).scale(0.5));
        let avg = gaussian_average(&m, &h3.mul(&linear)).unwrap();
        assert!(avg.abs() < 1e-13);
    }

    #[test]
    fn hermite_gram_matches_closed_form() {
        let m = model_2d();
        let g1 = hermite_orthogonality(&m, 1).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = 0.5 * m.hessian(i, j);
                assert!((g1.computed[i * 2 + j] - want).abs() < 1e-13);
            }
        }
        for k in 1..=3 {
            let gram = hermite_orthogonality(&m, k).unwrap();
            assert!(
                gram.max_deviation() < 1e-12,
                "rank {k} deviation {}",
                gram.max_deviation()
            );
        }
    }

    #[test]
    fn derivative_averages_equal_hermite_averages() {
        // <d_i f> = <H_i f> and <d_i d_j f> = <H_ij f>.
        let m = model_1d();
        let y = Poly::var(1, 0);
        let cases: Vec<(Vec<usize>, Poly)> = vec![
            (vec![0], y.mul(&y)),
            (vec![0], y.mul(&y).mul(&y)),
            (vec![0, 0], y.mul(&y).mul(&y).mul(&y)),
        ];
        for (idx, f) in cases {
            let mut df = f.clone();
            for &i in &idx {
                df = df.diff(i);
            }
            let lhs = gaussian_average(&m, &df).unwrap();
            let h = hermite(&m, &idx).unwrap();
            let rhs = gaussian_average(&m, &h.mul(&f)).unwrap();
            assert!((lhs - rhs).abs() < 1e-12, "{idx:?}: {lhs} vs {rhs}");
        }
        // The cubic case by quadrature on both sides: f = y^3 gives
        // <f'> = <3 y^2> = 3 and <H_1 f> = <y^4> = 3.
        let sigma = |p: &[f64]| p[0] * p[0];
        let lhs_q = quadrature_oracle(1, &sigma, &|p: &[f64]| 3.0 * p[0] * p[0], 1.0, 1e-12)
            .unwrap()
            .value;
        let h1 = hermite(&m, &[0]).unwrap();
        let rhs_q = quadrature_oracle(1, &sigma, &|p: &[f64]| h1.eval(p) * p[0].powi(3), 1.0, 1e-12)
            .unwrap()
            .value;
        let s = m.det().sqrt();
        assert!((s * lhs_q - 3.0).abs() < 1e-9);
        assert!((s * rhs_q - 3.0).abs() < 1e-9);
    }

    #[test]
    fn flat_expansion_of_constant_amplitude() {
        let m = model_2d();
        let jets = vec![
            Tab::from_fn(2, 0, |_| 1.0),
            Tab::zeros(2, 1),
            Tab::zeros(2, 2),
            Tab::zeros(2, 3),
            Tab::zeros(2, 4),
        ];
        let c = flat_expansion(&m, &jets, 2).unwrap();
        assert!((c[0] - m.det().sqrt().recip()).abs() < 1e-14);
        assert_eq!(c[1], 0.0);
        assert_eq!(c[2], 0.0);
    }

    #[test]
    fn flat_expansion_matches_the_closed_form_gaussian() {
        // F(eps) = (4 pi eps)^(-1/2) Int exp(-y^2/2eps) (1 + y^2)
        //        = 2^(-1/2) (1 + eps).
        let m = model_1d();
        let mut phi2 = Tab::zeros(1, 2);
        phi2.set(&[0, 0], 2.0);
        let jets = vec![
            Tab::from_fn(1, 0, |_| 1.0),
            Tab::zeros(1, 1),
            phi2,
            Tab::zeros(1, 3),
            Tab::zeros(1, 4),
        ];
        let c = flat_expansion(&m, &jets, 2).unwrap();
        assert!((c[0] - SQRT_HALF).abs() < 1e-14);
        assert!((c[1] - SQRT_HALF).abs() < 1e-14);
        assert!(c[2].abs() < 1e-14);
        for eps in [1e-2, 1e-1, 1.0] {
            let sigma = |y: &[f64]| y[0] * y[0];
            let phi = |y: &[f64]| 1.0 + y[0] * y[0];
            let q = quadrature_oracle(1, &sigma, &phi, eps, 1e-12).unwrap();
            assert!((q.value - SQRT_HALF * (1.0 + eps)).abs() < 1e-11);
        }
    }

    #[test]
    fn flat_expansion_jet_and_operator_routes_agree() {
        let m = model_2d();
        // phi = (1 + 0.3 y1 - 0.2 y2 + 0.15 y1 y2)^2, a degree-4 polynomial.
        let base = Poly::constant(2, 1.0)
            .add(&Poly::var(2, 0).scale(0.3))
            .add(&Poly::var(2, 1).scale(-0.2))
            .add(&Poly::var(2, 0).mul(&Poly::var(2, 1)).scale(0.15));
        let phi = base.mul(&base);
        let via_poly = flat_expansion_poly(&m, &phi, 2).unwrap();
        // Jets extracted by repeated differentiation at the origin.
        let origin = [0.0, 0.0];
        let mut jets = Vec::new();
        for r in 0..=4usize {
            let mut tab = Tab::zeros(2, r);
            for_each_index(2, r, |idx| {
                let mut d = phi.clone();
                for &i in idx {
                    d = d.diff(i);
                }
                tab.set(idx, d.eval(&origin));
            });
            jets.push(tab);
        }
        let via_jets = flat_expansion(&m, &jets, 2).unwrap();
        for (a, b) in via_jets.iter().zip(&via_poly) {
            assert!((a - b).abs() < 1e-13, "{via_jets:?} vs {via_poly:?}");
        }
    }

    #[test]
    fn morse_expansion_of_a_pure_gaussian() {
        let mut hess = Tab::zeros(1, 2);
        hess.set(&[0, 0], 2.0);
        let data = TaylorData::gaussian(1, hess, 1.0);
        let f = morse_expansion(&data, 1).unwrap();
        assert!((f[0] - SQRT_HALF).abs() < 1e-14);
        assert!(f[1].abs() < 1e-14);
    }

    #[test]
    fn cubic_phase_first_coefficient() {
        // Sigma = y^2 + a y^3: F_1 = 2^(-1/2) (15/8) a^2 from the
        // double-cubic block alone.
        let a = 0.1;
        let mut hess = Tab::zeros(1, 2);
        hess.set(&[0, 0], 2.0);
        let mut data = TaylorData::gaussian(1, hess, 1.0);
        data.sigma3.set(&[0, 0, 0], 6.0 * a);
        let f = morse_expansion(&data, 1).unwrap();
        assert!((f[0] - SQRT_HALF).abs() < 1e-14);
        assert!((f[1] - SQRT_HALF * (15.0 / 8.0) * a * a).abs() < 1e-14);
        // Order 2 requires a vanishing amplitude at the minimum.
        assert!(matches!(
            morse_expansion(&data, 2),
            Err(HeatraceError::Precondition { .. })
        ));
    }

    #[test]
    fn cubic_phase_against_restricted_quadrature() {
        // Quadrature residual against F_0 + eps F_1 scales as eps^2.
        let a = 0.1;
        let mut hess = Tab::zeros(1, 2);
        hess.set(&[0, 0], 2.0);
        let mut data = TaylorData::gaussian(1, hess, 1.0);
        data.sigma3.set(&[0, 0, 0], 6.0 * a);
        let f = morse_expansion(&data, 1).unwrap();
        let sigma = move |y: &[f64]| y[0] * y[0] + a * y[0] * y[0] * y[0];
        let phi = |_: &[f64]| 1.0;
        let mut resid = Vec::new();
        for eps in [1e-3, 2e-3, 4e-3] {
            let q = quadrature_oracle(1, &sigma, &phi, eps, 1e-13).unwrap();
            resid.push((q.value - (f[0] + eps * f[1])).abs());
        }
        let r1 = resid[1] / resid[0];
        let r2 = resid[2] / resid[1];
        assert!((3.0..5.0).contains(&r1), "ratio {r1}");
        assert!((3.0..5.0).contains(&r2), "ratio {r2}");
    }

    #[test]
    fn quartic_fixture_second_coefficient() {
        // Sigma = y^2 + 0.3 y^3 + 0.045 y^4, phi = y^2 + 0.5 y^3:
        // F_0 = 0, F_1 = 2^(-1/2), F_2 = -0.28125 * 2^(-1/2). The value
        // of F_2 collects the quartic, cubic-cubic, and mixed blocks.
        let data = quartic_fixture();
        let f = morse_expansion(&data, 2).unwrap();
        assert!(f[0].abs() < 1e-14);
        assert!((f[1] - SQRT_HALF).abs() < 1e-14);
        assert!((f[2] + 0.28125 * SQRT_HALF).abs() < 1e-13, "F2 = {}", f[2]);
    }

    fn quartic_fixture() -> TaylorData {
        let mut hess = Tab::zeros(1, 2);
        hess.set(&[0, 0], 2.0);
        let mut data = TaylorData::gaussian(1, hess, 0.0);
        data.sigma3.set(&[0, 0, 0], 1.8);
        data.sigma4.set(&[0, 0, 0, 0], 1.08);
        data.phi2.set(&[0, 0], 2.0);
        data.phi3.set(&[0, 0, 0], 3.0);
        data
    }

    fn quartic_sigma(y: &[f64]) -> f64 {
        let x = y[0];
        x * x + 0.3 * x * x * x + 0.045 * x * x * x * x
    }

    fn quartic_phi(y: &[f64]) -> f64 {
        let x = y[0];
        x * x + 0.5 * x * x * x
    }

    #[test]
    fn expansion_residual_has_cubic_slope() {
        // |F(eps) - (F_0 + eps F_1 + eps^2 F_2)| ~ eps^3 over the
        // window [1e-3, 1e-1].
        let data = quartic_fixture();
        let f = morse_expansion(&data, 2).unwrap();
        let eps_grid = [1e-3, 2.15e-3, 4.64e-3, 1e-2, 2.15e-2, 4.64e-2, 1e-1];
        let mut logs = Vec::new();
        for &eps in &eps_grid {
            let q = quadrature_oracle(1, &quartic_sigma, &quartic_phi, eps, 1e-13).unwrap();
            let r = (q.value - (f[0] + eps * f[1] + eps * eps * f[2])).abs();
            logs.push((eps.ln(), r.ln()));
        }
        let n = logs.len() as f64;
        let sx: f64 = logs.iter().map(|p| p.0).sum();
        let sy: f64 = logs.iter().map(|p| p.1).sum();
        let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!(slope >= 2.7, "slope {slope}");
    }

    #[test]
    fn two_dimensional_expansion_against_quadrature() {
        // Anisotropic Hessian with coupled cubic and quartic tables; the
        // series must track the integral through order eps^2.
        let n = 2;
        let mut hess = Tab::zeros(n, 2);
        hess.set(&[0, 0], 2.0);
        hess.set(&[0, 1], 0.4);
        hess.set(&[1, 0], 0.4);
        hess.set(&[1, 1], 1.5);
        let mut sigma3 = Tab::from_fn(n, 3, |idx| {
            0.05 * (idx[0] + idx[1] + idx[2]) as f64 - 0.02
        });
        sigma3.symmetrize_all();
        let mut sigma4 = Tab::from_fn(n, 4, |idx| {
            0.03 * (idx.iter().sum::<usize>() as f64) - 0.04
        });
        sigma4.symmetrize_all();
        let mut phi2 = Tab::zeros(n, 2);
        phi2.set(&[0, 0], 1.0);
        phi2.set(&[0, 1], 0.3);
        phi2.set(&[1, 0], 0.3);
        phi2.set(&[1, 1], 0.7);
        let data = TaylorData {
            n,
            hessian: hess,
            sigma3: sigma3.clone(),
            sigma4: sigma4.clone(),
            phi0: 0.0,
            phi1: Tab::zeros(n, 1),
            phi2: phi2.clone(),
            phi3: Tab::zeros(n, 3),
            phi4: Tab::zeros(n, 4),
            base: None,
        };
        let f = morse_expansion(&data, 2).unwrap();
        let sigma = move |y: &[f64]| {
            let mut v = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    v += 0.5 * data.hessian.at(&[i, j]) * y[i] * y[j];
                    for k in 0..2 {
                        v += sigma3.at(&[i, j, k]) * y[i] * y[j] * y[k] / 6.0;
                        for l in 0..2 {
                            v += sigma4.at(&[i, j, k, l]) * y[i] * y[j] * y[k] * y[l] / 24.0;
                        }
                    }
                }
            }
            v
        };
        let phi = move |y: &[f64]| {
            let mut v = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    v += 0.5 * phi2.at(&[i, j]) * y[i] * y[j];
                }
            }
            v
        };
        let mut resid = Vec::new();
        for eps in [4e-3, 8e-3] {
            let q = quadrature_oracle(2, &sigma, &phi, eps, 1e-11).unwrap();
            resid.push((q.value - (f[0] + eps * f[1] + eps * eps * f[2])).abs());
        }
        let ratio = resid[1] / resid[0];
        assert!((5.5..11.0).contains(&ratio), "ratio {ratio}, resid {resid:?}");
    }

    #[test]
    fn curved_mode_reduces_to_the_heat_coefficient() {
        // Feeding covariant Taylor data of the geodesic phase itself
        // (vanishing cubic and quartic tables, Hessian equal to the
        // metric) must give F_1 = [Lap phihat] - (1/3) R [phihat].
        let n = 2;
        let metric = {
            let mut t = Tab::zeros(n, 2);
            t.set(&[0, 0], 1.3);
            t.set(&[0, 1], 0.2);
            t.set(&[1, 0], 0.2);
            t.set(&[1, 1], 0.8);
            t
        };
        let ricci = {
            let mut t = Tab::zeros(n, 2);
            t.set(&[0, 0], 0.11);
            t.set(&[0, 1], -0.07);
            t.set(&[1, 0], -0.07);
            t.set(&[1, 1], 0.23);
            t
        };
        let mut ghess = vec![0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                ghess[i * 2 + j] = metric.at(&[i, j]);
            }
        }
        let gm = GaussianModel::new(2, &ghess).unwrap();
        let mut scalar = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                scalar += gm.inverse(i, j) * ricci.at(&[i, j]);
            }
        }
        let phi0 = 0.85;
        let mut phi2 = Tab::zeros(n, 2);
        phi2.set(&[0, 0], 0.4);
        phi2.set(&[0, 1], 0.1);
        phi2.set(&[1, 0], 0.1);
        phi2.set(&[1, 1], -0.6);
        let data = TaylorData {
            n,
            hessian: metric.clone(),
            sigma3: Tab::zeros(n, 3),
            sigma4: Tab::zeros(n, 4),
            phi0,
            phi1: Tab::zeros(n, 1),
            phi2: phi2.clone(),
            phi3: Tab::zeros(n, 3),
            phi4: Tab::zeros(n, 4),
            base: Some(BaseCurvature {
                metric: metric.clone(),
                ricci: ricci.clone(),
                scalar,
            }),
        };
        let f = morse_expansion(&data, 1).unwrap();
        // G = g makes the density prefactor unity.
        assert!((f[0] - phi0).abs() < 1e-13);
        let mut lap = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                lap += gm.inverse(i, j) * phi2.at(&[i, j]);
            }
        }
        let want = lap - scalar / 3.0 * phi0;
        assert!((f[1] - want).abs() < 1e-13, "{} vs {want}", f[1]);
    }

    #[test]
    fn scaling_phase_and_eps_together_rescales_the_integral() {
        // F_{2 Sigma}(2 eps) = 2^(-n/2) F_Sigma(eps): the exponent is
        // unchanged and the prefactor picks up the factor 2^(-n/2).
        let eps = 2e-3;
        let q1 = quadrature_oracle(1, &quartic_sigma, &quartic_phi, eps, 1e-13).unwrap();
        let scaled = |y: &[f64]| 2.0 * quartic_sigma(y);
        let q2 = quadrature_oracle(1, &scaled, &quartic_phi, 2.0 * eps, 1e-13).unwrap();
        assert!((q2.value * 2f64.sqrt() - q1.value).abs() < 1e-11);
        // On the series side each doubled table scales F_k by
        // 2^(-n/2 - k), matching (2 eps)^k F'_k = 2^(-n/2) eps^k F_k.
        let data = quartic_fixture();
        let mut doubled = data.clone();
        doubled.hessian = Tab::from_fn(1, 2, |idx| 2.0 * data.hessian.at(idx));
        doubled.sigma3 = Tab::from_fn(1, 3, |idx| 2.0 * data.sigma3.at(idx));
        doubled.sigma4 = Tab::from_fn(1, 4, |idx| 2.0 * data.sigma4.at(idx));
        let f = morse_expansion(&data, 2).unwrap();
        let fd = morse_expansion(&doubled, 2).unwrap();
        for k in 0..=2 {
            let want = f[k] * 2f64.powf(-0.5 - k as f64);
            assert!((fd[k] - want).abs() < 1e-13, "k={k}: {} vs {want}", fd[k]);
        }
    }

    #[test]
    fn quadrature_is_insensitive_to_the_box_size() {
        // Halving an already-sufficient box moves the value by at most
        // the boundary weight exp(-r^2 / 4 eps) for Sigma >= y^2 / 2.
        let eps = 0.01;
        let sigma = |y: &[f64]| y[0] * y[0];
        let phi = |_: &[f64]| 1.0;
        let radii = locate_box(1, &sigma, eps).unwrap();
        let full = quadrature_on_box(1, &sigma, &phi, eps, 1e-13, &radii).unwrap();
        let half = vec![radii[0] / 2.0];
        let trunc = quadrature_on_box(1, &sigma, &phi, eps, 1e-13, &half).unwrap();
        let bound = (-half[0] * half[0] / (4.0 * eps)).exp();
        assert!((full.value - trunc.value).abs() < bound.max(1e-12));
    }

    #[test]
    fn indefinite_phase_is_rejected() {
        let eps = 0.01;
        let bad = |y: &[f64]| y[0] * y[0] - 0.3 * y[0].powi(4);
        let phi = |_: &[f64]| 1.0;
        assert!(matches!(
            quadrature_oracle(1, &bad, &phi, eps, 1e-12),
            Err(HeatraceError::Positivity { .. })
        ));
        let negative = |y: &[f64]| -y[0] * y[0];
        assert!(quadrature_oracle(1, &negative, &phi, eps, 1e-12).is_err());
    }

    #[test]
    fn symmetrization_identity_holds() {
        let m1 = model_1d();
        let mut s1 = Tab::zeros(1, 3);
        s1.set(&[0, 0, 0], 0.7);
        assert!(symmetrization_identity_check(&m1, &s1).unwrap());

        let m2 = model_2d();
        let mut s2 = Tab::from_fn(2, 3, |idx| 0.3 * idx[0] as f64 - 0.4 * idx[1] as f64 + 0.25);
        s2.symmetrize_all();
        assert!(symmetrization_identity_check(&m2, &s2).unwrap());

        let zero = Tab::zeros(2, 3);
        assert!(symmetrization_identity_check(&m2, &zero).unwrap());
    }
}
