//! Small dense complex matrices for fiber endomorphisms.
//!
//! Bundle fibers in this crate are low-dimensional (1, 2, or 4), so fiber
//! data — connection components, potentials, gamma matrices — is stored as
//! plain row-major `Vec<Complex64>` blocks. Fields of endomorphisms over a
//! grid store one such block per point.
//!
//! Hermiticity is never assumed silently: constructors that require a
//! (anti-)Hermitian matrix symmetrize the input and report the correction
//! norm, so violations surface as data instead of contaminating results.

use num_complex::Complex64;
use std::ops::{Add, Mul, Sub};

/// Dense row-major complex matrix of small fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct CMat {
    dim: usize,
    a: Vec<Complex64>,
}

impl CMat {
    /// Zero matrix of dimension `dim`.
    pub fn zeros(dim: usize) -> CMat {
        CMat {
            dim,
            a: vec![Complex64::ZERO; dim * dim],
        }
    }

    /// Identity matrix of dimension `dim`.
    pub fn identity(dim: usize) -> CMat {
        let mut m = CMat::zeros(dim);
        for i in 0..dim {
            m.a[i * dim + i] = Complex64::ONE;
        }
        m
    }

    /// Build from a row-major slice of entries.
    ///
    /// # Panics
    ///
    /// Panics when `entries.len() != dim * dim`.
    pub fn from_rows(dim: usize, entries: &[Complex64]) -> CMat {
        assert_eq!(entries.len(), dim * dim, "entry count mismatch");
        CMat {
            dim,
            a: entries.to_vec(),
        }
    }

    /// Build from a function of (row, col).
    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> Complex64) -> CMat {
        let mut m = CMat::zeros(dim);
        for r in 0..dim {
            for c in 0..dim {
                m.a[r * dim + c] = f(r, c);
            }
        }
        m
    }

    /// Real diagonal scalar matrix `x * I`.
    pub fn scalar(dim: usize, x: Complex64) -> CMat {
        let mut m = CMat::zeros(dim);
        for i in 0..dim {
            m.a[i * dim + i] = x;
        }
        m
    }

    /// Matrix dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Entry at (row, col).
    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.a[r * self.dim + c]
    }

    /// Set entry at (row, col).
    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        self.a[r * self.dim + c] = v;
    }

    /// Raw row-major entries.
    pub fn entries(&self) -> &[Complex64] {
        &self.a
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> CMat {
        CMat::from_fn(self.dim, |r, c| self.get(c, r).conj())
    }

    /// Trace.
    pub fn trace(&self) -> Complex64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Scale by a complex number.
    pub fn scale(&self, x: Complex64) -> CMat {
        CMat {
            dim: self.dim,
            a: self.a.iter().map(|z| z * x).collect(),
        }
    }

    /// Scale by a real number.
    pub fn scale_re(&self, x: f64) -> CMat {
        self.scale(Complex64::from(x))
    }

    /// `self + other * x` accumulated in place.
    pub fn axpy(&mut self, x: Complex64, other: &CMat) {
        assert_eq!(self.dim, other.dim);
        for (s, o) in self.a.iter_mut().zip(&other.a) {
            *s += x * o;
        }
    }

    /// Commutator `[self, other]`.
    pub fn commutator(&self, other: &CMat) -> CMat {
        self * other - other * self
    }

    /// Anticommutator `{self, other}`.
    pub fn anticommutator(&self, other: &CMat) -> CMat {
        self * other + other * self
    }

    /// Split into Hermitian part and the Frobenius norm of the removed
    /// anti-Hermitian part.
    pub fn hermitian_split(&self) -> (CMat, f64) {
        let adj = self.adjoint();
        let herm = (self + &adj).scale_re(0.5);
        let anti = (self - &adj).scale_re(0.5);
        (herm, anti.norm())
    }

    /// Split into anti-Hermitian part and the Frobenius norm of the removed
    /// Hermitian part.
    pub fn anti_hermitian_split(&self) -> (CMat, f64) {
        let adj = self.adjoint();
        let anti = (self - &adj).scale_re(0.5);
        let herm = (self + &adj).scale_re(0.5);
        (anti, herm.norm())
    }

    /// Frobenius distance to another matrix.
    pub fn distance(&self, other: &CMat) -> f64 {
        (self - other).norm()
    }
}

impl Add for &CMat {
    type Output = CMat;
    fn add(self, rhs: &CMat) -> CMat {
        assert_eq!(self.dim, rhs.dim);
        CMat {
            dim: self.dim,
            a: self.a.iter().zip(&rhs.a).map(|(x, y)| x + y).collect(),
        }
    }
}

impl Sub for &CMat {
    type Output = CMat;
    fn sub(self, rhs: &CMat) -> CMat {
        assert_eq!(self.dim, rhs.dim);
        CMat {
            dim: self.dim,
            a: self.a.iter().zip(&rhs.a).map(|(x, y)| x - y).collect(),
        }
    }
}

impl Mul for &CMat {
    type Output = CMat;
    fn mul(self, rhs: &CMat) -> CMat {
        assert_eq!(self.dim, rhs.dim);
        let d = self.dim;
        let mut out = CMat::zeros(d);
        for r in 0..d {
            for k in 0..d {
                let x = self.a[r * d + k];
                if x == Complex64::ZERO {
                    continue;
                }
                for c in 0..d {
                    out.a[r * d + c] += x * rhs.a[k * d + c];
                }
            }
        }
        out
    }
}

impl Add for CMat {
    type Output = CMat;
    fn add(self, rhs: CMat) -> CMat {
        &self + &rhs
    }
}

impl Sub for CMat {
    type Output = CMat;
    fn sub(self, rhs: CMat) -> CMat {
        &self - &rhs
    }
}

impl Mul for CMat {
    type Output = CMat;
    fn mul(self, rhs: CMat) -> CMat {
        &self * &rhs
    }
}

/// Field of fiber endomorphisms over a grid: one `dim x dim` block per point.
#[derive(Debug, Clone)]
pub struct EndoField {
    fiber: usize,
    npts: usize,
    data: Vec<Complex64>,
}

impl EndoField {
    /// Zero field.
    pub fn zeros(npts: usize, fiber: usize) -> EndoField {
        EndoField {
            fiber,
            npts,
            data: vec![Complex64::ZERO; npts * fiber * fiber],
        }
    }

    /// Constant field equal to `m` at every point.
    pub fn constant(npts: usize, m: &CMat) -> EndoField {
        let mut f = EndoField::zeros(npts, m.dim());
        for p in 0..npts {
            f.set(p, m);
        }
        f
    }

    /// Build from a function of the point index.
    pub fn from_fn(npts: usize, fiber: usize, f: impl Fn(usize) -> CMat) -> EndoField {
        let mut e = EndoField::zeros(npts, fiber);
        for p in 0..npts {
            let m = f(p);
            assert_eq!(m.dim(), fiber, "fiber dimension mismatch");
            e.set(p, &m);
        }
        e
    }

    /// Fiber dimension.
    pub fn fiber(&self) -> usize {
        self.fiber
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.npts
    }

    /// True when the field covers no points.
    pub fn is_empty(&self) -> bool {
        self.npts == 0
    }

    /// Copy of the block at point `p`.
    pub fn get(&self, p: usize) -> CMat {
        let f2 = self.fiber * self.fiber;
        CMat::from_rows(self.fiber, &self.data[p * f2..(p + 1) * f2])
    }

    /// Overwrite the block at point `p`.
    pub fn set(&mut self, p: usize, m: &CMat) {
        assert_eq!(m.dim(), self.fiber);
        let f2 = self.fiber * self.fiber;
        self.data[p * f2..(p + 1) * f2].copy_from_slice(m.entries());
    }

    /// Raw block at point `p`, row-major.
    pub fn block(&self, p: usize) -> &[Complex64] {
        let f2 = self.fiber * self.fiber;
        &self.data[p * f2..(p + 1) * f2]
    }

    /// Largest Frobenius norm over all points.
    pub fn max_norm(&self) -> f64 {
        (0..self.npts)
            .map(|p| self.get(p).norm())
            .fold(0.0, f64::max)
    }

    /// Hermitize every block; returns the largest correction norm seen.
    pub fn hermitize(&mut self) -> f64 {
        let mut worst: f64 = 0.0;
        for p in 0..self.npts {
            let (h, corr) = self.get(p).hermitian_split();
            self.set(p, &h);
            worst = worst.max(corr);
        }
        worst
    }

    /// Anti-Hermitize every block; returns the largest correction norm seen.
    pub fn anti_hermitize(&mut self) -> f64 {
        let mut worst: f64 = 0.0;
        for p in 0..self.npts {
            let (h, corr) = self.get(p).anti_hermitian_split();
            self.set(p, &h);
            worst = worst.max(corr);
        }
        worst
    }
}

/// The three Pauli matrices together with the identity, dimension 2.
pub fn pauli() -> [CMat; 4] {
    let i = Complex64::I;
    let one = Complex64::ONE;
    let zero = Complex64::ZERO;
    [
        CMat::identity(2),
        CMat::from_rows(2, &[zero, one, one, zero]),
        CMat::from_rows(2, &[zero, -i, i, zero]),
        CMat::from_rows(2, &[one, zero, zero, -one]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pauli_algebra() {
        let [id, s1, s2, s3] = pauli();
        assert!((&s1 * &s1).distance(&id) < 1e-15);
        assert!((&s2 * &s2).distance(&id) < 1e-15);
        // sigma1 sigma2 = i sigma3
        assert!((&s1 * &s2).distance(&s3.scale(Complex64::I)) < 1e-15);
        // {sigma1, sigma2} = 0
        assert!(s1.anticommutator(&s2).norm() < 1e-15);
        assert!((s1.trace().norm()) < 1e-15);
        assert!((id.trace() - Complex64::from(2.0)).norm() < 1e-15);
    }

    #[test]
    fn hermitian_split_recovers_parts() {
        let h = CMat::from_rows(
            2,
            &[
                Complex64::new(1.0, 0.0),
                Complex64::new(0.5, -0.25),
                Complex64::new(0.5, 0.25),
                Complex64::new(-2.0, 0.0),
            ],
        );
        let a = CMat::from_rows(
            2,
            &[
                Complex64::new(0.0, 0.5),
                Complex64::new(0.1, 0.2),
                Complex64::new(-0.1, 0.2),
                Complex64::new(0.0, -0.7),
            ],
        );
        let m = &h + &a;
        let (h2, corr) = m.hermitian_split();
        assert!(h2.distance(&h) < 1e-15);
        assert!((corr - a.norm()).abs() < 1e-15);
    }

    #[test]
    fn endo_field_roundtrip() {
        let m = CMat::from_fn(2, |r, c| Complex64::new(r as f64, c as f64));
        let mut f = EndoField::zeros(5, 2);
        f.set(3, &m);
        assert_eq!(f.get(3), m);
        assert!(f.get(2).norm() < 1e-300);
    }
}
