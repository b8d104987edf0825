//! Symmetric matrices, inertia, and quadratic matrix inequality (QMI) sets.
//!
//! A QMI set with partition `(q, r)` is
//! `{ Z in R^{r x q} : [I; Z]^T Pi [I; Z] >= 0 }`.
//! Data-consistency sets, dissipativity conditions, and interconnection
//! certificates are all expressed through this type.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serial::MatrixJson;

/// Relative tolerance for non-strict semidefiniteness.
pub const TOL_PSD: f64 = 1e-8;
/// Relative margin that encodes strict definiteness.
pub const DELTA_STRICT: f64 = 1e-6;
/// Eigenvalues below this fraction of the largest magnitude are truncated in
/// pseudoinverses.
pub const PINV_RTOL: f64 = 1e-10;
/// Smallest reciprocal condition accepted before inverting a QMI matrix.
pub const RCOND_MIN: f64 = 1e-12;
/// Default zero threshold for inertia counts.
pub const INERTIA_TOL: f64 = 1e-9;

/// Dense real symmetric matrix with finite entries.
///
/// Construction stores `(M + M^T) / 2`, so the stored entries are exactly
/// symmetric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixJson", into = "MatrixJson")]
pub struct SymMatrix(DMatrix<f64>);

impl TryFrom<DMatrix<f64>> for SymMatrix {
    type Error = Error;

    fn try_from(m: DMatrix<f64>) -> Result<Self> {
        SymMatrix::new(m)
    }
}

impl From<SymMatrix> for DMatrix<f64> {
    fn from(s: SymMatrix) -> Self {
        s.0
    }
}

impl TryFrom<MatrixJson> for SymMatrix {
    type Error = Error;

    fn try_from(j: MatrixJson) -> Result<Self> {
        SymMatrix::new(DMatrix::try_from(j)?)
    }
}

impl From<SymMatrix> for MatrixJson {
    fn from(s: SymMatrix) -> Self {
        MatrixJson::from(&s.0)
    }
}

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::invalid(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("matrix has non-finite entries"));
        }
        let sym = (&m + m.transpose()) * 0.5;
        Ok(SymMatrix(sym))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        SymMatrix::new(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn scaled_identity(n: usize, c: f64) -> Self {
        SymMatrix(DMatrix::identity(n, n) * c)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> DVector<f64> {
        if self.dim() == 0 {
            return DVector::zeros(0);
        }
        let mut ev: Vec<f64> = self.0.clone().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        DVector::from_vec(ev)
    }

    pub fn eigen(&self) -> SymmetricEigen<f64, nalgebra::Dyn> {
        SymmetricEigen::new(self.0.clone())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Spectral norm, i.e. the largest eigenvalue magnitude.
    pub fn spectral_norm(&self) -> f64 {
        self.eigenvalues().iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// `lambda_min >= -TOL_PSD * max(1, ||M||_2)`.
    pub fn is_psd(&self) -> bool {
        self.is_psd_with(TOL_PSD)
    }

    pub fn is_psd_with(&self, tol: f64) -> bool {
        if self.dim() == 0 {
            return true;
        }
        let ev = self.eigenvalues();
        let scale = ev.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
        ev[0] >= -tol * scale
    }

    /// `lambda_min >= DELTA_STRICT * max(1, ||M||_2)`.
    pub fn is_pd(&self) -> bool {
        if self.dim() == 0 {
            return true;
        }
        let ev = self.eigenvalues();
        let scale = ev.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
        ev[0] >= DELTA_STRICT * scale
    }

    /// `T^T M T`.
    pub fn congruence(&self, t: &DMatrix<f64>) -> SymMatrix {
        SymMatrix::new(t.transpose() * &self.0 * t).expect("congruence of a finite matrix is finite")
    }

    pub fn neg(&self) -> SymMatrix {
        SymMatrix(-&self.0)
    }

    /// Moore-Penrose pseudoinverse through the spectral decomposition.
    pub fn pinv(&self) -> DMatrix<f64> {
        let n = self.dim();
        if n == 0 {
            return DMatrix::zeros(0, 0);
        }
        let eig = self.eigen();
        let lmax = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        let cutoff = PINV_RTOL * lmax;
        let mut out = DMatrix::zeros(n, n);
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam.abs() > cutoff && lam != 0.0 {
                let v = eig.eigenvectors.column(k);
                out += (v * v.transpose()) / lam;
            }
        }
        (&out + out.transpose()) * 0.5
    }

    /// Reciprocal condition number `|lambda|_min / |lambda|_max`.
    pub fn rcond(&self) -> f64 {
        let ev = self.eigenvalues();
        let (lo, hi) = ev
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
        if hi == 0.0 {
            0.0
        } else {
            lo / hi
        }
    }

    pub fn inverse(&self) -> Result<SymMatrix> {
        let rcond = self.rcond();
        if !(rcond >= RCOND_MIN) {
            return Err(Error::Singular { rcond });
        }
        let inv = self
            .0
            .clone()
            .try_inverse()
            .ok_or(Error::Singular { rcond })?;
        SymMatrix::new(inv)
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 - &other.0)
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        SymMatrix(&self.0 * c)
    }
}

/// Counts of negative, zero, and positive eigenvalues.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inertia {
    pub neg: usize,
    pub zero: usize,
    pub pos: usize,
}

impl Inertia {
    pub fn new(neg: usize, zero: usize, pos: usize) -> Self {
        Inertia { neg, zero, pos }
    }

    pub fn dim(&self) -> usize {
        self.neg + self.zero + self.pos
    }
}

/// Eigenvalues with `|lambda| <= tol * max(1, rho)` count as zero.
pub fn inertia(m: &SymMatrix, tol: f64) -> Result<Inertia> {
    if !(tol >= 0.0) || !tol.is_finite() {
        return Err(Error::invalid(format!("inertia tolerance must be finite and >= 0, got {tol}")));
    }
    let ev = m.eigenvalues();
    let rho = ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let thr = tol * rho.max(1.0);
    let mut out = Inertia::new(0, 0, 0);
    for &l in ev.iter() {
        if l.abs() <= thr {
            out.zero += 1;
        } else if l < 0.0 {
            out.neg += 1;
        } else {
            out.pos += 1;
        }
    }
    Ok(out)
}

/// Solution set of `[I_q; Z]^T Pi [I_q; Z] >= 0` over `Z in R^{r x q}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QmiSet {
    pi: SymMatrix,
    q: usize,
    r: usize,
}

impl QmiSet {
    pub fn new(pi: SymMatrix, q: usize, r: usize) -> Result<Self> {
        if q == 0 || r == 0 {
            return Err(Error::invalid("QMI block dimensions must be positive"));
        }
        if pi.dim() != q + r {
            return Err(Error::invalid(format!(
                "QMI matrix has dimension {}, expected q + r = {}",
                pi.dim(),
                q + r
            )));
        }
        Ok(QmiSet { pi, q, r })
    }

    pub fn pi(&self) -> &SymMatrix {
        &self.pi
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn pi11(&self) -> SymMatrix {
        SymMatrix(self.pi.0.view((0, 0), (self.q, self.q)).into_owned())
    }

    pub fn pi12(&self) -> DMatrix<f64> {
        self.pi.0.view((0, self.q), (self.q, self.r)).into_owned()
    }

    pub fn pi22(&self) -> SymMatrix {
        SymMatrix(self.pi.0.view((self.q, self.q), (self.r, self.r)).into_owned())
    }

    /// `[I_q; Z]^T Pi [I_q; Z]` for `Z` of shape `r x q`.
    pub fn quadratic_form(&self, z: &DMatrix<f64>) -> Result<SymMatrix> {
        if z.nrows() != self.r || z.ncols() != self.q {
            return Err(Error::invalid(format!(
                "Z has shape {}x{}, expected {}x{}",
                z.nrows(),
                z.ncols(),
                self.r,
                self.q
            )));
        }
        let mut stacked = DMatrix::zeros(self.q + self.r, self.q);
        stacked.view_mut((0, 0), (self.q, self.q)).fill_with_identity();
        stacked.view_mut((self.q, 0), (self.r, self.q)).copy_from(z);
        Ok(self.pi.congruence(&stacked))
    }

    pub fn contains(&self, z: &DMatrix<f64>, strict: bool) -> Result<bool> {
        let form = self.quadratic_form(z)?;
        Ok(if strict { form.is_pd() } else { form.is_psd() })
    }

    /// Membership in the class where `Pi22 <= 0`, the generalized Schur
    /// complement is PSD, and `ker Pi22` is contained in `ker Pi12`.
    pub fn in_pi_class(&self) -> bool {
        let p22 = self.pi22();
        if !p22.neg().is_psd() {
            return false;
        }
        let p12 = self.pi12();
        let p22_pinv = p22.pinv();
        let schur = SymMatrix(&self.pi11().0 - &p12 * &p22_pinv * p12.transpose());
        if !schur.is_psd() {
            return false;
        }
        let proj = DMatrix::identity(self.r, self.r) - &p22_pinv * &p22.0;
        let leak = (&p12 * proj).norm();
        leak <= TOL_PSD * self.pi.spectral_norm().max(1.0)
    }

    /// `-Pi22^{-1} Pi21`, when `Pi22` is invertible.
    pub fn center(&self) -> Option<DMatrix<f64>> {
        let inv = self.pi22().0.try_inverse()?;
        Some(-inv * self.pi12().transpose())
    }

    /// Dual QMI: `Z in Z_r(Pi)` iff `Z^T in Z_q(Pi_hat)` for invertible `Pi`
    /// with a nonempty solution set (nonemptiness is not checked).
    pub fn dual(&self) -> Result<QmiSet> {
        let (q, r) = (self.q, self.r);
        let inv = self.pi.inverse()?;
        let mut left = DMatrix::<f64>::zeros(r + q, q + r);
        left.view_mut((0, q), (r, r)).fill_with_identity();
        left.view_mut((0, q), (r, r)).neg_mut();
        left.view_mut((r, 0), (q, q)).fill_with_identity();
        let mut right = DMatrix::<f64>::zeros(q + r, r + q);
        right.view_mut((0, r), (q, q)).fill_with_identity();
        right.view_mut((0, r), (q, q)).neg_mut();
        right.view_mut((q, 0), (r, r)).fill_with_identity();
        let hat = SymMatrix::new(left * inv.0 * right)?;
        QmiSet::new(hat, r, q)
    }
}

/// Sufficient condition of the matrix S-lemma: `M - alpha N >= 0` implies
/// `Z_r(N)` is contained in `Z_r(M)`.
pub fn s_lemma_holds(m: &QmiSet, n: &QmiSet, alpha: f64) -> Result<bool> {
    if m.q != n.q || m.r != n.r {
        return Err(Error::invalid("S-lemma operands must share block dimensions"));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("S-lemma multiplier must be >= 0, got {alpha}")));
    }
    Ok(m.pi.sub(&n.pi.scale(alpha)).is_psd())
}
