//! Quadratic supply rates, storage matrices, and model-based dissipativity
//! checks. These are the ground-truth oracles used to validate controllers
//! synthesized from data.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matqmi::{inertia, Inertia, SymMatrix, DELTA_STRICT, INERTIA_TOL, TOL_PSD};
use crate::synth::sdp::{AffineSym, SdpOutcome, SdpProblem};

/// How `(F, G, H)` define the supply matrix `S`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parametrization {
    /// `S = [[H, G^T], [G, F]]`.
    Direct,
    /// `S = [[H, G^T], [G, F]]^{-1}`.
    InverseBlock,
}

/// Quadratic supply rate `s(v, y) = [v; y]^T S [v; y]` with `v` in `R^q`
/// and `y` in `R^p`. `H` is `q x q`, `G` is `p x q`, `F` is `p x p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupplyRate {
    pub f: SymMatrix,
    #[serde(with = "crate::serial::dmatrix")]
    pub g: DMatrix<f64>,
    pub h: SymMatrix,
    pub parametrization: Parametrization,
}

impl SupplyRate {
    pub fn new(f: SymMatrix, g: DMatrix<f64>, h: SymMatrix, parametrization: Parametrization) -> Result<Self> {
        if g.nrows() != f.dim() || g.ncols() != h.dim() {
            return Err(Error::invalid(format!(
                "supply blocks inconsistent: F {}x{}, G {}x{}, H {}x{}",
                f.dim(),
                f.dim(),
                g.nrows(),
                g.ncols(),
                h.dim(),
                h.dim()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("supply block G has non-finite entries"));
        }
        Ok(SupplyRate { f, g, h, parametrization })
    }

    /// `(F, G, H) = (0, I/2, 0)` in direct form.
    pub fn passivity(p: usize) -> Self {
        SupplyRate {
            f: SymMatrix::zeros(p),
            g: DMatrix::identity(p, p) * 0.5,
            h: SymMatrix::zeros(p),
            parametrization: Parametrization::Direct,
        }
    }

    /// `(F, G, H) = (-I_p, 0, gamma^2 I_q)` in direct form.
    pub fn l2_gain(q: usize, p: usize, gamma: f64) -> Self {
        SupplyRate {
            f: SymMatrix::scaled_identity(p, -1.0),
            g: DMatrix::zeros(p, q),
            h: SymMatrix::scaled_identity(q, gamma * gamma),
            parametrization: Parametrization::Direct,
        }
    }

    /// Input dimension `q`.
    pub fn input_dim(&self) -> usize {
        self.h.dim()
    }

    /// Output dimension `p`.
    pub fn output_dim(&self) -> usize {
        self.f.dim()
    }

    /// `[[H, G^T], [G, F]]`.
    pub fn block_matrix(&self) -> SymMatrix {
        let (q, p) = (self.input_dim(), self.output_dim());
        let mut m = DMatrix::zeros(q + p, q + p);
        m.view_mut((0, 0), (q, q)).copy_from(self.h.matrix());
        m.view_mut((q, 0), (p, q)).copy_from(&self.g);
        m.view_mut((0, q), (q, p)).copy_from(&self.g.transpose());
        m.view_mut((q, q), (p, p)).copy_from(self.f.matrix());
        SymMatrix::new(m).expect("finite blocks")
    }

    pub fn supply_matrix(&self) -> Result<SymMatrix> {
        let block = self.block_matrix();
        match self.parametrization {
            Parametrization::Direct => Ok(block),
            Parametrization::InverseBlock => block.inverse(),
        }
    }

    pub fn with_parametrization(&self, parametrization: Parametrization) -> Self {
        SupplyRate { parametrization, ..self.clone() }
    }

    /// `s(v, y)`.
    pub fn evaluate(&self, s: &SymMatrix, v: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let z = DVector::from_iterator(v.len() + y.len(), v.iter().chain(y.iter()).copied());
        (z.transpose() * s.matrix() * &z)[(0, 0)]
    }
}

/// Storage matrix `P` of `V(x) = x^T P x`, positive definite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SymMatrix", into = "SymMatrix")]
pub struct StorageMatrix(SymMatrix);

impl TryFrom<SymMatrix> for StorageMatrix {
    type Error = Error;

    fn try_from(p: SymMatrix) -> Result<Self> {
        StorageMatrix::new(p)
    }
}

impl From<StorageMatrix> for SymMatrix {
    fn from(s: StorageMatrix) -> Self {
        s.0
    }
}

impl StorageMatrix {
    pub fn new(p: SymMatrix) -> Result<Self> {
        // Positivity relative to the matrix's own scale.
        let ev = p.eigenvalues();
        let top = ev.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if p.dim() == 0 || !(ev[0] > 0.0) || ev[0] < DELTA_STRICT * 1e-6 * top {
            return Err(Error::invalid("storage matrix must be positive definite"));
        }
        Ok(StorageMatrix(p))
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }
}

/// `x+ = A x + B v`, `y = C x + D v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    #[serde(with = "crate::serial::dmatrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::serial::dmatrix")]
    pub b: DMatrix<f64>,
    #[serde(with = "crate::serial::dmatrix")]
    pub c: DMatrix<f64>,
    #[serde(with = "crate::serial::dmatrix")]
    pub d: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let ok = a.ncols() == n
            && b.nrows() == n
            && c.ncols() == n
            && d.nrows() == c.nrows()
            && d.ncols() == b.ncols();
        if !ok {
            return Err(Error::invalid(format!(
                "inconsistent shapes: A {:?}, B {:?}, C {:?}, D {:?}",
                a.shape(),
                b.shape(),
                c.shape(),
                d.shape()
            )));
        }
        Ok(LinearSystem { a, b, c, d })
    }

    pub fn scalar(a: f64, b: f64, c: f64, d: f64) -> Self {
        LinearSystem {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            c: DMatrix::from_element(1, 1, c),
            d: DMatrix::from_element(1, 1, d),
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    fn check_supply(&self, s: &SupplyRate) -> Result<()> {
        if s.input_dim() != self.input_dim() || s.output_dim() != self.output_dim() {
            return Err(Error::invalid(format!(
                "supply is dimensioned (q, p) = ({}, {}), system has ({}, {})",
                s.input_dim(),
                s.output_dim(),
                self.input_dim(),
                self.output_dim()
            )));
        }
        Ok(())
    }
}

/// `[I 0; A B]^T diag(P, -P) [I 0; A B] + [0 I; C D]^T S [0 I; C D]`.
pub fn dissipation_residual(sys: &LinearSystem, s: &SymMatrix, p: &SymMatrix) -> SymMatrix {
    let (n, q) = (sys.n(), sys.input_dim());
    let e1 = identity_head(n, n + q);
    let e2 = hcat(&sys.a, &sys.b);
    let w = io_map(sys);
    let m = e1.transpose() * p.matrix() * &e1 - e2.transpose() * p.matrix() * &e2 + w.transpose() * s.matrix() * &w;
    SymMatrix::new(m).expect("finite residual")
}

/// Model-based dissipativity test: searches for `P >= delta I` satisfying
/// the dissipation LMI. `None` means the solver certified infeasibility.
pub fn check_dissipativity(sys: &LinearSystem, s: &SupplyRate) -> Result<Option<StorageMatrix>> {
    sys.check_supply(s)?;
    let smat = s.supply_matrix()?;
    let (n, q) = (sys.n(), sys.input_dim());

    let mut prob = SdpProblem::new();
    let pv = prob.sym(n);
    let mut pexpr = AffineSym::zeros(n);
    pexpr.add_sym(&pv, 0, 1.0);

    let e1 = identity_head(n, n + q);
    let e2 = hcat(&sys.a, &sys.b);
    let w = io_map(sys);
    let mut lmi = pexpr.congruence(&e1);
    lmi.add_expr(&pexpr.congruence(&e2), -1.0);
    lmi.add_constant_block(0, 0, &(w.transpose() * smat.matrix() * &w));
    prob.require_psd(lmi, 0.0, "dissipation LMI");
    prob.require_psd(pexpr, DELTA_STRICT, "P > 0");

    match prob.solve()? {
        SdpOutcome::Feasible(sol) => Ok(Some(StorageMatrix::new(sol.sym(&pv))?)),
        SdpOutcome::Infeasible { .. } => Ok(None),
    }
}

/// Dual form of the dissipativity test in `Q = P^{-1}`; requires
/// `In(S) = (p, 0, q)`.
pub fn check_dissipativity_dual(sys: &LinearSystem, s: &SupplyRate) -> Result<Option<StorageMatrix>> {
    sys.check_supply(s)?;
    let smat = s.supply_matrix()?;
    let (n, q, p) = (sys.n(), sys.input_dim(), sys.output_dim());
    let inr = inertia(&smat, INERTIA_TOL)?;
    if inr != Inertia::new(p, 0, q) {
        return Err(Error::Precondition(format!(
            "supply inertia is ({}, {}, {}), dual test needs ({p}, 0, {q})",
            inr.neg, inr.zero, inr.pos
        )));
    }
    let sinv = smat.inverse()?;
    // [[0, -I_p], [I_q, 0]] S^{-1} [[0, -I_q], [I_p, 0]]
    let mut left = DMatrix::<f64>::zeros(p + q, q + p);
    left.view_mut((0, q), (p, p)).fill_with_identity();
    left.view_mut((0, q), (p, p)).neg_mut();
    left.view_mut((p, 0), (q, q)).fill_with_identity();
    let mut right = DMatrix::<f64>::zeros(q + p, p + q);
    right.view_mut((0, p), (q, q)).fill_with_identity();
    right.view_mut((0, p), (q, q)).neg_mut();
    right.view_mut((q, 0), (p, p)).fill_with_identity();
    let mid = left * sinv.matrix() * right;

    let mut prob = SdpProblem::new();
    let qv = prob.sym(n);
    let mut qexpr = AffineSym::zeros(n);
    qexpr.add_sym(&qv, 0, 1.0);

    let e1 = identity_head(n, n + p);
    let e2 = hcat(&sys.a.transpose(), &sys.c.transpose());
    let mut v = DMatrix::zeros(p + q, n + p);
    v.view_mut((0, n), (p, p)).fill_with_identity();
    v.view_mut((p, 0), (q, n)).copy_from(&sys.b.transpose());
    v.view_mut((p, n), (q, p)).copy_from(&sys.d.transpose());

    let mut lmi = qexpr.congruence(&e1);
    lmi.add_expr(&qexpr.congruence(&e2), -1.0);
    let cst = v.transpose() * &mid * &v;
    lmi.add_constant_block(0, 0, &((&cst + cst.transpose()) * 0.5));
    prob.require_psd(lmi, 0.0, "dual dissipation LMI");
    prob.require_psd(qexpr, DELTA_STRICT, "Q > 0");

    match prob.solve()? {
        SdpOutcome::Feasible(sol) => {
            let qm = sol.sym(&qv);
            Ok(Some(StorageMatrix::new(qm.inverse()?)?))
        }
        SdpOutcome::Infeasible { .. } => Ok(None),
    }
}

/// Samples `trials` unit-norm `(x, v)` pairs and checks
/// `V(x+) - V(x) <= s(v, y) + TOL_PSD * (1 + ||P|| + ||S||)` on each.
/// Deterministic in `seed`.
pub fn verify_trajectory_dissipation(
    sys: &LinearSystem,
    s: &SupplyRate,
    p: &StorageMatrix,
    trials: usize,
    seed: u64,
) -> Result<bool> {
    sys.check_supply(s)?;
    if p.dim() != sys.n() {
        return Err(Error::invalid("storage matrix dimension differs from the state dimension"));
    }
    let smat = s.supply_matrix()?;
    let pm = p.matrix().matrix();
    let scale = 1.0 + p.matrix().spectral_norm() + smat.spectral_norm();
    let tol = TOL_PSD * scale;
    let (n, q) = (sys.n(), sys.input_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let mut z = DVector::<f64>::from_fn(n + q, |_, _| StandardNormal.sample(&mut rng));
        let norm = z.norm();
        if norm > 0.0 {
            z /= norm;
        }
        let x = z.rows(0, n).into_owned();
        let v = z.rows(n, q).into_owned();
        let xp = &sys.a * &x + &sys.b * &v;
        let y = &sys.c * &x + &sys.d * &v;
        let dv = (xp.transpose() * pm * &xp)[(0, 0)] - (x.transpose() * pm * &x)[(0, 0)];
        if dv > s.evaluate(&smat, &v, &y) + tol {
            return Ok(false);
        }
    }
    Ok(true)
}

fn identity_head(n: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, cols);
    m.view_mut((0, 0), (n, n)).fill_with_identity();
    m
}

pub(crate) fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    m
}

/// `[0 I; C D]`, mapping `[x; v]` to `[v; y]`.
fn io_map(sys: &LinearSystem) -> DMatrix<f64> {
    let (n, q, p) = (sys.n(), sys.input_dim(), sys.output_dim());
    let mut w = DMatrix::zeros(q + p, n + q);
    w.view_mut((0, n), (q, q)).fill_with_identity();
    w.view_mut((q, 0), (p, n)).copy_from(&sys.c);
    w.view_mut((q, n), (p, q)).copy_from(&sys.d);
    w
}
