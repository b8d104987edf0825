//! A small LMI modelling layer over the Clarabel conic solver.
//!
//! Decision variables are flattened into scalar columns. Every constraint is
//! a symmetric affine matrix expression required to satisfy
//! `expr(x) - margin * I >= 0`; one-dimensional constraints become
//! nonnegative-cone rows, larger ones become PSD-triangle cones.

use std::collections::BTreeMap;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matqmi::{SymMatrix, TOL_PSD};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScalarVar(usize);

/// Symmetric matrix variable; one scalar column per upper-triangular entry.
#[derive(Clone, Debug)]
pub struct SymVar {
    dim: usize,
    start: usize,
}

impl SymVar {
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.start + j * (j + 1) / 2 + i
    }
}

/// General (unstructured) matrix variable, column-major.
#[derive(Clone, Debug)]
pub struct MatVar {
    rows: usize,
    cols: usize,
    start: usize,
}

impl MatVar {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn index(&self, i: usize, j: usize) -> usize {
        self.start + j * self.rows + i
    }
}

/// `constant + sum_k x_k * coef_k` with symmetric coefficients.
#[derive(Clone, Debug)]
pub struct AffineSym {
    dim: usize,
    constant: DMatrix<f64>,
    terms: BTreeMap<usize, DMatrix<f64>>,
}

impl AffineSym {
    pub fn zeros(dim: usize) -> Self {
        AffineSym { dim, constant: DMatrix::zeros(dim, dim), terms: BTreeMap::new() }
    }

    pub fn constant(m: &SymMatrix) -> Self {
        AffineSym { dim: m.dim(), constant: m.matrix().clone(), terms: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn term(&mut self, var: usize) -> &mut DMatrix<f64> {
        let dim = self.dim;
        self.terms.entry(var).or_insert_with(|| DMatrix::zeros(dim, dim))
    }

    /// Adds `c` at `(i, j)` and `(j, i)` of the coefficient of `var`
    /// (once on the diagonal).
    fn put(&mut self, var: usize, i: usize, j: usize, c: f64) {
        let t = self.term(var);
        t[(i, j)] += c;
        if i != j {
            t[(j, i)] += c;
        }
    }

    /// Places `block` at offset `(row, col)` and its transpose at
    /// `(col, row)`. A diagonal placement must be symmetric.
    pub fn add_constant_block(&mut self, row: usize, col: usize, block: &DMatrix<f64>) -> &mut Self {
        let (r, c) = block.shape();
        if row == col {
            let sym = (block + block.transpose()) * 0.5;
            let mut v = self.constant.view_mut((row, col), (r, c));
            v += sym;
        } else {
            {
                let mut v = self.constant.view_mut((row, col), (r, c));
                v += block;
            }
            let mut vt = self.constant.view_mut((col, row), (c, r));
            vt += block.transpose();
        }
        self
    }

    /// Adds `s * coef` with `coef` symmetric and full size.
    pub fn add_scalar(&mut self, var: ScalarVar, coef: &DMatrix<f64>) -> &mut Self {
        assert_eq!(coef.shape(), (self.dim, self.dim));
        *self.term(var.0) += coef;
        self
    }

    /// Adds `s * c` on the diagonal block starting at `offset` of size `n`.
    pub fn add_scalar_identity(&mut self, var: ScalarVar, offset: usize, n: usize, c: f64) -> &mut Self {
        for k in 0..n {
            self.put(var.0, offset + k, offset + k, c);
        }
        self
    }

    /// Places `scale * V` on the diagonal block at `offset`.
    pub fn add_sym(&mut self, v: &SymVar, offset: usize, scale: f64) -> &mut Self {
        for j in 0..v.dim {
            for i in 0..=j {
                self.put(v.index(i, j), offset + i, offset + j, scale);
            }
        }
        self
    }

    /// Adds `scale * trace(V)` at diagonal entry `(at, at)`.
    pub fn add_sym_trace(&mut self, v: &SymVar, at: usize, scale: f64) -> &mut Self {
        for i in 0..v.dim {
            self.put(v.index(i, i), at, at, scale);
        }
        self
    }

    /// Places `scale * X` at `(row, col)` and `scale * X^T` at `(col, row)`.
    /// The two blocks must not overlap.
    pub fn add_mat(&mut self, x: &MatVar, row: usize, col: usize, scale: f64) -> &mut Self {
        for j in 0..x.cols {
            for i in 0..x.rows {
                let t = self.term(x.index(i, j));
                t[(row + i, col + j)] += scale;
                t[(col + j, row + i)] += scale;
            }
        }
        self
    }

    /// Places the symmetric part of `scale * X` on the diagonal block at
    /// `offset` (X square).
    pub fn add_mat_sym_part(&mut self, x: &MatVar, offset: usize, scale: f64) -> &mut Self {
        assert_eq!(x.rows, x.cols);
        for j in 0..x.cols {
            for i in 0..x.rows {
                let t = self.term(x.index(i, j));
                t[(offset + i, offset + j)] += 0.5 * scale;
                t[(offset + j, offset + i)] += 0.5 * scale;
            }
        }
        self
    }

    /// Adds `scale * other`.
    pub fn add_expr(&mut self, other: &AffineSym, scale: f64) -> &mut Self {
        assert_eq!(other.dim, self.dim);
        self.constant += &other.constant * scale;
        for (&k, m) in &other.terms {
            *self.term(k) += m * scale;
        }
        self
    }

    /// `T^T expr T`.
    pub fn congruence(&self, t: &DMatrix<f64>) -> AffineSym {
        assert_eq!(t.nrows(), self.dim);
        let tt = t.transpose();
        AffineSym {
            dim: t.ncols(),
            constant: &tt * &self.constant * t,
            terms: self.terms.iter().map(|(&k, m)| (k, &tt * m * t)).collect(),
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> SymMatrix {
        let mut out = self.constant.clone();
        for (&k, m) in &self.terms {
            out += m * x[k];
        }
        SymMatrix::new(out).expect("finite affine evaluation")
    }
}

#[derive(Clone, Debug)]
struct Lmi {
    expr: AffineSym,
    margin: f64,
    label: String,
}

/// Feasibility (or linear-objective) SDP over scalar, symmetric, and general
/// matrix variables.
#[derive(Clone, Debug, Default)]
pub struct SdpProblem {
    n_vars: usize,
    lmis: Vec<Lmi>,
    objective: BTreeMap<usize, f64>,
    max_iter: Option<u32>,
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    x: Vec<f64>,
    pub engine_status: String,
    pub iterations: u32,
    pub solve_time: f64,
    pub min_residual: f64,
}

impl SdpSolution {
    pub fn scalar(&self, v: ScalarVar) -> f64 {
        self.x[v.0]
    }

    pub fn sym(&self, v: &SymVar) -> SymMatrix {
        let mut m = DMatrix::zeros(v.dim, v.dim);
        for j in 0..v.dim {
            for i in 0..=j {
                m[(i, j)] = self.x[v.index(i, j)];
                m[(j, i)] = self.x[v.index(i, j)];
            }
        }
        SymMatrix::new(m).expect("finite solver output")
    }

    pub fn mat(&self, v: &MatVar) -> DMatrix<f64> {
        DMatrix::from_fn(v.rows, v.cols, |i, j| self.x[v.index(i, j)])
    }

    pub fn raw(&self) -> &[f64] {
        &self.x
    }
}

#[derive(Clone, Debug)]
pub enum SdpOutcome {
    Feasible(SdpSolution),
    /// Backed by a primal infeasibility certificate from the conic engine.
    Infeasible { engine_status: String, solve_time: f64 },
}

impl SdpOutcome {
    pub fn is_feasible(&self) -> bool {
        matches!(self, SdpOutcome::Feasible(_))
    }
}

impl SdpProblem {
    pub fn new() -> Self {
        SdpProblem::default()
    }

    pub fn scalar(&mut self) -> ScalarVar {
        self.n_vars += 1;
        ScalarVar(self.n_vars - 1)
    }

    pub fn sym(&mut self, dim: usize) -> SymVar {
        let v = SymVar { dim, start: self.n_vars };
        self.n_vars += dim * (dim + 1) / 2;
        v
    }

    pub fn mat(&mut self, rows: usize, cols: usize) -> MatVar {
        let v = MatVar { rows, cols, start: self.n_vars };
        self.n_vars += rows * cols;
        v
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn set_max_iter(&mut self, n: u32) {
        self.max_iter = Some(n);
    }

    /// Requires `expr - margin * I >= 0`.
    pub fn require_psd(&mut self, expr: AffineSym, margin: f64, label: impl Into<String>) {
        let label = label.into();
        assert!(
            expr.terms.keys().all(|&k| k < self.n_vars),
            "constraint `{label}` references an undeclared variable"
        );
        self.lmis.push(Lmi { expr, margin, label });
    }

    /// Requires `coef * s + offset >= margin` for a scalar.
    pub fn require_scalar(&mut self, s: ScalarVar, coef: f64, offset: f64, margin: f64, label: impl Into<String>) {
        let mut e = AffineSym::zeros(1);
        e.add_scalar_identity(s, 0, 1, coef);
        e.constant[(0, 0)] = offset;
        self.require_psd(e, margin, label);
    }

    pub fn minimize(&mut self, terms: &[(ScalarVar, f64)]) {
        for &(v, c) in terms {
            *self.objective.entry(v.0).or_insert(0.0) += c;
        }
    }

    /// Residual `lambda_min(expr(x) - margin I)` of every constraint,
    /// relative to `max(1, ||expr(x)||_2)`.
    pub fn residuals(&self, x: &[f64]) -> Vec<(String, f64)> {
        self.lmis
            .iter()
            .map(|l| {
                let val = l.expr.evaluate(x);
                let scale = val.spectral_norm().max(1.0);
                let shifted = val.sub(&SymMatrix::scaled_identity(val.dim(), l.margin));
                (l.label.clone(), shifted.min_eigenvalue() / scale)
            })
            .collect()
    }

    pub fn solve(&self) -> Result<SdpOutcome> {
        if self.lmis.is_empty() {
            return Err(Error::invalid("SDP has no constraints"));
        }
        let n = self.n_vars;
        let (mut ri, mut cj, mut vals) = (Vec::new(), Vec::new(), Vec::new());
        let mut b = Vec::new();
        let mut cones = Vec::new();
        let mut row = 0usize;
        let sqrt2 = std::f64::consts::SQRT_2;
        for lmi in &self.lmis {
            let d = lmi.expr.dim;
            // svec order: upper triangle, column by column.
            for j in 0..d {
                for i in 0..=j {
                    let w = if i == j { 1.0 } else { sqrt2 };
                    let mut c0 = lmi.expr.constant[(i, j)];
                    if i == j {
                        c0 -= lmi.margin;
                    }
                    b.push(w * c0);
                    for (&k, m) in &lmi.expr.terms {
                        let v = m[(i, j)];
                        if v != 0.0 {
                            ri.push(row);
                            cj.push(k);
                            vals.push(-w * v);
                        }
                    }
                    row += 1;
                }
            }
            if d == 1 {
                cones.push(SupportedConeT::NonnegativeConeT(1));
            } else {
                cones.push(SupportedConeT::PSDTriangleConeT(d));
            }
        }
        let a = CscMatrix::new_from_triplets(row, n, ri, cj, vals);
        let p = CscMatrix::zeros((n, n));
        let mut q = vec![0.0; n];
        for (&k, &c) in &self.objective {
            q[k] = c;
        }
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(self.max_iter.unwrap_or(200))
            .max_threads(1)
            .build()
            .map_err(|e| Error::Solver(format!("settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| Error::Solver(format!("setup: {e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let status = format!("{:?}", sol.status);
        match sol.status {
            SolverStatus::PrimalInfeasible => {
                Ok(SdpOutcome::Infeasible { engine_status: status, solve_time: sol.solve_time })
            }
            // A stalled run is still accepted when its last iterate verifies.
            SolverStatus::Solved
            | SolverStatus::AlmostSolved
            | SolverStatus::InsufficientProgress
            | SolverStatus::NumericalError
            | SolverStatus::MaxIterations => {
                let x = sol.x.clone();
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Solver(format!("{status}: non-finite solution")));
                }
                let res = self.residuals(&x);
                let worst = res.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
                if worst < -TOL_PSD {
                    let bad = res.iter().find(|r| r.1 == worst).map(|r| r.0.clone()).unwrap_or_default();
                    return Err(Error::Solver(format!(
                        "{status}: constraint `{bad}` violated (relative residual {worst:.3e})"
                    )));
                }
                Ok(SdpOutcome::Feasible(SdpSolution {
                    x,
                    engine_status: status,
                    iterations: sol.iterations,
                    solve_time: sol.solve_time,
                    min_residual: worst,
                }))
            }
            _ => Err(Error::Solver(status)),
        }
    }
}
