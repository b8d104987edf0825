//! Data-driven synthesis: the local dissipativity LMI, the interconnection
//! certificates and the two decentralized design procedures.

mod local;
mod node;
pub mod sdp;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dissip::{StorageMatrix, SupplyRate};
use crate::error::{Error, Result};
use crate::matqmi::{inertia, Inertia, SymMatrix, INERTIA_TOL};

pub use local::{synth_local_dissipative, SupplyChoice};
pub use node::{algorithm1_node, algorithm2_node};

/// Bound `kappa` in the free-supply normalization `trace(H) <= kappa p`.
pub const TRACE_H_KAPPA: f64 = 1e6;
/// Gains are not extracted from `P` with a reciprocal condition below this.
pub const GAIN_RCOND_MIN: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthStatus {
    Feasible,
    Infeasible,
    SolverError,
}

/// Outcome of one synthesis call. On `Feasible`, `k = l * p^{-1}` and the
/// certified storage is `x^T p^{-1} x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub status: SynthStatus,
    #[serde(with = "crate::serial::opt_dmatrix")]
    pub k: Option<DMatrix<f64>>,
    #[serde(with = "crate::serial::opt_dmatrix")]
    pub l: Option<DMatrix<f64>>,
    pub p: Option<SymMatrix>,
    pub storage: Option<StorageMatrix>,
    /// Inverse-block supply `(F, G, H)`.
    pub supply: Option<SupplyRate>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub tau: Option<f64>,
    pub d_max: Option<f64>,
    pub inertia_ok: bool,
    pub j_regularized: bool,
    pub theta_regularized: bool,
    pub engine_status: String,
    pub iterations: u32,
    /// Conic solve time in seconds.
    pub solve_time: f64,
    /// Wall time of the whole call in seconds, data assembly included.
    pub wall_time: f64,
    /// Smallest relative constraint residual at the returned point.
    pub min_residual: Option<f64>,
    pub message: Option<String>,
}

impl SynthesisResult {
    pub(crate) fn empty(status: SynthStatus) -> Self {
        SynthesisResult {
            status,
            k: None,
            l: None,
            p: None,
            storage: None,
            supply: None,
            alpha: None,
            beta: None,
            tau: None,
            d_max: None,
            inertia_ok: false,
            j_regularized: false,
            theta_regularized: false,
            engine_status: String::new(),
            iterations: 0,
            solve_time: 0.0,
            wall_time: 0.0,
            min_residual: None,
            message: None,
        }
    }

    /// In-band record of a failed call.
    pub fn from_error(err: &Error) -> Self {
        let mut r = SynthesisResult::empty(SynthStatus::SolverError);
        r.message = Some(err.to_string());
        r
    }

    /// Feasible and the inertia condition holds.
    pub fn accepted(&self) -> bool {
        self.status == SynthStatus::Feasible && self.inertia_ok
    }
}

/// `In([[H, G^T], [G, F]]) == (p, 0, p)`.
pub fn check_inertia_condition(s: &SupplyRate) -> bool {
    let p = s.output_dim();
    if s.input_dim() != p {
        return false;
    }
    matches!(inertia(&s.block_matrix(), INERTIA_TOL), Ok(i) if i == Inertia::new(p, 0, p))
}

/// Largest weighted degree consistent with the interconnection data
/// (scalar outputs): the larger root of `U22 d^2 + 2 U12 d + U11 = 0` with
/// `U = [[-e1^T, 0], [0, 1]] Theta^ [[-e1, 0], [0, 1]]`.
pub fn degree_max(theta_hat: &SymMatrix) -> Result<f64> {
    let dim = theta_hat.dim();
    if dim < 2 {
        return Err(Error::invalid("dual interconnection matrix must have dimension p_tilde + 1 >= 2"));
    }
    let pt = dim - 1;
    let mut t = DMatrix::zeros(dim, 2);
    t[(0, 0)] = -1.0;
    t[(pt, 1)] = 1.0;
    degree_max_from_upsilon(&theta_hat.congruence(&t))
}

/// Closed-form maximizer of `d` subject to `[1; d]^T U [1; d] >= 0`.
pub fn degree_max_from_upsilon(u: &SymMatrix) -> Result<f64> {
    if u.dim() != 2 {
        return Err(Error::invalid("degree bound needs a 2x2 matrix"));
    }
    let m = u.matrix();
    let (u11, u12, u22) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    if u22 >= 0.0 {
        return Err(Error::UnboundedDegree);
    }
    let disc = u12 * u12 - u11 * u22;
    if disc < 0.0 {
        return Err(Error::InconsistentData);
    }
    Ok((-u12 - disc.sqrt()) / u22)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissip::Parametrization;
    use nalgebra::dmatrix;

    fn triple(f: f64, g: f64, h: f64) -> SupplyRate {
        SupplyRate::new(
            SymMatrix::new(dmatrix![f]).unwrap(),
            dmatrix![g],
            SymMatrix::new(dmatrix![h]).unwrap(),
            Parametrization::InverseBlock,
        )
        .unwrap()
    }

    #[test]
    fn inertia_condition_examples() {
        assert!(check_inertia_condition(&triple(-1.0, 0.0, 1.0)));
        assert!(!check_inertia_condition(&triple(1.0, 0.0, 1.0)));
        assert!(check_inertia_condition(&triple(0.0, 0.5, 0.0)));
        assert!(!check_inertia_condition(&triple(0.0, 0.0, 1.0)));
    }

    #[test]
    fn degree_from_upsilon_examples() {
        let u = |a: f64, b: f64, c: f64| SymMatrix::new(dmatrix![a, b; b, c]).unwrap();
        assert!((degree_max_from_upsilon(&u(1.0, 0.0, -1.0)).unwrap() - 1.0).abs() < 1e-15);
        assert!((degree_max_from_upsilon(&u(4.0, 0.0, -1.0)).unwrap() - 2.0).abs() < 1e-15);
        // -(d - 3)^2 + 0.01 >= 0  =>  d <= 3.1
        assert!((degree_max_from_upsilon(&u(-8.99, 3.0, -1.0)).unwrap() - 3.1).abs() < 1e-12);
        assert!(matches!(degree_max_from_upsilon(&u(1.0, 0.0, 1.0)), Err(Error::UnboundedDegree)));
        assert!(matches!(degree_max_from_upsilon(&u(-1.0, 0.0, -1.0)), Err(Error::InconsistentData)));
    }

    #[test]
    fn degree_max_reads_the_right_entries() {
        // p_tilde = 2: Upsilon picks rows/cols 0 (negated) and 2.
        let th = SymMatrix::new(dmatrix![4.0, 7.0, 0.0; 7.0, 9.0, 7.0; 0.0, 7.0, -1.0]).unwrap();
        assert!((degree_max(&th).unwrap() - 2.0).abs() < 1e-15);
        let th = SymMatrix::new(dmatrix![-8.99, 7.0, -3.0; 7.0, 9.0, 7.0; -3.0, 7.0, -1.0]).unwrap();
        assert!((degree_max(&th).unwrap() - 3.1).abs() < 1e-12);
    }

    #[test]
    fn result_json_round_trip() {
        let mut r = SynthesisResult::empty(SynthStatus::Feasible);
        r.k = Some(dmatrix![1.0, -2.0]);
        r.supply = Some(triple(-1.0, 0.5, 2.0));
        r.inertia_ok = true;
        let text = serde_json::to_string(&r).unwrap();
        let back: SynthesisResult = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert!(back.accepted());
    }
}
