use std::time::Instant;

use nalgebra::DMatrix;

use super::sdp::{AffineSym, MatVar, ScalarVar, SdpOutcome, SdpProblem, SdpSolution, SymVar};
use super::{check_inertia_condition, SynthStatus, SynthesisResult, GAIN_RCOND_MIN, TRACE_H_KAPPA};
use crate::dissip::{Parametrization, StorageMatrix, SupplyRate};
use crate::error::{Error, Result};
use crate::matqmi::{SymMatrix, DELTA_STRICT};

/// Fixed inverse-block supply, or `(F, G, H)` as decision variables.
#[derive(Clone, Debug)]
pub enum SupplyChoice {
    Fixed(SupplyRate),
    /// Unrestricted; the inertia condition is only checked afterwards.
    Free,
    /// Adds `F <= -delta I` and `H >= delta I`, which implies the inertia
    /// condition (`H > 0` with a negative definite Schur complement).
    FreeSeparated,
}

/// A supply block: constant or decision variable.
#[derive(Clone, Debug)]
pub(crate) enum Block {
    Const(DMatrix<f64>),
    Sym(SymVar),
    Mat(MatVar),
}

impl Block {
    /// `scale * B` on the diagonal at `offset`.
    fn place_diag(&self, e: &mut AffineSym, offset: usize, scale: f64) {
        match self {
            Block::Const(c) => {
                e.add_constant_block(offset, offset, &(c * scale));
            }
            Block::Sym(v) => {
                e.add_sym(v, offset, scale);
            }
            Block::Mat(v) => {
                e.add_mat_sym_part(v, offset, scale);
            }
        }
    }

    /// `scale * B` at `(row, col)` plus its transpose.
    fn place_off(&self, e: &mut AffineSym, row: usize, col: usize, scale: f64) {
        match self {
            Block::Const(c) => {
                e.add_constant_block(row, col, &(c * scale));
            }
            Block::Mat(v) => {
                e.add_mat(v, row, col, scale);
            }
            Block::Sym(_) => unreachable!("off-diagonal supply blocks are general matrices"),
        }
    }

    fn value(&self, sol: &SdpSolution) -> DMatrix<f64> {
        match self {
            Block::Const(c) => c.clone(),
            Block::Sym(v) => sol.sym(v).into_inner(),
            Block::Mat(v) => sol.mat(v),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct SupplyBlocks {
    pub f: Block,
    pub g: Block,
    pub h: Block,
}

impl SupplyBlocks {
    pub fn fixed(s: &SupplyRate) -> Self {
        SupplyBlocks {
            f: Block::Const(s.f.matrix().clone()),
            g: Block::Const(s.g.clone()),
            h: Block::Const(s.h.matrix().clone()),
        }
    }

    pub fn free(prob: &mut SdpProblem, p: usize) -> Self {
        SupplyBlocks { f: Block::Sym(prob.sym(p)), g: Block::Mat(prob.mat(p, p)), h: Block::Sym(prob.sym(p)) }
    }

    pub fn value(&self, sol: &SdpSolution) -> Result<SupplyRate> {
        SupplyRate::new(
            SymMatrix::new(self.f.value(sol))?,
            self.g.value(sol),
            SymMatrix::new(self.h.value(sol))?,
            Parametrization::InverseBlock,
        )
    }

    /// `trace(H) <= kappa p` when `H` is a variable.
    pub fn normalize(&self, prob: &mut SdpProblem, p: usize) {
        if let Block::Sym(h) = &self.h {
            let mut e = AffineSym::zeros(1);
            e.add_constant_block(0, 0, &DMatrix::from_element(1, 1, TRACE_H_KAPPA * p as f64));
            e.add_sym_trace(h, 0, -1.0);
            prob.require_psd(e, 0.0, "trace(H) <= kappa p");
        }
    }

    /// `-F`, then `F <= 0` is `-F >= margin`.
    pub fn f_expr(&self, p: usize, scale: f64) -> AffineSym {
        let mut e = AffineSym::zeros(p);
        self.f.place_diag(&mut e, 0, scale);
        e
    }

    pub fn h_expr(&self, p: usize) -> AffineSym {
        let mut e = AffineSym::zeros(p);
        self.h.place_diag(&mut e, 0, 1.0);
        e
    }

    /// `[[H - beta I, G^T], [G, F]]` as a `2p x 2p` expression.
    pub fn lambda_core(&self, p: usize, beta: ScalarVar) -> AffineSym {
        let mut e = AffineSym::zeros(2 * p);
        self.h.place_diag(&mut e, 0, 1.0);
        e.add_scalar_identity(beta, 0, p, -1.0);
        self.g.place_off(&mut e, p, 0, -1.0);
        self.f.place_diag(&mut e, p, 1.0);
        e
    }
}

/// Variables of the local dissipativity LMI.
pub(crate) struct LocalVars {
    pub p: SymVar,
    pub l: MatVar,
    pub alpha: ScalarVar,
}

/// Adds `M^ - alpha N^ >= 0`, `P >= delta I`, `alpha >= 0`. Block order of
/// `M^` is `[n | p | n | m | p | n]` and `N^ = diag(J, 0_n)`.
pub(crate) fn add_local_lmi(
    prob: &mut SdpProblem,
    j: &SymMatrix,
    (n, m, p): (usize, usize, usize),
    supply: &SupplyBlocks,
) -> LocalVars {
    let pv = prob.sym(n);
    let lv = prob.mat(m, n);
    let alpha = prob.scalar();

    let o = [0, n, n + p, 2 * n + p, 2 * n + m + p, 2 * n + m + 2 * p];
    let dim = 3 * n + m + 2 * p;
    let mut e = AffineSym::zeros(dim);
    e.add_sym(&pv, o[0], 1.0);
    supply.f.place_diag(&mut e, o[1], -1.0);
    supply.g.place_off(&mut e, o[1], o[4], 1.0);
    e.add_sym(&pv, o[2], -1.0);
    e.add_mat(&lv, o[3], o[2], -1.0);
    e.add_mat(&lv, o[3], o[5], 1.0);
    supply.h.place_diag(&mut e, o[4], -1.0);
    e.add_sym(&pv, o[5], 1.0);

    let mut nhat = DMatrix::zeros(dim, dim);
    nhat.view_mut((0, 0), (j.dim(), j.dim())).copy_from(j.matrix());
    e.add_scalar(alpha, &(-nhat));
    prob.require_psd(e, 0.0, "local dissipativity LMI");

    let mut pe = AffineSym::zeros(n);
    pe.add_sym(&pv, 0, 1.0);
    prob.require_psd(pe, DELTA_STRICT, "P >= delta I");
    prob.require_scalar(alpha, 1.0, 0.0, 0.0, "alpha >= 0");
    LocalVars { p: pv, l: lv, alpha }
}

/// Fills gain, storage and supply from a feasible solution.
pub(crate) fn extract(
    sol: &SdpSolution,
    vars: &LocalVars,
    supply: &SupplyBlocks,
    out: &mut SynthesisResult,
) -> Result<()> {
    let p = sol.sym(&vars.p);
    let rcond = p.rcond();
    if rcond < GAIN_RCOND_MIN {
        return Err(Error::Conditioning { rcond });
    }
    let pinv = p.inverse()?;
    let l = sol.mat(&vars.l);
    let s = supply.value(sol)?;
    out.status = SynthStatus::Feasible;
    out.k = Some(&l * pinv.matrix());
    out.l = Some(l);
    out.storage = Some(StorageMatrix::new(pinv)?);
    out.p = Some(p);
    out.inertia_ok = check_inertia_condition(&s);
    out.supply = Some(s);
    out.alpha = Some(sol.scalar(vars.alpha));
    out.engine_status = sol.engine_status.clone();
    out.iterations = sol.iterations;
    out.solve_time = sol.solve_time;
    out.min_residual = Some(sol.min_residual);
    Ok(())
}

pub(crate) fn check_j(j: &SymMatrix, (n, m, p): (usize, usize, usize)) -> Result<()> {
    if n == 0 || m == 0 || p == 0 || j.dim() != 2 * n + m + 2 * p {
        return Err(Error::invalid(format!(
            "J has dimension {}, expected 2n + m + 2p = {}",
            j.dim(),
            2 * n + m + 2 * p
        )));
    }
    Ok(())
}

/// Finds `K` such that every system consistent with the data is dissipative
/// in closed loop with respect to the (fixed or searched) inverse-block
/// supply; the certified storage is `x^T P^{-1} x`.
pub fn synth_local_dissipative(j: &SymMatrix, dims: (usize, usize, usize), supply: SupplyChoice) -> Result<SynthesisResult> {
    let start = Instant::now();
    check_j(j, dims)?;
    let p = dims.2;
    let mut prob = SdpProblem::new();
    let blocks = match &supply {
        SupplyChoice::Fixed(s) => {
            if s.output_dim() != p || s.input_dim() != p {
                return Err(Error::invalid("fixed supply dimension differs from p"));
            }
            SupplyBlocks::fixed(s)
        }
        SupplyChoice::Free | SupplyChoice::FreeSeparated => SupplyBlocks::free(&mut prob, p),
    };
    let vars = add_local_lmi(&mut prob, j, dims, &blocks);
    blocks.normalize(&mut prob, p);
    if matches!(supply, SupplyChoice::FreeSeparated) {
        prob.require_psd(blocks.f_expr(p, -1.0), DELTA_STRICT, "F <= -delta I");
        prob.require_psd(blocks.h_expr(p), DELTA_STRICT, "H >= delta I");
    }

    let mut out = SynthesisResult::empty(SynthStatus::Infeasible);
    match prob.solve()? {
        SdpOutcome::Feasible(sol) => extract(&sol, &vars, &blocks, &mut out)?,
        SdpOutcome::Infeasible { engine_status, solve_time } => {
            out.engine_status = engine_status;
            out.solve_time = solve_time;
        }
    }
    out.wall_time = start.elapsed().as_secs_f64();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_j, simulate_collect_local, Excitation, LocalData, NoiseBound, SubsystemModel};
    use crate::dissip::{check_dissipativity, verify_trajectory_dissipation};
    use nalgebra::{dmatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_data(eps: f64, samples: usize) -> (SubsystemModel, LocalData, NoiseBound) {
        let model = SubsystemModel::new(dmatrix![0.5], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], dmatrix![0.0], dmatrix![0.0])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = Excitation::default().sample(&mut rng, 1, samples);
        let v = Excitation { amplitude: 1.0, hold: 3 }.sample(&mut rng, 1, samples);
        let phi = NoiseBound::per_sample_ball(2, samples, eps).unwrap();
        let d = simulate_collect_local(&model, &u, &v, &phi, samples, 8, &DVector::zeros(1)).unwrap();
        (model, d, phi)
    }

    fn assert_sound(model: &SubsystemModel, r: &SynthesisResult) {
        let cl = model.closed_loop(r.k.as_ref().unwrap()).unwrap();
        let s = r.supply.as_ref().unwrap();
        assert!(verify_trajectory_dissipation(&cl, s, r.storage.as_ref().unwrap(), 10_000, 4).unwrap());
    }

    #[test]
    fn free_supply_is_sound_when_inertia_holds() {
        let (model, data, phi) = scalar_data(1e-4, 20);
        let (j, _) = build_j(&data, &phi, true).unwrap();
        let r = synth_local_dissipative(&j, (1, 1, 1), SupplyChoice::Free).unwrap();
        assert_eq!(r.status, SynthStatus::Feasible);
        if r.inertia_ok {
            assert_sound(&model, &r);
        }
    }

    #[test]
    fn noiseless_free_supply_certifies_true_closed_loop() {
        let (model, data, phi) = scalar_data(0.0, 20);
        let (j, reg) = build_j(&data, &phi, true).unwrap();
        assert!(reg);
        let r = synth_local_dissipative(&j, (1, 1, 1), SupplyChoice::FreeSeparated).unwrap();
        assert_eq!(r.status, SynthStatus::Feasible);
        assert!(r.inertia_ok);
        let k = r.k.clone().unwrap();
        let cl = model.closed_loop(&k).unwrap();
        let s = r.supply.clone().unwrap();
        assert!(check_dissipativity(&cl, &s).unwrap().is_some());
        assert!(verify_trajectory_dissipation(&cl, &s, r.storage.as_ref().unwrap(), 10_000, 3).unwrap());
        assert!(r.min_residual.unwrap() >= -1e-8);
    }

    #[test]
    fn noisy_free_supply_is_sound() {
        let (model, data, phi) = scalar_data(1e-3, 30);
        let (j, _) = build_j(&data, &phi, true).unwrap();
        let r = synth_local_dissipative(&j, (1, 1, 1), SupplyChoice::FreeSeparated).unwrap();
        assert!(r.accepted());
        assert_sound(&model, &r);
    }

    #[test]
    fn zero_excitation_is_infeasible() {
        let data = LocalData::new(
            DMatrix::zeros(1, 10),
            DMatrix::zeros(1, 10),
            DMatrix::zeros(1, 10),
            DMatrix::zeros(1, 10),
            DMatrix::zeros(1, 10),
        )
        .unwrap();
        let phi = NoiseBound::per_sample_ball(2, 10, 1e-3).unwrap();
        let (j, _) = build_j(&data, &phi, true).unwrap();
        let r = synth_local_dissipative(&j, (1, 1, 1), SupplyChoice::Free).unwrap();
        assert_eq!(r.status, SynthStatus::Infeasible);
        assert!(r.k.is_none());
    }

    #[test]
    fn incompatible_fixed_supply_is_infeasible() {
        // Inverse-block (F, G, H) = (-1, 0, 1e4) is the l2-gain supply with
        // gamma = 0.01, but y(1) = v(0) for every gain since B2 = C = 1.
        let (_, data, phi) = scalar_data(1e-4, 30);
        let (j, _) = build_j(&data, &phi, true).unwrap();
        let s = SupplyRate::new(
            SymMatrix::new(dmatrix![-1.0]).unwrap(),
            dmatrix![0.0],
            SymMatrix::new(dmatrix![1e4]).unwrap(),
            Parametrization::InverseBlock,
        )
        .unwrap();
        let r = synth_local_dissipative(&j, (1, 1, 1), SupplyChoice::Fixed(s)).unwrap();
        assert_eq!(r.status, SynthStatus::Infeasible);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let j = SymMatrix::identity(4);
        assert!(synth_local_dissipative(&j, (1, 1, 1), SupplyChoice::Free).is_err());
    }
}
