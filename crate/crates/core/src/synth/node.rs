use std::time::Instant;

use nalgebra::DMatrix;

use super::local::{add_local_lmi, extract, Block, SupplyBlocks};
use super::sdp::{AffineSym, SdpOutcome, SdpProblem};
use super::{degree_max, SynthStatus, SynthesisResult};
use crate::datagen::{build_j, build_theta_pair, lambda_embedding, InterconnectionData, LocalData, NoiseBound};
use crate::error::{Error, Result};
use crate::matqmi::DELTA_STRICT;

fn check_node_data(local: &LocalData, inter: &InterconnectionData) -> Result<(usize, usize, usize)> {
    local.validate()?;
    let dims = local.dims();
    if inter.v_tilde.nrows() != dims.2 || inter.y_tilde.nrows() < dims.2 {
        return Err(Error::invalid("interconnection data dimensions disagree with the local data"));
    }
    Ok(dims)
}

/// Joint search for a gain and an inverse-block supply `(F, G, H)` that is
/// dissipative for all data-consistent local models and certifies stability
/// for all data-consistent interconnection rows. The inertia condition on
/// `(F, G, H)` is checked after solving and reported in `inertia_ok`.
pub fn algorithm1_node(
    local: &LocalData,
    inter: &InterconnectionData,
    phi: &NoiseBound,
    psi: &NoiseBound,
) -> Result<SynthesisResult> {
    let start = Instant::now();
    let dims = check_node_data(local, inter)?;
    let p = dims.2;
    let pt = inter.y_tilde.nrows();
    let (j, j_reg) = build_j(local, phi, true)?;
    let theta = build_theta_pair(inter, psi, true)?;

    let mut prob = SdpProblem::new();
    let blocks = SupplyBlocks::free(&mut prob, p);
    let vars = add_local_lmi(&mut prob, &j, dims, &blocks);
    blocks.normalize(&mut prob, p);

    let beta = prob.scalar();
    let tau = prob.scalar();
    let mut cert = blocks.lambda_core(p, beta).congruence(&lambda_embedding(p, pt));
    cert.add_scalar(tau, &(-theta.theta_hat.matrix()));
    prob.require_psd(cert, 0.0, "Lambda - tau Theta^ >= 0");
    prob.require_psd(blocks.f_expr(p, -1.0), 0.0, "F <= 0");
    prob.require_scalar(beta, 1.0, 0.0, DELTA_STRICT, "beta >= delta");
    prob.require_scalar(tau, 1.0, 0.0, 0.0, "tau >= 0");

    let mut out = SynthesisResult::empty(SynthStatus::Infeasible);
    out.j_regularized = j_reg;
    out.theta_regularized = theta.regularized;
    match prob.solve()? {
        SdpOutcome::Feasible(sol) => {
            extract(&sol, &vars, &blocks, &mut out)?;
            out.beta = Some(sol.scalar(beta));
            out.tau = Some(sol.scalar(tau));
        }
        SdpOutcome::Infeasible { engine_status, solve_time } => {
            out.engine_status = engine_status;
            out.solve_time = solve_time;
        }
    }
    out.wall_time = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Diffusive-coupling design for scalar outputs. The weighted degree is
/// over-approximated from the interconnection data and the supply is
/// restricted to `G = alpha/2`, `-1/(2 d') < F < 0`,
/// `H > 2 d' max(1 - alpha, 0)`; `alpha_param` must be shared network-wide.
pub fn algorithm2_node(
    local: &LocalData,
    inter: &InterconnectionData,
    phi: &NoiseBound,
    psi: &NoiseBound,
    alpha_param: f64,
) -> Result<SynthesisResult> {
    let start = Instant::now();
    let dims = check_node_data(local, inter)?;
    if dims.2 != 1 {
        return Err(Error::Unsupported("diffusive design requires scalar outputs".into()));
    }
    if !alpha_param.is_finite() {
        return Err(Error::invalid("alpha must be finite"));
    }
    let (j, j_reg) = build_j(local, phi, true)?;
    let theta = build_theta_pair(inter, psi, true)?;
    let d_prime = degree_max(&theta.theta_hat)?;
    if !(d_prime > 0.0) {
        return Err(Error::InconsistentData);
    }

    let mut prob = SdpProblem::new();
    let blocks = SupplyBlocks {
        f: Block::Sym(prob.sym(1)),
        g: Block::Const(DMatrix::from_element(1, 1, 0.5 * alpha_param)),
        h: Block::Sym(prob.sym(1)),
    };
    let vars = add_local_lmi(&mut prob, &j, dims, &blocks);
    blocks.normalize(&mut prob, 1);

    let mut lower = blocks.f_expr(1, 1.0);
    lower.add_constant_block(0, 0, &DMatrix::from_element(1, 1, 1.0 / (2.0 * d_prime)));
    prob.require_psd(lower, DELTA_STRICT, "F > -1/(2 d')");
    prob.require_psd(blocks.f_expr(1, -1.0), DELTA_STRICT, "F < 0");
    let mut h = blocks.h_expr(1);
    h.add_expr(&AffineSym::constant(&crate::matqmi::SymMatrix::scaled_identity(1, -2.0 * d_prime * (1.0 - alpha_param).max(0.0))), 1.0);
    prob.require_psd(h, DELTA_STRICT, "H > 2 d' max(1 - alpha, 0)");

    let mut out = SynthesisResult::empty(SynthStatus::Infeasible);
    out.j_regularized = j_reg;
    out.theta_regularized = theta.regularized;
    out.d_max = Some(d_prime);
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
