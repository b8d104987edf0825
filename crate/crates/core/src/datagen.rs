//! Ground-truth simulation, noisy data collection, and the data-dependent
//! matrices consumed by synthesis.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dissip::{LinearSystem, SupplyRate};
use crate::error::{Error, Result};
use crate::matqmi::{inertia, Inertia, QmiSet, SymMatrix, INERTIA_TOL, RCOND_MIN};
use crate::network::InterconnectionMatrix;

/// `x+ = A x + B1 u + B2 v + w1`, `y = C x + D1 u + D2 v + w2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemModel {
    #[serde(with = "crate::serial::dmatrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::serial::dmatrix")]
    pub b1: DMatrix<f64>,
    #[serde(with = "crate::serial::dmatrix")]
    pub b2: DMatrix<f64>,
    #[serde(with = "crate::serial::dmatrix")]
    pub c: DMatrix<f64>,
    #[serde(with = "crate::serial::dmatrix")]
    pub d1: DMatrix<f64>,
    #[serde(with = "crate::serial::dmatrix")]
    pub d2: DMatrix<f64>,
}

impl SubsystemModel {
    pub fn new(
        a: DMatrix<f64>,
        b1: DMatrix<f64>,
        b2: DMatrix<f64>,
        c: DMatrix<f64>,
        d1: DMatrix<f64>,
        d2: DMatrix<f64>,
    ) -> Result<Self> {
        let model = SubsystemModel { a, b1, b2, c, d1, d2 };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, p) = (self.a.nrows(), self.b1.ncols(), self.c.nrows());
        let ok = self.a.shape() == (n, n)
            && self.b1.shape() == (n, m)
            && self.b2.shape() == (n, p)
            && self.c.shape() == (p, n)
            && self.d1.shape() == (p, m)
            && self.d2.shape() == (p, p);
        if !ok {
            return Err(Error::invalid("subsystem model matrices have inconsistent shapes"));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b1.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// Closed loop under `u = K x`, seen from `v` to `y`.
    pub fn closed_loop(&self, k: &DMatrix<f64>) -> Result<LinearSystem> {
        if k.shape() != (self.m(), self.n()) {
            return Err(Error::invalid(format!("gain must be {}x{}", self.m(), self.n())));
        }
        LinearSystem::new(&self.a + &self.b1 * k, self.b2.clone(), &self.c + &self.d1 * k, self.d2.clone())
    }

    /// `[A B1 B2; C D1 D2]^T`, the point the data-consistency QMI must contain.
    pub fn parameter_stack(&self) -> DMatrix<f64> {
        let (n, m, p) = (self.n(), self.m(), self.p());
        let mut s = DMatrix::zeros(n + p, n + m + p);
        s.view_mut((0, 0), (n, n)).copy_from(&self.a);
        s.view_mut((0, n), (n, m)).copy_from(&self.b1);
        s.view_mut((0, n + m), (n, p)).copy_from(&self.b2);
        s.view_mut((n, 0), (p, n)).copy_from(&self.c);
        s.view_mut((n, n), (p, m)).copy_from(&self.d1);
        s.view_mut((n, n + m), (p, p)).copy_from(&self.d2);
        s.transpose()
    }
}

/// Noise model `[I; W^T]^T Phi [I; W^T] >= 0` on a `dim x horizon` noise
/// matrix `W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseBound {
    pub phi11: SymMatrix,
    #[serde(with = "crate::serial::dmatrix")]
    pub phi12: DMatrix<f64>,
    pub phi22: SymMatrix,
    pub horizon: usize,
}

impl NoiseBound {
    pub fn new(phi11: SymMatrix, phi12: DMatrix<f64>, phi22: SymMatrix, horizon: usize) -> Result<Self> {
        if phi12.shape() != (phi11.dim(), phi22.dim()) || phi22.dim() != horizon || horizon == 0 {
            return Err(Error::invalid("noise bound blocks inconsistent with the horizon"));
        }
        let bound = NoiseBound { phi11, phi12, phi22, horizon };
        if !bound.as_qmi()?.in_pi_class() {
            return Err(Error::invalid("noise bound is not in the admissible class"));
        }
        Ok(bound)
    }

    /// Every column of `W` lies in the Euclidean ball of radius `sqrt(eps)`:
    /// `(Phi11, Phi12, Phi22) = (N eps I, 0, -I)`.
    pub fn per_sample_ball(dim: usize, horizon: usize, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::invalid(format!("noise level must be >= 0, got {eps}")));
        }
        NoiseBound::new(
            SymMatrix::scaled_identity(dim, horizon as f64 * eps),
            DMatrix::zeros(dim, horizon),
            SymMatrix::scaled_identity(horizon, -1.0),
            horizon,
        )
    }

    pub fn dim(&self) -> usize {
        self.phi11.dim()
    }

    /// Per-sample level `eps` if the bound has the ball structure.
    pub fn per_sample_level(&self) -> Option<f64> {
        let n = self.horizon as f64;
        let d = self.dim();
        let c = if d == 0 { 0.0 } else { self.phi11.matrix()[(0, 0)] };
        let ball = self.phi12.iter().all(|v| *v == 0.0)
            && self.phi11.matrix() == &(DMatrix::identity(d, d) * c)
            && self.phi22.matrix() == &(-DMatrix::identity(self.horizon, self.horizon));
        ball.then_some(c / n)
    }

    pub fn full(&self) -> SymMatrix {
        let (q, r) = (self.dim(), self.horizon);
        let mut m = DMatrix::zeros(q + r, q + r);
        m.view_mut((0, 0), (q, q)).copy_from(self.phi11.matrix());
        m.view_mut((0, q), (q, r)).copy_from(&self.phi12);
        m.view_mut((q, 0), (r, q)).copy_from(&self.phi12.transpose());
        m.view_mut((q, q), (r, r)).copy_from(self.phi22.matrix());
        SymMatrix::new(m).expect("finite blocks")
    }

    pub fn as_qmi(&self) -> Result<QmiSet> {
        QmiSet::new(self.full(), self.dim(), self.horizon)
    }

    /// Does `W` (`dim x horizon`) satisfy the bound?
    pub fn admits(&self, w: &DMatrix<f64>) -> Result<bool> {
        self.as_qmi()?.contains(&w.transpose(), false)
    }

    /// `eps_reg = 1e-9 max(1, ||Phi11||)`.
    pub fn regularization(&self) -> f64 {
        1e-9 * self.phi11.spectral_norm().max(1.0)
    }

    pub fn regularized(&self) -> NoiseBound {
        self.regularized_by(self.regularization())
    }

    /// `Phi11 + eps I`.
    pub fn regularized_by(&self, eps: f64) -> NoiseBound {
        let shift = SymMatrix::scaled_identity(self.dim(), eps);
        NoiseBound { phi11: self.phi11.add(&shift), ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    PerSampleBall,
}

/// Deterministic RNG stream for `(master seed, node, purpose)`.
pub fn node_rng(master_seed: u64, node: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((node as u64) << 8) | purpose);
    rng
}

fn ball_column<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> DVector<f64> {
    if dim == 0 || radius == 0.0 {
        return DVector::zeros(dim);
    }
    let mut z = DVector::<f64>::from_fn(dim, |_, _| StandardNormal.sample(rng));
    let norm = z.norm();
    if norm > 0.0 {
        z /= norm;
    }
    let u: f64 = rng.gen();
    z * (radius * u.powf(1.0 / dim as f64))
}

/// Draws from a per-sample ball bound using the caller's RNG.
pub fn sample_with_rng<R: Rng>(bound: &NoiseBound, rng: &mut R) -> Result<DMatrix<f64>> {
    let eps = bound
        .per_sample_level()
        .ok_or_else(|| Error::Unsupported("noise sampling needs a per-sample ball bound".into()))?;
    let radius = eps.sqrt();
    let mut w = DMatrix::zeros(bound.dim(), bound.horizon);
    for t in 0..bound.horizon {
        w.set_column(t, &ball_column(rng, bound.dim(), radius));
    }
    Ok(w)
}

/// Draws a `dim x horizon` noise matrix, each column uniform in the ball.
pub fn sample_noise(bound: &NoiseBound, kind: NoiseKind, seed: u64) -> Result<DMatrix<f64>> {
    match kind {
        NoiseKind::PerSampleBall => sample_with_rng(bound, &mut ChaCha8Rng::seed_from_u64(seed)),
    }
}

/// Local data `(X, X+, U, V, Y)` of one subsystem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalData {
    #[serde(with = "crate::serial::dmatrix")]
    pub x: DMatrix<f64>,
    #[serde(with = "crate::serial::dmatrix")]
    pub x_plus: DMatrix<f64>,
    #[serde(with = "crate::serial::dmatrix")]
    pub u: DMatrix<f64>,
    #[serde(with = "crate::serial::dmatrix")]
    pub v: DMatrix<f64>,
    #[serde(with = "crate::serial::dmatrix")]
    pub y: DMatrix<f64>,
}

impl LocalData {
    pub fn new(x: DMatrix<f64>, x_plus: DMatrix<f64>, u: DMatrix<f64>, v: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        let d = LocalData { x, x_plus, u, v, y };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.ncols();
        if n == 0
            || [self.x_plus.ncols(), self.u.ncols(), self.v.ncols(), self.y.ncols()].iter().any(|c| *c != n)
            || self.x_plus.nrows() != self.x.nrows()
            || self.v.nrows() != self.y.nrows()
        {
            return Err(Error::invalid("local data matrices must share a positive column count"));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.x.ncols()
    }

    /// `(n, m, p)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.x.nrows(), self.u.nrows(), self.y.nrows())
    }

    /// First `len` columns.
    pub fn prefix(&self, len: usize) -> Result<LocalData> {
        if len == 0 || len > self.samples() {
            return Err(Error::invalid(format!("prefix {len} out of range 1..={}", self.samples())));
        }
        let cut = |m: &DMatrix<f64>| m.columns(0, len).into_owned();
        Ok(LocalData {
            x: cut(&self.x),
            x_plus: cut(&self.x_plus),
            u: cut(&self.u),
            v: cut(&self.v),
            y: cut(&self.y),
        })
    }
}

/// Interconnection data `(V~, Y~)`; rows of `Y~` follow `neighbor_order`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterconnectionData {
    #[serde(with = "crate::serial::dmatrix")]
    pub v_tilde: DMatrix<f64>,
    #[serde(with = "crate::serial::dmatrix")]
    pub y_tilde: DMatrix<f64>,
    pub neighbor_order: Vec<usize>,
}

impl InterconnectionData {
    pub fn new(v_tilde: DMatrix<f64>, y_tilde: DMatrix<f64>, neighbor_order: Vec<usize>) -> Result<Self> {
        if v_tilde.ncols() != y_tilde.ncols() || v_tilde.ncols() == 0 {
            return Err(Error::invalid("interconnection data must share a positive column count"));
        }
        if neighbor_order.is_empty() {
            return Err(Error::invalid("neighbor order must contain the node itself"));
        }
        Ok(InterconnectionData { v_tilde, y_tilde, neighbor_order })
    }

    pub fn samples(&self) -> usize {
        self.v_tilde.ncols()
    }
}

/// Iterates the subsystem with exogenous `u`, `v` and sampled noise
/// `[w1; w2]` (an `(n + p) x N` draw from `bound`).
pub fn simulate_collect_local(
    model: &SubsystemModel,
    u_signal: &DMatrix<f64>,
    v_signal: &DMatrix<f64>,
    bound: &NoiseBound,
    samples: usize,
    seed: u64,
    x0: &DVector<f64>,
) -> Result<LocalData> {
    let (n, m, p) = (model.n(), model.m(), model.p());
    if u_signal.nrows() != m || v_signal.nrows() != p || u_signal.ncols() < samples || v_signal.ncols() < samples {
        return Err(Error::invalid("input signals do not cover the requested horizon"));
    }
    if bound.dim() != n + p || bound.horizon != samples || x0.len() != n {
        return Err(Error::invalid("noise bound or initial state inconsistent with the model"));
    }
    let w = sample_noise(bound, NoiseKind::PerSampleBall, seed)?;
    let mut x = DMatrix::zeros(n, samples);
    let mut xp = DMatrix::zeros(n, samples);
    let mut y = DMatrix::zeros(p, samples);
    let mut state = x0.clone();
    for t in 0..samples {
        let u = u_signal.column(t);
        let v = v_signal.column(t);
        let w1 = w.view((0, t), (n, 1));
        let w2 = w.view((n, t), (p, 1));
        let next = &model.a * &state + &model.b1 * u + &model.b2 * v + w1;
        let out = &model.c * &state + &model.d1 * u + &model.d2 * v + w2;
        x.set_column(t, &state);
        xp.set_column(t, &next);
        y.set_column(t, &out);
        state = next;
    }
    LocalData::new(x, xp, u_signal.columns(0, samples).into_owned(), v_signal.columns(0, samples).into_owned(), y)
}

/// `V~ = M~r Y~ + Xi` with `Xi` drawn from `bound`.
pub fn collect_interconnection(
    m_row: &DMatrix<f64>,
    y_tilde_signal: &DMatrix<f64>,
    bound: &NoiseBound,
    samples: usize,
    seed: u64,
    neighbor_order: Vec<usize>,
) -> Result<InterconnectionData> {
    if m_row.ncols() != y_tilde_signal.nrows() || y_tilde_signal.ncols() < samples {
        return Err(Error::invalid("neighbor output signal inconsistent with the interconnection row"));
    }
    if bound.dim() != m_row.nrows() || bound.horizon != samples {
        return Err(Error::invalid("noise bound inconsistent with the interconnection row"));
    }
    let y = y_tilde_signal.columns(0, samples).into_owned();
    let xi = sample_noise(bound, NoiseKind::PerSampleBall, seed)?;
    InterconnectionData::new(m_row * &y + xi, y, neighbor_order)
}

/// Piecewise-constant excitation, uniform on `[-amplitude, amplitude]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Excitation {
    pub amplitude: f64,
    pub hold: usize,
}

impl Default for Excitation {
    fn default() -> Self {
        Excitation { amplitude: 1.0, hold: 5 }
    }
}

impl Excitation {
    pub fn sample<R: Rng>(&self, rng: &mut R, rows: usize, samples: usize) -> DMatrix<f64> {
        let hold = self.hold.max(1);
        let mut u = DMatrix::zeros(rows, samples);
        let mut t = 0;
        while t < samples {
            let level = DVector::<f64>::from_fn(rows, |_, _| rng.gen_range(-1.0..=1.0) * self.amplitude);
            for s in t..(t + hold).min(samples) {
                u.set_column(s, &level);
            }
            t += hold;
        }
        u
    }
}

/// One open-loop network experiment and the per-node datasets cut from it.
#[derive(Clone, Debug)]
pub struct NetworkExperiment {
    pub local: Vec<LocalData>,
    pub interconnection: Vec<InterconnectionData>,
    /// Stacked outputs, one row per output channel.
    pub y: DMatrix<f64>,
}

/// Settings for [`simulate_network`].
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub samples: usize,
    pub samples_tilde: usize,
    pub eps_l: f64,
    pub eps_g: f64,
    pub excitation: Excitation,
    pub master_seed: u64,
}

const STREAM_INPUT: u64 = 1;
const STREAM_LOCAL_NOISE: u64 = 2;
const STREAM_COUPLING_NOISE: u64 = 3;

/// Runs the interconnected network open loop with `v = M y + xi`. Local
/// data uses the first `samples` columns and interconnection data the first
/// `samples_tilde` columns of the same run. States start at zero.
pub fn simulate_network(
    models: &[SubsystemModel],
    m: &InterconnectionMatrix,
    spec: &ExperimentSpec,
) -> Result<NetworkExperiment> {
    let topo = m.topology();
    if models.len() != topo.k() {
        return Err(Error::invalid("model count differs from the topology size"));
    }
    for (i, model) in models.iter().enumerate() {
        if model.p() != topo.p_dims()[i] {
            return Err(Error::invalid(format!("node {i}: output dimension differs from the topology")));
        }
        if model.d2.iter().any(|v| *v != 0.0) {
            return Err(Error::Unsupported("network simulation assumes D2 = 0".into()));
        }
    }
    let horizon = spec.samples.max(spec.samples_tilde);
    if spec.samples == 0 || spec.samples_tilde == 0 {
        return Err(Error::invalid("data lengths must be positive"));
    }
    let k = models.len();
    let offsets = topo.offsets();
    let p_total = offsets[k];

    let mut inputs = Vec::with_capacity(k);
    let mut local_noise = Vec::with_capacity(k);
    let mut coupling_noise = Vec::with_capacity(k);
    for (i, model) in models.iter().enumerate() {
        inputs.push(spec.excitation.sample(&mut node_rng(spec.master_seed, i, STREAM_INPUT), model.m(), horizon));
        let wl = NoiseBound::per_sample_ball(model.n() + model.p(), horizon, spec.eps_l)?;
        local_noise.push(sample_with_rng(&wl, &mut node_rng(spec.master_seed, i, STREAM_LOCAL_NOISE))?);
        let wg = NoiseBound::per_sample_ball(model.p(), horizon, spec.eps_g)?;
        coupling_noise.push(sample_with_rng(&wg, &mut node_rng(spec.master_seed, i, STREAM_COUPLING_NOISE))?);
    }

    let mut states: Vec<DVector<f64>> = models.iter().map(|md| DVector::zeros(md.n())).collect();
    let mut xs: Vec<DMatrix<f64>> = models.iter().map(|md| DMatrix::zeros(md.n(), horizon + 1)).collect();
    let mut ys = DMatrix::zeros(p_total, horizon);
    let mut vs = DMatrix::zeros(p_total, horizon);
    for t in 0..horizon {
        let mut y = DVector::zeros(p_total);
        for (i, md) in models.iter().enumerate() {
            let (n, p) = (md.n(), md.p());
            let w2 = local_noise[i].view((n, t), (p, 1));
            let yi = &md.c * &states[i] + &md.d1 * inputs[i].column(t) + w2;
            y.rows_mut(offsets[i], p).copy_from(&yi);
        }
        let mut v = m.matrix() * &y;
        for (i, md) in models.iter().enumerate() {
            let mut vi = v.rows_mut(offsets[i], md.p());
            vi += coupling_noise[i].column(t);
        }
        for (i, md) in models.iter().enumerate() {
            let n = md.n();
            let vi = v.rows(offsets[i], md.p());
            let w1 = local_noise[i].view((0, t), (n, 1));
            xs[i].set_column(t, &states[i]);
            states[i] = &md.a * &states[i] + &md.b1 * inputs[i].column(t) + &md.b2 * vi + w1;
        }
        ys.set_column(t, &y);
        vs.set_column(t, &v);
    }

    let mut local = Vec::with_capacity(k);
    let mut inter = Vec::with_capacity(k);
    for (i, md) in models.iter().enumerate() {
        let (p, off, n_s) = (md.p(), offsets[i], spec.samples);
        xs[i].set_column(horizon, &states[i]);
        local.push(LocalData::new(
            xs[i].columns(0, n_s).into_owned(),
            xs[i].columns(1, n_s).into_owned(),
            inputs[i].columns(0, n_s).into_owned(),
            vs.view((off, 0), (p, n_s)).into_owned(),
            ys.view((off, 0), (p, n_s)).into_owned(),
        )?);
        let order = topo.neighbors(i).to_vec();
        let nt = spec.samples_tilde;
        let p_tilde: usize = order.iter().map(|j| topo.p_dims()[*j]).sum();
        let mut yt = DMatrix::zeros(p_tilde, nt);
        let mut row = 0;
        for &j in &order {
            let pj = topo.p_dims()[j];
            yt.view_mut((row, 0), (pj, nt)).copy_from(&ys.view((offsets[j], 0), (pj, nt)));
            row += pj;
        }
        inter.push(InterconnectionData::new(vs.view((off, 0), (p, nt)).into_owned(), yt, order)?);
    }
    Ok(NetworkExperiment { local, interconnection: inter, y: ys })
}

/// `J = [[I, [X+; Y]], [0, -[X; U; V]]] Phi [.]^T` and whether `Phi11` had
/// to be shifted to give `J` a positive eigenvalue.
pub fn build_j(data: &LocalData, phi: &NoiseBound, regularize: bool) -> Result<(SymMatrix, bool)> {
    data.validate()?;
    let (n, m, p) = data.dims();
    let horizon = data.samples();
    if phi.horizon != horizon || phi.dim() != n + p {
        return Err(Error::invalid(format!(
            "noise bound is {}x{}, data needs {}x{horizon}",
            phi.dim(),
            phi.horizon,
            n + p
        )));
    }
    let mut t = DMatrix::zeros(2 * n + m + 2 * p, n + p + horizon);
    t.view_mut((0, 0), (n + p, n + p)).fill_with_identity();
    t.view_mut((0, n + p), (n, horizon)).copy_from(&data.x_plus);
    t.view_mut((n, n + p), (p, horizon)).copy_from(&data.y);
    let r0 = n + p;
    t.view_mut((r0, n + p), (n, horizon)).copy_from(&(-&data.x));
    t.view_mut((r0 + n, n + p), (m, horizon)).copy_from(&(-&data.u));
    t.view_mut((r0 + n + m, n + p), (p, horizon)).copy_from(&(-&data.v));

    let j = phi.full().congruence(&t.transpose());
    let ev = j.eigenvalues();
    let has_positive = ev[ev.len() - 1] > INERTIA_TOL * j.spectral_norm().max(1.0);
    if regularize && !has_positive {
        return Ok((phi.regularized().full().congruence(&t.transpose()), true));
    }
    Ok((j, false))
}

/// `Theta` and its dual `Theta^`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaPair {
    pub theta: SymMatrix,
    pub theta_hat: SymMatrix,
    pub regularized: bool,
    /// Shift added to `Psi11`, zero when unregularized.
    pub regularization: f64,
}

impl ThetaPair {
    /// Inertia of `Theta^`. Invertibility is already established, so the sign
    /// count uses a threshold below the conditioning floor.
    pub fn dual_inertia(&self) -> Result<Inertia> {
        inertia(&self.theta_hat, 0.5 * RCOND_MIN)
    }
}

/// Regularization attempts beyond the base shift.
pub const THETA_REG_RUNGS: usize = 24;

/// `Theta = [[I, V~], [0, -Y~]] Psi [.]^T` and `Theta^` its dual QMI.
/// The dual set reads `{M~r : [I; M~r]^T Theta^ [I; M~r] >= 0}`.
pub fn build_theta_pair(data: &InterconnectionData, psi: &NoiseBound, regularize: bool) -> Result<ThetaPair> {
    let (p, pt, horizon) = (data.v_tilde.nrows(), data.y_tilde.nrows(), data.samples());
    if psi.horizon != horizon || psi.dim() != p {
        return Err(Error::invalid("interconnection noise bound inconsistent with the data"));
    }
    let mut t = DMatrix::zeros(p + pt, p + horizon);
    t.view_mut((0, 0), (p, p)).fill_with_identity();
    t.view_mut((0, p), (p, horizon)).copy_from(&data.v_tilde);
    t.view_mut((p, p), (pt, horizon)).copy_from(&(-&data.y_tilde));

    let mut theta = psi.full().congruence(&t.transpose());
    let mut regularization = 0.0;
    if theta.rcond() < RCOND_MIN && regularize {
        // The base shift alone is too small once the data scale is large.
        // The smallest eigenvalue grows about linearly in the shift, so jump
        // to the extrapolated shift, then double until Theta is invertible.
        regularization = psi.regularization();
        for rung in 0..=THETA_REG_RUNGS {
            theta = psi.regularized_by(regularization).full().congruence(&t.transpose());
            let rc = theta.rcond();
            if rc >= RCOND_MIN {
                break;
            }
            regularization *= if rung == 0 && rc > 0.0 { (1.05 * RCOND_MIN / rc).max(2.0) } else { 2.0 };
        }
    }
    if theta.rcond() < RCOND_MIN {
        return Err(Error::Singular { rcond: theta.rcond() });
    }
    let theta_hat = QmiSet::new(theta.clone(), p, pt)?.dual()?.pi().clone();
    let pair = ThetaPair { theta, theta_hat, regularized: regularization > 0.0, regularization };
    let inr = pair.dual_inertia()?;
    if inr != Inertia::new(p, 0, pt) {
        return Err(Error::Precondition(format!(
            "dual interconnection matrix has inertia ({}, {}, {}), expected ({p}, 0, {pt})",
            inr.neg, inr.zero, inr.pos
        )));
    }
    Ok(pair)
}

/// `Lambda = [E 0; 0 I]^T [[H - beta I, -G^T], [-G, F]] [E 0; 0 I]` with
/// `E = [I_p 0 ... 0]` (`p x p_tilde`). The sign of `G` matches the global
/// condition `M F M^T - M G - G^T M^T + H > 0` that `Lambda` localizes.
pub fn build_lambda(s: &SupplyRate, beta: f64, p_tilde: usize) -> Result<SymMatrix> {
    let p = s.output_dim();
    if s.input_dim() != p || p_tilde < p {
        return Err(Error::invalid("local certificate needs a square supply and p_tilde >= p"));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let flipped = SupplyRate { g: -&s.g, ..s.clone() };
    let shifted = flipped.block_matrix().sub(&{
        let mut d = DMatrix::zeros(2 * p, 2 * p);
        d.view_mut((0, 0), (p, p)).fill_with_identity();
        SymMatrix::new(d * beta)?
    });
    Ok(shifted.congruence(&lambda_embedding(p, p_tilde)))
}

/// `[E 0; 0 I]`, shape `2p x (p_tilde + p)`.
pub(crate) fn lambda_embedding(p: usize, p_tilde: usize) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(2 * p, p_tilde + p);
    t.view_mut((0, 0), (p, p)).fill_with_identity();
    t.view_mut((p, p_tilde), (p, p)).fill_with_identity();
    t
}

/// Per-sample ball bounds `(Phi, Psi)` matching a node's datasets.
pub fn algorithm_data_bounds(
    local: &LocalData,
    inter: &InterconnectionData,
    eps_l: f64,
    eps_g: f64,
) -> Result<(NoiseBound, NoiseBound)> {
    let (n, _, p) = local.dims();
    Ok((
        NoiseBound::per_sample_ball(n + p, local.samples(), eps_l)?,
        NoiseBound::per_sample_ball(inter.v_tilde.nrows(), inter.samples(), eps_g)?,
    ))
}

/// JSON container for one node's datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDataset {
    pub node: usize,
    #[serde(rename = "N")]
    pub samples: usize,
    #[serde(rename = "N_tilde")]
    pub samples_tilde: usize,
    pub eps_l: f64,
    pub eps_g: f64,
    pub local: LocalData,
    pub interconnection: InterconnectionData,
}

impl NodeDataset {
    pub fn validate(&self) -> Result<()> {
        self.local.validate()?;
        if self.local.samples() != self.samples || self.interconnection.samples() != self.samples_tilde {
            return Err(Error::invalid("dataset column counts disagree with N / N_tilde"));
        }
        if self.interconnection.v_tilde.nrows() != self.local.y.nrows() {
            return Err(Error::invalid("interconnection input dimension differs from the local one"));
        }
        if self.interconnection.neighbor_order.first() != Some(&self.node) {
            return Err(Error::invalid("neighbor order must start with the node itself"));
        }
        Ok(())
    }

    pub fn phi(&self) -> Result<NoiseBound> {
        let (n, _, p) = self.local.dims();
        NoiseBound::per_sample_ball(n + p, self.samples, self.eps_l)
    }

    pub fn psi(&self) -> Result<NoiseBound> {
        NoiseBound::per_sample_ball(self.local.y.nrows(), self.samples_tilde, self.eps_g)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: NodeDataset = serde_json::from_str(text)?;
        d.validate()?;
        Ok(d)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissip::Parametrization;
    use crate::network::{diffusive_interconnection, DiffusiveWeights, Topology};
    use nalgebra::dmatrix;

    fn scalar_model(a: f64, b1: f64, b2: f64) -> SubsystemModel {
        SubsystemModel::new(
            dmatrix![a],
            dmatrix![b1],
            dmatrix![b2],
            dmatrix![1.0],
            dmatrix![0.0],
            dmatrix![0.0],
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_is_zero() {
        let b = NoiseBound::per_sample_ball(3, 10, 0.0).unwrap();
        assert_eq!(sample_noise(&b, NoiseKind::PerSampleBall, 4).unwrap(), DMatrix::zeros(3, 10));
    }

    #[test]
    fn sampled_noise_respects_the_bound() {
        let b = NoiseBound::per_sample_ball(3, 50, 0.001).unwrap();
        let w = sample_noise(&b, NoiseKind::PerSampleBall, 9).unwrap();
        for c in w.column_iter() {
            assert!(c.norm_squared() <= 0.001 + 1e-15);
        }
        assert!(b.admits(&w).unwrap());
        assert_eq!(w, sample_noise(&b, NoiseKind::PerSampleBall, 9).unwrap());
        assert_ne!(w, sample_noise(&b, NoiseKind::PerSampleBall, 10).unwrap());
    }

    #[test]
    fn non_ball_bounds_cannot_be_sampled() {
        let b = NoiseBound::new(
            SymMatrix::from_diagonal(&[1.0, 2.0]).unwrap(),
            DMatrix::zeros(2, 3),
            SymMatrix::scaled_identity(3, -1.0),
            3,
        )
        .unwrap();
        assert!(matches!(sample_noise(&b, NoiseKind::PerSampleBall, 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn noiseless_recursion() {
        let model = SubsystemModel::new(
            dmatrix![2.0],
            dmatrix![1.0],
            dmatrix![0.0],
            dmatrix![1.0],
            dmatrix![0.0],
            dmatrix![0.0],
        )
        .unwrap();
        let u = DMatrix::from_element(1, 4, 1.0);
        let v = DMatrix::zeros(1, 4);
        let b = NoiseBound::per_sample_ball(2, 4, 0.0).unwrap();
        let d = simulate_collect_local(&model, &u, &v, &b, 4, 0, &DVector::zeros(1)).unwrap();
        assert_eq!(d.x, dmatrix![0.0, 1.0, 3.0, 7.0]);
        assert_eq!(d.x_plus, dmatrix![1.0, 3.0, 7.0, 15.0]);

        let zero = simulate_collect_local(&model, &v, &v, &b, 4, 0, &DVector::zeros(1)).unwrap();
        assert!(zero.x.iter().chain(zero.y.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn true_model_lies_in_the_consistency_set() {
        let model = SubsystemModel::new(
            dmatrix![0.9, 0.1; -0.2, 0.5],
            dmatrix![0.0; 1.0],
            dmatrix![1.0; 0.0],
            dmatrix![1.0, 0.0],
            dmatrix![0.0],
            dmatrix![0.0],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = Excitation::default().sample(&mut rng, 1, 40);
        let v = Excitation::default().sample(&mut rng, 1, 40);
        let phi = NoiseBound::per_sample_ball(3, 40, 0.01).unwrap();
        let data = simulate_collect_local(&model, &u, &v, &phi, 40, 5, &DVector::zeros(2)).unwrap();
        let (j, reg) = build_j(&data, &phi, true).unwrap();
        assert!(!reg);
        let set = QmiSet::new(j, 3, 4).unwrap();
        assert!(set.contains(&model.parameter_stack(), false).unwrap());
        // A clearly wrong model is excluded.
        let mut wrong = model.clone();
        wrong.a[(0, 0)] = -0.5;
        assert!(!set.contains(&wrong.parameter_stack(), false).unwrap());
    }

    #[test]
    fn j_of_zero_data() {
        let d = LocalData::new(
            DMatrix::zeros(1, 3),
            DMatrix::zeros(1, 3),
            DMatrix::zeros(1, 3),
            DMatrix::zeros(1, 3),
            DMatrix::zeros(1, 3),
        )
        .unwrap();
        let phi = NoiseBound::per_sample_ball(2, 3, 0.1).unwrap();
        let (j, _) = build_j(&d, &phi, false).unwrap();
        let mut expected = DMatrix::zeros(5, 5);
        expected.view_mut((0, 0), (2, 2)).fill_with_identity();
        assert!((j.matrix() - expected * 0.3).amax() < 1e-15);
    }

    #[test]
    fn noiseless_j_is_regularized() {
        let model = scalar_model(0.5, 1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = Excitation::default().sample(&mut rng, 1, 20);
        let v = Excitation::default().sample(&mut rng, 1, 20);
        let phi = NoiseBound::per_sample_ball(2, 20, 0.0).unwrap();
        let data = simulate_collect_local(&model, &u, &v, &phi, 20, 0, &DVector::zeros(1)).unwrap();
        let (j, reg) = build_j(&data, &phi, true).unwrap();
        assert!(reg);
        assert!(j.eigenvalues().iter().any(|v| *v > 0.0));
        let set = QmiSet::new(j, 2, 3).unwrap();
        assert!(set.contains(&model.parameter_stack(), false).unwrap());
    }

    #[test]
    fn interconnection_examples() {
        let zero = NoiseBound::per_sample_ball(1, 2, 0.0).unwrap();
        let d = collect_interconnection(&dmatrix![0.0, 0.0], &dmatrix![1.0, 0.0; 0.0, 1.0], &zero, 2, 0, vec![0, 1]).unwrap();
        assert_eq!(d.v_tilde, dmatrix![0.0, 0.0]);
        let d = collect_interconnection(&dmatrix![-2.0, 2.0], &dmatrix![1.0, 0.0; 0.0, 1.0], &zero, 2, 0, vec![0, 1]).unwrap();
        assert_eq!(d.v_tilde, dmatrix![-2.0, 2.0]);
    }

    #[test]
    fn theta_hat_contains_true_row() {
        let m_row = dmatrix![-0.5, 0.25, 0.25];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = DMatrix::<f64>::from_fn(3, 30, |_, _| rng.gen_range(-1.0..1.0));
        for eps in [0.0, 1e-3, 1e-2] {
            let psi = NoiseBound::per_sample_ball(1, 30, eps).unwrap();
            let data = collect_interconnection(&m_row, &y, &psi, 30, 2, vec![0, 1, 2]).unwrap();
            let xi = &data.v_tilde - &m_row * &data.y_tilde;
            assert!(psi.admits(&xi).unwrap());
            let pair = build_theta_pair(&data, &psi, true).unwrap();
            assert_eq!(pair.regularized, eps == 0.0);
            assert_eq!(pair.dual_inertia().unwrap(), Inertia::new(1, 0, 3));
            let set = QmiSet::new(pair.theta_hat.clone(), 3, 1).unwrap();
            assert!(set.contains(&m_row, false).unwrap());
        }
    }

    #[test]
    fn theta_of_zero_data_regularizes_then_fails() {
        let psi = NoiseBound::per_sample_ball(1, 4, 0.01).unwrap();
        let data = InterconnectionData::new(DMatrix::zeros(1, 4), DMatrix::zeros(2, 4), vec![0, 1]).unwrap();
        // Theta = diag(N eps, 0, 0): singular, and shifting Psi11 cannot help.
        assert!(matches!(build_theta_pair(&data, &psi, true), Err(Error::Singular { .. })));
        assert!(matches!(build_theta_pair(&data, &psi, false), Err(Error::Singular { .. })));
    }

    #[test]
    fn lambda_examples() {
        let s = SupplyRate::new(
            SymMatrix::new(dmatrix![-1.0]).unwrap(),
            dmatrix![0.0],
            SymMatrix::new(dmatrix![2.0]).unwrap(),
            Parametrization::InverseBlock,
        )
        .unwrap();
        let l = build_lambda(&s, 1.0, 2).unwrap();
        assert_eq!(l, SymMatrix::from_diagonal(&[1.0, 0.0, -1.0]).unwrap());
        let s = SupplyRate { g: dmatrix![0.3], ..s };
        let l1 = build_lambda(&s, 0.5, 1).unwrap();
        assert_eq!(l1.matrix(), &dmatrix![1.5, -0.3; -0.3, -1.0]);
    }

    #[test]
    fn network_experiment_is_consistent_and_deterministic() {
        let topo = Topology::from_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)]).unwrap();
        let mut w = DMatrix::zeros(4, 4);
        for (i, j) in topo.edges() {
            w[(i, j)] = 0.25;
            w[(j, i)] = 0.25;
        }
        let m = diffusive_interconnection(&DiffusiveWeights::new(w).unwrap(), &topo).unwrap();
        let models: Vec<_> = (0..4).map(|i| scalar_model(0.5 + 0.1 * i as f64, 1.0, 0.5)).collect();
        let spec = ExperimentSpec {
            samples: 20,
            samples_tilde: 15,
            eps_l: 1e-3,
            eps_g: 1e-3,
            excitation: Excitation::default(),
            master_seed: 42,
        };
        let e1 = simulate_network(&models, &m, &spec).unwrap();
        let e2 = simulate_network(&models, &m, &spec).unwrap();
        assert_eq!(e1.y, e2.y);
        for i in 0..4 {
            let d = &e1.local[i];
            assert_eq!(d.samples(), 20);
            assert_eq!(d.x.columns(1, 19), d.x_plus.columns(0, 19));
            let inter = &e1.interconnection[i];
            assert_eq!(inter.samples(), 15);
            assert_eq!(inter.neighbor_order[0], i);
            let xi = &inter.v_tilde - m.row_restriction(i) * &inter.y_tilde;
            assert!(NoiseBound::per_sample_ball(1, 15, 1e-3).unwrap().admits(&xi).unwrap());
            let phi = NoiseBound::per_sample_ball(2, 20, 1e-3).unwrap();
            let (j, _) = build_j(d, &phi, true).unwrap();
            assert!(QmiSet::new(j, 2, 3).unwrap().contains(&models[i].parameter_stack(), false).unwrap());
        }
    }

    #[test]
    fn dataset_json_round_trip() {
        let local = LocalData::new(
            dmatrix![1.0, 2.0],
            dmatrix![2.0, 3.0],
            dmatrix![0.5, -0.5],
            dmatrix![0.0, 0.1],
            dmatrix![1.0, 2.0],
        )
        .unwrap();
        let inter = InterconnectionData::new(dmatrix![0.1, 0.2], dmatrix![1.0, 2.0; 3.0, 4.0], vec![0, 3]).unwrap();
        let ds = NodeDataset { node: 0, samples: 2, samples_tilde: 2, eps_l: 0.0, eps_g: 0.0, local, interconnection: inter };
        let text = ds.to_json().unwrap();
        assert_eq!(NodeDataset::from_json(&text).unwrap(), ds);
        let bad = text.replace("\"N\": 2", "\"N\": 3");
        assert!(NodeDataset::from_json(&bad).is_err());
    }
}
