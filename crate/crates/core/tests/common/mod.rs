#![allow(dead_code)]

use ddnet_core::datagen::{collect_interconnection, InterconnectionData, NoiseBound};
use ddnet_core::dissip::{LinearSystem, Parametrization, SupplyRate};
use ddnet_core::matqmi::{QmiSet, SymMatrix};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn orthogonal<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    gaussian(rng, n, n).qr().q()
}

/// Symmetric matrix with eigenvalues drawn uniformly from `[lo, hi]`.
pub fn spd<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> SymMatrix {
    let q = orthogonal(rng, n);
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |_, _| rng.gen_range(lo..=hi)));
    SymMatrix::new(&q * d * q.transpose()).unwrap()
}

/// Symmetric matrix with exactly the prescribed inertia; the nonzero
/// eigenvalues have modulus in `[0.1, 10]`.
pub fn with_inertia<R: Rng>(rng: &mut R, neg: usize, zero: usize, pos: usize) -> SymMatrix {
    let n = neg + zero + pos;
    let mut d = Vec::with_capacity(n);
    d.extend((0..neg).map(|_| -rng.gen_range(0.1..10.0)));
    d.extend((0..zero).map(|_| 0.0));
    d.extend((0..pos).map(|_| rng.gen_range(0.1..10.0)));
    let q = orthogonal(rng, n);
    let m = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d)) * q.transpose();
    SymMatrix::new(m).unwrap()
}

/// Ellipsoidal QMI set `{Z : R - (Z - Z0)^T W (Z - Z0) >= 0}` with its center.
pub fn ball_qmi<R: Rng>(rng: &mut R, q: usize, r: usize) -> (QmiSet, DMatrix<f64>) {
    let z0 = gaussian(rng, r, q);
    let w = spd(rng, r, 0.2, 5.0);
    let rr = spd(rng, q, 0.2, 5.0);
    let wz = w.matrix() * &z0;
    let mut pi = DMatrix::zeros(q + r, q + r);
    pi.view_mut((0, 0), (q, q)).copy_from(&(rr.matrix() - z0.transpose() * &wz));
    pi.view_mut((0, q), (q, r)).copy_from(&wz.transpose());
    pi.view_mut((q, 0), (r, q)).copy_from(&wz);
    pi.view_mut((q, q), (r, r)).copy_from(&(-w.matrix()));
    (QmiSet::new(SymMatrix::new(pi).unwrap(), q, r).unwrap(), z0)
}

pub fn stable_system<R: Rng>(rng: &mut R, n: usize, q: usize, p: usize, radius: f64) -> LinearSystem {
    let a = gaussian(rng, n, n);
    let rho = ddnet_core::network::spectral_radius(&a).max(1e-3);
    LinearSystem::new(a * (radius / rho), gaussian(rng, n, q), gaussian(rng, p, n), gaussian(rng, p, q) * 0.5).unwrap()
}

/// Direct-form supply `T^T diag(gamma^2 I_q, -I_p) T`, inertia `(p, 0, q)`.
pub fn supply_with_inertia<R: Rng>(rng: &mut R, q: usize, p: usize, gamma: f64) -> SupplyRate {
    let t = DMatrix::identity(q + p, q + p) + gaussian(rng, q + p, q + p) * 0.2;
    let mut d = DMatrix::zeros(q + p, q + p);
    for i in 0..q {
        d[(i, i)] = gamma * gamma;
    }
    for i in q..q + p {
        d[(i, i)] = -1.0;
    }
    let s = t.transpose() * d * &t;
    let s = (&s + s.transpose()) * 0.5;
    SupplyRate::new(
        SymMatrix::new(s.view((q, q), (p, p)).into_owned()).unwrap(),
        s.view((q, 0), (p, q)).into_owned(),
        SymMatrix::new(s.view((0, 0), (q, q)).into_owned()).unwrap(),
        Parametrization::Direct,
    )
    .unwrap()
}

/// Scalar-output node with `neighbors` diffusive neighbors: the restricted
/// row `[-d, a_1, ..., a_r]`, its degree, and noisy interconnection data.
pub struct DiffusiveCase {
    pub m_row: DMatrix<f64>,
    pub degree: f64,
    pub data: InterconnectionData,
    pub bound: NoiseBound,
}

pub fn diffusive_case<R: Rng>(rng: &mut R, neighbors: usize, samples: usize, eps: f64) -> DiffusiveCase {
    let weights: Vec<f64> = (0..neighbors).map(|_| rng.gen_range(0.5..5.0)).collect();
    let degree: f64 = weights.iter().sum();
    let mut m_row = DMatrix::zeros(1, neighbors + 1);
    m_row[(0, 0)] = -degree;
    for (j, a) in weights.iter().enumerate() {
        m_row[(0, j + 1)] = *a;
    }
    let y = DMatrix::from_fn(neighbors + 1, samples, |_, _| rng.gen_range(-1.0..1.0));
    let bound = NoiseBound::per_sample_ball(1, samples, eps).unwrap();
    let order = (0..=neighbors).collect();
    let data = collect_interconnection(&m_row, &y, &bound, samples, rng.gen(), order).unwrap();
    DiffusiveCase { m_row, degree, data, bound }
}
