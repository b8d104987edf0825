//! Interconnection structure, global closed-loop assembly and the stability
//! certificates built from local supply rates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datagen::{build_lambda, SubsystemModel};
use crate::dissip::SupplyRate;
use crate::error::{Error, Result};
use crate::matqmi::{SymMatrix, DELTA_STRICT, RCOND_MIN, TOL_PSD};

/// `rho(A_cl) <= 1 - STABILITY_MARGIN` counts as asymptotically stable.
pub const STABILITY_MARGIN: f64 = 1e-9;

/// Neighborhoods `N_i`, each listed as `[i, ascending neighbors...]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    k: usize,
    neighbor_sets: Vec<Vec<usize>>,
    p_dims: Vec<usize>,
}

impl Topology {
    pub fn new(neighbor_sets: Vec<Vec<usize>>, p_dims: Vec<usize>) -> Result<Self> {
        let k = neighbor_sets.len();
        if p_dims.len() != k {
            return Err(Error::invalid("one output dimension per node is required"));
        }
        let mut canon = Vec::with_capacity(k);
        for (i, set) in neighbor_sets.iter().enumerate() {
            if set.iter().any(|j| *j >= k) {
                return Err(Error::invalid(format!("node {i}: neighbor index out of range")));
            }
            let mut others: Vec<usize> = set.iter().copied().filter(|j| *j != i).collect();
            others.sort_unstable();
            others.dedup();
            let mut ordered = vec![i];
            ordered.extend(others);
            canon.push(ordered);
        }
        for (i, set) in canon.iter().enumerate() {
            for &j in &set[1..] {
                if !canon[j].contains(&i) {
                    return Err(Error::invalid(format!("adjacency not symmetric between {i} and {j}")));
                }
            }
        }
        Ok(Topology { k, neighbor_sets: canon, p_dims })
    }

    /// Scalar-output topology from an undirected edge list.
    pub fn from_edges(k: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut sets: Vec<Vec<usize>> = (0..k).map(|i| vec![i]).collect();
        for &(i, j) in edges {
            if i >= k || j >= k || i == j {
                return Err(Error::invalid(format!("invalid edge ({i}, {j})")));
            }
            sets[i].push(j);
            sets[j].push(i);
        }
        Topology::new(sets, vec![1; k])
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p_dims(&self) -> &[usize] {
        &self.p_dims
    }

    /// `N_i` in canonical order (own index first).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbor_sets[i]
    }

    /// Edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, set) in self.neighbor_sets.iter().enumerate() {
            out.extend(set[1..].iter().filter(|j| **j > i).map(|j| (i, *j)));
        }
        out
    }

    /// Row offsets of each node's output block; last entry is the total.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = vec![0; self.k + 1];
        for i in 0..self.k {
            off[i + 1] = off[i] + self.p_dims[i];
        }
        off
    }

    /// `p~_i`.
    pub fn p_tilde(&self, i: usize) -> usize {
        self.neighbors(i).iter().map(|j| self.p_dims[*j]).sum()
    }
}

/// Symmetric interconnection `v = M y` respecting the topology's sparsity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterconnectionMatrix {
    #[serde(with = "crate::serial::dmatrix")]
    m: DMatrix<f64>,
    topology: Topology,
}

impl InterconnectionMatrix {
    pub fn new(m: DMatrix<f64>, topology: Topology) -> Result<Self> {
        let off = topology.offsets();
        let p = off[topology.k()];
        if m.shape() != (p, p) {
            return Err(Error::invalid(format!("M must be {p}x{p}")));
        }
        if m != m.transpose() {
            return Err(Error::invalid("M must be exactly symmetric"));
        }
        for i in 0..topology.k() {
            for j in 0..topology.k() {
                if topology.neighbors(i).contains(&j) {
                    continue;
                }
                let block = m.view((off[i], off[j]), (topology.p_dims[i], topology.p_dims[j]));
                if block.iter().any(|v| *v != 0.0) {
                    return Err(Error::invalid(format!("M has a nonzero block ({i}, {j}) outside the topology")));
                }
            }
        }
        Ok(InterconnectionMatrix { m, topology })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let off = self.topology.offsets();
        let pd = &self.topology.p_dims;
        self.m.view((off[i], off[j]), (pd[i], pd[j])).into_owned()
    }

    /// `M~r_i = [M_ii, M_i,s(1), ...]` in canonical neighbor order.
    pub fn row_restriction(&self, i: usize) -> DMatrix<f64> {
        let blocks: Vec<DMatrix<f64>> = self.topology.neighbors(i).iter().map(|j| self.block(i, *j)).collect();
        let cols = blocks.iter().map(|b| b.ncols()).sum();
        let mut out = DMatrix::zeros(self.topology.p_dims[i], cols);
        let mut c = 0;
        for b in blocks {
            out.view_mut((0, c), b.shape()).copy_from(&b);
            c += b.ncols();
        }
        out
    }
}

/// Symmetric nonnegative weights `a_ij` with zero diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusiveWeights {
    #[serde(with = "crate::serial::dmatrix")]
    weights: DMatrix<f64>,
}

impl DiffusiveWeights {
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if !weights.is_square() || weights != weights.transpose() {
            return Err(Error::invalid("weights must form a symmetric square matrix"));
        }
        if weights.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || weights.diagonal().iter().any(|v| *v != 0.0) {
            return Err(Error::invalid("weights must be finite, nonnegative, with zero diagonal"));
        }
        Ok(DiffusiveWeights { weights })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// `d_i = sum_j a_ij`.
    pub fn degree(&self, i: usize) -> f64 {
        self.weights.row(i).sum()
    }
}

/// `M_ij = a_ij`, `M_ii = -d_i`: the negated weighted Laplacian.
pub fn diffusive_interconnection(w: &DiffusiveWeights, topo: &Topology) -> Result<InterconnectionMatrix> {
    if topo.p_dims().iter().any(|p| *p != 1) {
        return Err(Error::Unsupported("diffusive coupling requires scalar outputs".into()));
    }
    let k = topo.k();
    if w.weights.nrows() != k {
        return Err(Error::invalid("weight matrix size differs from the topology"));
    }
    for i in 0..k {
        for j in 0..k {
            let adjacent = i != j && topo.neighbors(i).contains(&j);
            if adjacent != (w.weights[(i, j)] > 0.0) {
                return Err(Error::invalid(format!("weight ({i}, {j}) disagrees with the topology")));
            }
        }
    }
    let mut m = w.weights.clone();
    for i in 0..k {
        m[(i, i)] = -w.degree(i);
    }
    InterconnectionMatrix::new(m, topo.clone())
}

fn block_diag(blocks: impl Iterator<Item = DMatrix<f64>>) -> DMatrix<f64> {
    let blocks: Vec<_> = blocks.collect();
    let (r, c) = blocks.iter().fold((0, 0), |(r, c), b| (r + b.nrows(), c + b.ncols()));
    let mut out = DMatrix::zeros(r, c);
    let (mut i, mut j) = (0, 0);
    for b in blocks {
        out.view_mut((i, j), b.shape()).copy_from(&b);
        i += b.nrows();
        j += b.ncols();
    }
    out
}

/// Largest modulus among the eigenvalues of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.complex_eigenvalues().iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

pub fn is_stable(rho: f64) -> bool {
    rho <= 1.0 - STABILITY_MARGIN
}

/// Global closed loop under `u_i = K_i x_i`:
/// `A_cl = (A + B1 K) + B2 M (I - D2 M)^{-1} (C + D1 K)`.
pub fn assemble_closed_loop(
    models: &[SubsystemModel],
    gains: &[DMatrix<f64>],
    m: &InterconnectionMatrix,
) -> Result<(DMatrix<f64>, f64)> {
    if models.len() != gains.len() || models.len() != m.topology().k() {
        return Err(Error::invalid("models, gains and topology must agree in size"));
    }
    for (i, (md, k)) in models.iter().zip(gains).enumerate() {
        md.validate()?;
        if k.shape() != (md.m(), md.n()) || md.p() != m.topology().p_dims()[i] {
            return Err(Error::invalid(format!("node {i}: dimensions inconsistent")));
        }
    }
    let a = block_diag(models.iter().map(|md| md.a.clone()));
    let b1 = block_diag(models.iter().map(|md| md.b1.clone()));
    let b2 = block_diag(models.iter().map(|md| md.b2.clone()));
    let c = block_diag(models.iter().map(|md| md.c.clone()));
    let d1 = block_diag(models.iter().map(|md| md.d1.clone()));
    let d2 = block_diag(models.iter().map(|md| md.d2.clone()));
    let k = block_diag(gains.iter().cloned());
    let mm = m.matrix();

    let coupling = if d2.iter().all(|v| *v == 0.0) {
        mm.clone()
    } else {
        let loop_m = DMatrix::identity(mm.nrows(), mm.ncols()) - &d2 * mm;
        let sv = loop_m.clone().svd(false, false).singular_values;
        let (lo, hi) = (sv.min(), sv.max());
        if hi == 0.0 || lo / hi < RCOND_MIN {
            return Err(Error::IllPosed);
        }
        let inv = loop_m.try_inverse().ok_or(Error::IllPosed)?;
        mm * inv
    };
    let acl = (&a + &b1 * &k) + &b2 * coupling * (&c + &d1 * &k);
    let rho = spectral_radius(&acl);
    Ok((acl, rho))
}

/// `M F M^T - M G - G^T M^T + H > 0` and `F <= 0` with block-diagonal
/// `F, G, H` assembled from the local supplies.
pub fn global_stability_cert(supplies: &[SupplyRate], m: &InterconnectionMatrix) -> Result<bool> {
    let topo = m.topology();
    if supplies.len() != topo.k() {
        return Err(Error::invalid("one supply per node is required"));
    }
    for (i, s) in supplies.iter().enumerate() {
        if s.output_dim() != topo.p_dims()[i] || s.input_dim() != topo.p_dims()[i] {
            return Err(Error::invalid(format!("node {i}: supply dimension differs from the topology")));
        }
        let block = s.block_matrix();
        if block.rcond() < RCOND_MIN {
            return Err(Error::Singular { rcond: block.rcond() });
        }
    }
    let f = block_diag(supplies.iter().map(|s| s.f.matrix().clone()));
    let g = block_diag(supplies.iter().map(|s| s.g.clone()));
    let h = block_diag(supplies.iter().map(|s| s.h.matrix().clone()));
    let mm = m.matrix();
    let x = mm * &f * mm.transpose() - mm * &g - g.transpose() * mm.transpose() + h;
    let x = SymMatrix::new(x)?;
    let f = SymMatrix::new(f)?;
    Ok(x.is_pd() && f.neg().is_psd())
}

/// `[I; M~r]^T Lambda [I; M~r] >= 0` and `F <= 0`.
pub fn local_stability_cert(s: &SupplyRate, m_row: &DMatrix<f64>, beta: f64) -> Result<bool> {
    let p = s.output_dim();
    let pt = m_row.ncols();
    if m_row.nrows() != p || pt < p {
        return Err(Error::invalid(format!("restricted row must be {p} x p_tilde with p_tilde >= {p}")));
    }
    let lambda = build_lambda(s, beta, pt)?;
    let mut t = DMatrix::zeros(pt + p, pt);
    t.view_mut((0, 0), (pt, pt)).fill_with_identity();
    t.view_mut((pt, 0), (p, pt)).copy_from(m_row);
    Ok(lambda.congruence(&t).is_psd() && s.f.neg().is_psd())
}

/// Scalar diffusive certificate: `G = alpha/2`, `-1/(2 d') < F < 0`,
/// `H > 2 d' max(1 - alpha, 0)`, strict bounds with a `DELTA_STRICT` margin.
pub fn diffusive_stability_cert(s: &SupplyRate, d_prime: f64, alpha: f64) -> bool {
    if s.output_dim() != 1 || s.input_dim() != 1 || !(d_prime > 0.0) {
        return false;
    }
    let (f, g, h) = (s.f.matrix()[(0, 0)], s.g[(0, 0)], s.h.matrix()[(0, 0)]);
    // Solver outputs satisfy the margins only up to the PSD tolerance.
    let slack = TOL_PSD;
    (g - 0.5 * alpha).abs() <= slack * alpha.abs().max(1.0)
        && f >= -1.0 / (2.0 * d_prime) + DELTA_STRICT - slack
        && f <= -DELTA_STRICT + slack
        && h >= 2.0 * d_prime * (1.0 - alpha).max(0.0) + DELTA_STRICT - slack
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

    fn unit_weights(topo: &Topology, a: f64) -> DiffusiveWeights {
        let mut w = DMatrix::zeros(topo.k(), topo.k());
        for (i, j) in topo.edges() {
            w[(i, j)] = a;
            w[(j, i)] = a;
        }
        DiffusiveWeights::new(w).unwrap()
    }

    #[test]
    fn topology_canonical_order() {
        let t = Topology::new(vec![vec![2, 1, 0], vec![0], vec![0]], vec![1, 1, 1]).unwrap();
        assert_eq!(t.neighbors(0), &[0, 1, 2]);
        assert_eq!(t.neighbors(2), &[2, 0]);
        assert_eq!(t.edges(), vec![(0, 1), (0, 2)]);
        assert!(Topology::new(vec![vec![1], vec![]], vec![1, 1]).is_err());
    }

    #[test]
    fn diffusive_examples() {
        let t2 = Topology::from_edges(2, &[(0, 1)]).unwrap();
        let m = diffusive_interconnection(&unit_weights(&t2, 2.0), &t2).unwrap();
        assert_eq!(m.matrix(), &dmatrix![-2.0, 2.0; 2.0, -2.0]);

        let t1 = Topology::from_edges(1, &[]).unwrap();
        let m = diffusive_interconnection(&DiffusiveWeights::new(DMatrix::zeros(1, 1)).unwrap(), &t1).unwrap();
        assert_eq!(m.matrix(), &dmatrix![0.0]);

        let t3 = Topology::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let m = diffusive_interconnection(&unit_weights(&t3, 1.0), &t3).unwrap();
        assert_eq!(m.matrix(), &dmatrix![-2.0, 1.0, 1.0; 1.0, -2.0, 1.0; 1.0, 1.0, -2.0]);
        assert_eq!(m.row_restriction(1), dmatrix![-2.0, 1.0, 1.0]);

        let vector = Topology::new(vec![vec![0]], vec![2]).unwrap();
        assert!(matches!(
            diffusive_interconnection(&DiffusiveWeights::new(DMatrix::zeros(1, 1)).unwrap(), &vector),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn interconnection_validation() {
        let t = Topology::from_edges(3, &[(0, 1)]).unwrap();
        assert!(InterconnectionMatrix::new(dmatrix![0.0, 1.0, 0.0; 1.0, 0.0, 0.0; 0.0, 0.0, 0.0], t.clone()).is_ok());
        assert!(InterconnectionMatrix::new(dmatrix![0.0, 1.0, 1.0; 1.0, 0.0, 0.0; 1.0, 0.0, 0.0], t.clone()).is_err());
        assert!(InterconnectionMatrix::new(dmatrix![0.0, 1.0, 0.0; 2.0, 0.0, 0.0; 0.0, 0.0, 0.0], t).is_err());
    }

    fn scalar(a: f64, b1: f64) -> SubsystemModel {
        SubsystemModel::new(dmatrix![a], dmatrix![b1], dmatrix![0.0], dmatrix![0.0], dmatrix![0.0], dmatrix![0.0]).unwrap()
    }

    #[test]
    fn closed_loop_examples() {
        let t1 = Topology::from_edges(1, &[]).unwrap();
        let m0 = InterconnectionMatrix::new(dmatrix![0.0], t1).unwrap();
        let (acl, rho) = assemble_closed_loop(&[scalar(0.5, 1.0)], &[dmatrix![-0.5]], &m0).unwrap();
        assert_eq!(acl, dmatrix![0.0]);
        assert_eq!(rho, 0.0);

        let t2 = Topology::from_edges(2, &[]).unwrap();
        let m0 = InterconnectionMatrix::new(DMatrix::zeros(2, 2), t2).unwrap();
        let (_, rho) = assemble_closed_loop(&[scalar(0.9, 1.0), scalar(0.9, 1.0)], &[dmatrix![0.0], dmatrix![0.0]], &m0).unwrap();
        assert!((rho - 0.9).abs() < 1e-12);
        assert!(is_stable(rho));
        assert!(!is_stable(1.0));
    }

    #[test]
    fn closed_loop_with_coupling() {
        let t2 = Topology::from_edges(2, &[(0, 1)]).unwrap();
        let m = InterconnectionMatrix::new(dmatrix![-1.0, 1.0; 1.0, -1.0], t2).unwrap();
        let md = SubsystemModel::new(dmatrix![0.5], dmatrix![1.0], dmatrix![0.5], dmatrix![1.0], dmatrix![0.0], dmatrix![0.0]).unwrap();
        let (acl, _) = assemble_closed_loop(&[md.clone(), md], &[dmatrix![0.0], dmatrix![0.0]], &m).unwrap();
        assert_eq!(acl, dmatrix![0.0, 0.5; 0.5, 0.0]);

        // D2 M = I makes the algebraic loop singular.
        let t1 = Topology::from_edges(1, &[]).unwrap();
        let mi = InterconnectionMatrix::new(dmatrix![1.0], t1).unwrap();
        let bad = SubsystemModel::new(dmatrix![0.5], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], dmatrix![0.0], dmatrix![1.0]).unwrap();
        assert!(matches!(assemble_closed_loop(&[bad], &[dmatrix![0.0]], &mi), Err(Error::IllPosed)));
    }

    #[test]
    fn global_cert_examples() {
        let t3 = Topology::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let passive = vec![triple(0.0, 0.5, 0.0); 3];
        let m = InterconnectionMatrix::new(dmatrix![-3.0, 1.0, 1.0; 1.0, -3.0, 1.0; 1.0, 1.0, -3.0], t3.clone()).unwrap();
        assert!(global_stability_cert(&passive, &m).unwrap());
        let zero = InterconnectionMatrix::new(DMatrix::zeros(3, 3), t3).unwrap();
        assert!(!global_stability_cert(&passive, &zero).unwrap());

        let t1 = Topology::from_edges(1, &[]).unwrap();
        let mi = InterconnectionMatrix::new(dmatrix![1.0], t1.clone()).unwrap();
        assert!(global_stability_cert(&[triple(-1.0, 0.0, 2.0)], &mi).unwrap());
        assert!(matches!(
            global_stability_cert(&[triple(0.0, 0.0, 1.0)], &mi),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn local_cert_examples() {
        assert!(local_stability_cert(&triple(-1.0, 0.0, 2.0), &dmatrix![0.0], 1.0).unwrap());
        assert!(!local_stability_cert(&triple(-1.0, 0.0, 0.5), &dmatrix![0.0], 1.0).unwrap());
        assert!(local_stability_cert(&triple(-1.0, 0.0, 2.0), &dmatrix![0.0, 1.0], 1.0).is_ok());
        assert!(local_stability_cert(&triple(-1.0, 0.0, 2.0), &dmatrix![0.0; 1.0], 1.0).is_err());
    }

    #[test]
    fn diffusive_cert_examples() {
        assert!(diffusive_stability_cert(&triple(-0.1, 0.5, 0.01), 2.0, 1.0));
        assert!(!diffusive_stability_cert(&triple(-0.3, 0.5, 0.01), 2.0, 1.0));
        assert!(diffusive_stability_cert(&triple(-0.4, 0.0, 3.0), 1.0, 0.0));
        assert!(!diffusive_stability_cert(&triple(-0.4, 0.0, 1.5), 1.0, 0.0));
    }

    #[test]
    fn laplacian_structure() {
        let t = Topology::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]).unwrap();
        let m = diffusive_interconnection(&unit_weights(&t, 0.7), &t).unwrap();
        let mm = m.matrix();
        for i in 0..5 {
            assert!(mm.row(i).sum().abs() < 1e-15);
            assert!(mm[(i, i)] <= 0.0);
        }
        let ev = SymMatrix::new(mm.clone()).unwrap().eigenvalues();
        assert!(ev.iter().all(|v| *v <= 1e-12));
    }
}
