//! Capacitary potentials of the slit and the capacity functionals built on them.

use thiserror::Error;

use crate::eigensolve::{m_gram, symmetric_eigen};
use crate::fem::{assemble, dot, energy, DofMap, FemError, SparseSymMatrix, SpdFactor};
use crate::geometry::{Mesh, Point};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CapacityError {
    #[error("mesh has no slit nodes")]
    EmptySlit,
    #[error("expected {expected} values, got {got}")]
    DataLength { expected: usize, got: usize },
    #[error("potentials come from different meshes ({0} vs {1} nodes)")]
    MeshMismatch(usize, usize),
    #[error("eigenbasis is not M-orthonormal (deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("capacity is zero")]
    ZeroCapacity,
    #[error(transparent)]
    Fem(#[from] FemError),
}

/// Minimizer of the Dirichlet energy with prescribed slit values and zero
/// boundary values.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacityResult {
    pub potential: Vec<f64>,
    pub cap_value: f64,
    pub potential_l2_sq: f64,
}

/// Shares one factorization of the free-node stiffness among all slit data.
pub struct CapacitySolver {
    stiffness: SparseSymMatrix,
    mass: SparseSymMatrix,
    slit_nodes: Vec<usize>,
    dofmap: DofMap,
    factor: SpdFactor,
    /// `(free index, slit index, K entry)` couplings.
    coupling: Vec<(usize, usize, f64)>,
}

impl std::fmt::Debug for CapacitySolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CapacitySolver")
            .field("nodes", &self.stiffness.dim())
            .field("slit_nodes", &self.slit_nodes.len())
            .finish()
    }
}

impl CapacitySolver {
    pub fn new(mesh: &Mesh) -> Result<Self, CapacityError> {
        let (k, m) = assemble(mesh)?;
        Self::with_matrices(mesh, k, m)
    }

    /// Reuses already assembled full stiffness and mass matrices of `mesh`.
    pub fn with_matrices(mesh: &Mesh, stiffness: SparseSymMatrix, mass: SparseSymMatrix) -> Result<Self, CapacityError> {
        if mesh.slit_nodes.is_empty() {
            return Err(CapacityError::EmptySlit);
        }
        let n = mesh.num_nodes();
        if stiffness.dim() != n || mass.dim() != n {
            return Err(CapacityError::MeshMismatch(n, stiffness.dim()));
        }
        let valued: Vec<(usize, f64)> = mesh.slit_nodes.iter().map(|&i| (i, 0.0)).collect();
        let dofmap = DofMap::new(n, &mesh.boundary_nodes, &valued)?;
        let mut keep = vec![None; n];
        for (r, &i) in dofmap.free_nodes().iter().enumerate() {
            keep[i] = Some(r);
        }
        let kff = stiffness.restrict(&keep, dofmap.n_free());
        let factor = SpdFactor::new(&kff)?;
        let mut slit_index = vec![None; n];
        for (s, &i) in mesh.slit_nodes.iter().enumerate() {
            slit_index[i] = Some(s);
        }
        let mut coupling = Vec::new();
        for (i, j, v) in stiffness.upper_entries() {
            match (keep[i], slit_index[j], keep[j], slit_index[i]) {
                (Some(a), Some(s), _, _) => coupling.push((a, s, v)),
                (_, _, Some(a), Some(s)) => coupling.push((a, s, v)),
                _ => {}
            }
        }
        Ok(CapacitySolver { stiffness, mass, slit_nodes: mesh.slit_nodes.clone(), dofmap, factor, coupling })
    }

    pub fn stiffness(&self) -> &SparseSymMatrix {
        &self.stiffness
    }

    pub fn mass(&self) -> &SparseSymMatrix {
        &self.mass
    }

    pub fn slit_nodes(&self) -> &[usize] {
        &self.slit_nodes
    }

    /// Potential for `values[i]` prescribed at `slit_nodes()[i]`.
    pub fn solve(&self, values: &[f64]) -> Result<CapacityResult, CapacityError> {
        if values.len() != self.slit_nodes.len() {
            return Err(CapacityError::DataLength { expected: self.slit_nodes.len(), got: values.len() });
        }
        let mut load = vec![0.0; self.dofmap.n_free()];
        for &(a, s, v) in &self.coupling {
            load[a] -= v * values[s];
        }
        let x = self.factor.solve(&load)?;
        let mut potential = self.dofmap.extend_homogeneous(&x);
        for (&i, &v) in self.slit_nodes.iter().zip(values) {
            potential[i] = v;
        }
        let cap_value = energy(&self.stiffness, &potential, &potential)?.max(0.0);
        let potential_l2_sq = self.mass.bilinear(&potential, &potential);
        Ok(CapacityResult { potential, cap_value, potential_l2_sq })
    }

    /// Potential for the trace of a full nodal vector on the slit.
    pub fn solve_trace(&self, nodal: &[f64]) -> Result<CapacityResult, CapacityError> {
        if nodal.len() != self.stiffness.dim() {
            return Err(CapacityError::DataLength { expected: self.stiffness.dim(), got: nodal.len() });
        }
        let values: Vec<f64> = self.slit_nodes.iter().map(|&i| nodal[i]).collect();
        self.solve(&values)
    }

    /// Potential for a function sampled at the slit node positions.
    pub fn solve_fn(&self, mesh: &Mesh, f: impl Fn(Point) -> f64) -> Result<CapacityResult, CapacityError> {
        let values: Vec<f64> = self.slit_nodes.iter().map(|&i| f(mesh.vertices[i])).collect();
        self.solve(&values)
    }

    /// `r_ε` on the span of an M-orthonormal family of full nodal vectors.
    pub fn perturbation_form(&self, basis: &[Vec<f64>], lambda: f64) -> Result<PerturbationForm, CapacityError> {
        let g = m_gram(&self.mass, basis);
        let mut dev = 0.0f64;
        for (i, row) in g.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                dev = dev.max((v - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        if dev > 1e-6 {
            return Err(CapacityError::NotOrthonormal(dev));
        }
        let pots = basis.iter().map(|u| self.solve_trace(u)).collect::<Result<Vec<_>, _>>()?;
        let m = basis.len();
        let mut caps = vec![vec![0.0; m]; m];
        let mut matrix = vec![vec![0.0; m]; m];
        let mv: Vec<Vec<f64>> = pots.iter().map(|p| self.mass.mul_vec(&p.potential)).collect();
        for i in 0..m {
            for j in i..m {
                let c = mutual_capacity(&self.stiffness, &pots[i], &pots[j])?;
                let l2 = dot(&pots[i].potential, &mv[j]);
                caps[i][j] = c;
                caps[j][i] = c;
                matrix[i][j] = c - lambda * l2;
                matrix[j][i] = matrix[i][j];
            }
        }
        let (mu, _) = symmetric_eigen(&matrix);
        let (cap_eigs, _) = symmetric_eigen(&caps);
        let chi_sq = cap_eigs.last().copied().unwrap_or(0.0).max(0.0);
        Ok(PerturbationForm { dimension: m, matrix, capacity_gram: caps, mu, chi_sq, potentials: pots })
    }
}

/// `V ≡ data` on the slit, `V = 0` on the boundary, discrete-harmonic elsewhere.
pub fn potential(mesh: &Mesh, boundary_data: &[f64]) -> Result<CapacityResult, CapacityError> {
    CapacitySolver::new(mesh)?.solve(boundary_data)
}

/// `Cap(s_ε, u, v) = ∫ ∇V_u · ∇V_v`.
pub fn mutual_capacity(
    stiffness: &SparseSymMatrix,
    a: &CapacityResult,
    b: &CapacityResult,
) -> Result<f64, CapacityError> {
    if a.potential.len() != b.potential.len() {
        return Err(CapacityError::MeshMismatch(a.potential.len(), b.potential.len()));
    }
    if a.potential.len() != stiffness.dim() {
        return Err(CapacityError::MeshMismatch(stiffness.dim(), a.potential.len()));
    }
    Ok(energy(stiffness, &a.potential, &b.potential)?)
}

/// `r_ε(u_i, u_j) = Cap(s_ε, u_i, u_j) − λ ∫ V_i V_j` on an eigenspace basis.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationForm {
    pub dimension: usize,
    pub matrix: Vec<Vec<f64>>,
    /// Mutual-capacity Gram matrix.
    pub capacity_gram: Vec<Vec<f64>>,
    /// Eigenvalues of `matrix`, ascending.
    pub mu: Vec<f64>,
    /// Largest eigenvalue of `capacity_gram`.
    pub chi_sq: f64,
    pub potentials: Vec<CapacityResult>,
}

pub fn perturbation_form(
    mesh: &Mesh,
    mass: &SparseSymMatrix,
    eigenbasis: &[Vec<f64>],
    lambda: f64,
) -> Result<PerturbationForm, CapacityError> {
    let (k, _) = assemble(mesh)?;
    CapacitySolver::with_matrices(mesh, k, mass.clone())?.perturbation_form(eigenbasis, lambda)
}

/// `∫ V² / Cap`.
pub fn potential_l2_ratio(result: &CapacityResult) -> Result<f64, CapacityError> {
    if !(result.cap_value > 0.0) {
        return Err(CapacityError::ZeroCapacity);
    }
    Ok(result.potential_l2_sq / result.cap_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asymptotics::{kappa1, taylor_truncate, TaylorTable, XVanishing};
    use crate::geometry::{generate_mesh, DomainSpec, MeshParams, SlitSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn setup(eps: f64, h: f64) -> (Mesh, CapacitySolver) {
        let slit = SlitSpec::new([PI / 2.0, PI / 2.0], eps, 0.0);
        let mesh = generate_mesh(&DomainSpec::rectangle(PI, PI), Some(&slit), &MeshParams::new(h)).unwrap();
        let solver = CapacitySolver::new(&mesh).unwrap();
        (mesh, solver)
    }

    #[test]
    fn zero_data_gives_zero_potential() {
        let (_, s) = setup(0.2, 0.2);
        let r = s.solve(&vec![0.0; s.slit_nodes().len()]).unwrap();
        assert!(r.potential.iter().all(|&v| v == 0.0));
        assert_eq!(r.cap_value, 0.0);
        assert!(matches!(potential_l2_ratio(&r), Err(CapacityError::ZeroCapacity)));
    }

    #[test]
    fn potential_invariants() {
        let (mesh, s) = setup(0.2, 0.2);
        let r = s.solve(&vec![1.0; s.slit_nodes().len()]).unwrap();
        assert!(mesh.boundary_nodes.iter().all(|&i| r.potential[i] == 0.0));
        assert!(mesh.slit_nodes.iter().all(|&i| r.potential[i] == 1.0));
        assert!(r.cap_value > 0.0);
        let e = energy(s.stiffness(), &r.potential, &r.potential).unwrap();
        assert!((r.cap_value - e).abs() <= 1e-12 * e);
        // Discrete harmonicity at free nodes and the maximum principle.
        let kv = s.stiffness().mul_vec(&r.potential);
        let fixed: std::collections::HashSet<usize> =
            mesh.boundary_nodes.iter().chain(&mesh.slit_nodes).copied().collect();
        for (i, v) in kv.iter().enumerate() {
            if !fixed.contains(&i) {
                assert!(v.abs() < 1e-10);
            }
        }
        assert!(r.potential.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        assert!(potential_l2_ratio(&r).unwrap() > 0.0);
    }

    #[test]
    fn minimality_under_random_perturbations() {
        let (mesh, s) = setup(0.2, 0.2);
        let data: Vec<f64> = mesh.slit_nodes.iter().map(|&i| mesh.vertices[i][0].sin()).collect();
        let r = s.solve(&data).unwrap();
        let fixed: std::collections::HashSet<usize> =
            mesh.boundary_nodes.iter().chain(&mesh.slit_nodes).copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let mut v = r.potential.clone();
            for (i, x) in v.iter_mut().enumerate() {
                if !fixed.contains(&i) {
                    *x += 1e-3 * (rng.random::<f64>() - 0.5);
                }
            }
            let e = energy(s.stiffness(), &v, &v).unwrap();
            assert!(e >= r.cap_value - 1e-10);
        }
    }

    #[test]
    fn quadratic_form_and_mutual() {
        let (mesh, s) = setup(0.2, 0.25);
        let u = s.solve_fn(&mesh, |p| p[0] - PI / 2.0 + 0.3).unwrap();
        let u3 = s.solve_fn(&mesh, |p| 3.0 * (p[0] - PI / 2.0 + 0.3)).unwrap();
        assert!((u3.cap_value - 9.0 * u.cap_value).abs() <= 1e-12 * u3.cap_value);
        let zero = s.solve(&vec![0.0; mesh.slit_nodes.len()]).unwrap();
        assert_eq!(mutual_capacity(s.stiffness(), &u, &zero).unwrap(), 0.0);
        let self_mutual = mutual_capacity(s.stiffness(), &u, &u).unwrap();
        assert!((self_mutual - u.cap_value).abs() <= 1e-12 * u.cap_value);
        let other = CapacityResult { potential: vec![0.0; 3], cap_value: 0.0, potential_l2_sq: 0.0 };
        assert!(matches!(mutual_capacity(s.stiffness(), &u, &other), Err(CapacityError::MeshMismatch(..))));
    }

    #[test]
    fn empty_slit_rejected() {
        let mesh = generate_mesh(&DomainSpec::rectangle(1.0, 1.0), None, &MeshParams::new(0.3)).unwrap();
        assert!(matches!(CapacitySolver::new(&mesh), Err(CapacityError::EmptySlit)));
    }

    #[test]
    fn truncation_identity() {
        // u with κ₁ = 3 in the slit frame: the truncated polynomial of order
        // κ₁ − 1 vanishes on the slit, so the capacity is unchanged.
        let slit = SlitSpec::new([1.4, 1.7], 0.2, 0.4);
        let mesh = generate_mesh(&DomainSpec::rectangle(PI, PI), Some(&slit), &MeshParams::new(0.2)).unwrap();
        let s = CapacitySolver::new(&mesh).unwrap();
        let t = TaylorTable::from_fn(6, |h, j| match (h, j) {
            (3, 0) => 1.0,
            (0, 1) => 2.0,
            (1, 1) => -1.0,
            (0, 2) => 0.5,
            (4, 0) => 0.2,
            _ => 0.0,
        });
        assert_eq!(kappa1(&t), XVanishing::Finite(3));
        let trunc = taylor_truncate(&t, 2).unwrap();
        let local = |p: Point| {
            let q = slit.to_local(p);
            // slit nodes lie on the segment: x₂ = 0 exactly
            (q[0], 0.0)
        };
        let full = s.solve_fn(&mesh, |p| {
            let (a, b) = local(p);
            t.eval(a, b)
        })
        .unwrap();
        let diff = s
            .solve_fn(&mesh, |p| {
                let (a, b) = local(p);
                t.eval(a, b) - trunc.eval(a, b)
            })
            .unwrap();
        assert!((full.cap_value - diff.cap_value).abs() <= 1e-12 * full.cap_value);
    }

    #[test]
    fn perturbation_form_properties() {
        let (mesh, s) = setup(0.2, 0.2);
        let n = mesh.num_nodes();
        // Orthonormalize two smooth vanishing-on-boundary fields in M.
        let f1: Vec<f64> = mesh.vertices.iter().map(|p| p[0].sin() * p[1].sin()).collect();
        let f2: Vec<f64> = mesh.vertices.iter().map(|p| (2.0 * p[0]).sin() * p[1].sin()).collect();
        let m = s.mass();
        let n1 = dot(&f1, &m.mul_vec(&f1)).sqrt();
        let e1: Vec<f64> = f1.iter().map(|v| v / n1).collect();
        let c = dot(&e1, &m.mul_vec(&f2));
        let mut e2: Vec<f64> = f2.iter().zip(&e1).map(|(a, b)| a - c * b).collect();
        let n2 = dot(&e2, &m.mul_vec(&e2)).sqrt();
        e2.iter_mut().for_each(|v| *v /= n2);
        let form = s.perturbation_form(&[e1.clone(), e2.clone()], 5.0).unwrap();
        assert_eq!(form.dimension, 2);
        assert!((form.matrix[0][1] - form.matrix[1][0]).abs() < 1e-12);
        assert!(form.mu[0] <= form.mu[1]);
        let (g, _) = symmetric_eigen(&form.capacity_gram);
        assert!((form.chi_sq - g[1]).abs() <= 1e-12 * g[1]);
        // r ≤ Cap on the diagonal; Cauchy-Schwarz for the mutual capacity.
        for i in 0..2 {
            assert!(form.matrix[i][i] <= form.capacity_gram[i][i]);
        }
        let cg = &form.capacity_gram;
        assert!(cg[0][1].abs() <= (cg[0][0] * cg[1][1]).sqrt() + 1e-12);
        let scaled: Vec<f64> = e1.iter().map(|v| 2.0 * v).collect();
        assert!(matches!(s.perturbation_form(&[scaled], 5.0), Err(CapacityError::NotOrthonormal(_))));
        // Eigenfunction vanishing on the slit gives a zero form.
        let vanish: Vec<f64> = (0..n).map(|i| if mesh.slit_nodes.contains(&i) { 0.0 } else { e1[i] }).collect();
        let nv = dot(&vanish, &m.mul_vec(&vanish)).sqrt();
        let vanish: Vec<f64> = vanish.iter().map(|v| v / nv).collect();
        let zero = s.perturbation_form(&[vanish], 5.0).unwrap();
        assert_eq!(zero.matrix[0][0], 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn polarization(seed in 0u64..1000) {
            let (mesh, s) = setup(0.15, 0.3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ns = mesh.slit_nodes.len();
            let a: Vec<f64> = (0..ns).map(|_| rng.random::<f64>() - 0.5).collect();
            let b: Vec<f64> = (0..ns).map(|_| rng.random::<f64>() - 0.5).collect();
            let pa = s.solve(&a).unwrap();
            let pb = s.solve(&b).unwrap();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let polar = 0.25 * (s.solve(&sum).unwrap().cap_value - s.solve(&diff).unwrap().cap_value);
            let m = mutual_capacity(s.stiffness(), &pa, &pb).unwrap();
            let m2 = mutual_capacity(s.stiffness(), &pb, &pa).unwrap();
            prop_assert!((m - polar).abs() <= 1e-10 * (pa.cap_value + pb.cap_value));
            prop_assert!((m - m2).abs() <= 1e-14 * (pa.cap_value + pb.cap_value));
            prop_assert!(m.abs() <= (pa.cap_value * pb.cap_value).sqrt() * (1.0 + 1e-12) + 1e-12);
        }
    }
}
