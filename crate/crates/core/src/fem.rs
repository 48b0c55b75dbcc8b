//! Piecewise-linear finite elements: assembly, Dirichlet elimination and SPD solves.

use std::fmt::Write as _;

use faer::linalg::solvers::SolveCore;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, MatMut, Side};
use thiserror::Error;

use crate::geometry::Mesh;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("degenerate triangle {index} with area {area:.3e}")]
    DegenerateTriangle { index: usize, area: f64 },
    #[error("node index {index} out of range for {n} nodes")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("node {0} is constrained twice")]
    OverlappingConstraints(usize),
    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Smallest admissible element area.
pub const MIN_TRIANGLE_AREA: f64 = 1e-14;

/// Symmetric sparse matrix storing the upper triangle (including the diagonal)
/// in compressed rows with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSymMatrix {
    /// Builds from `(row, col, value)` entries; either triangle may be given,
    /// duplicates are summed.
    pub fn from_triplets(n: usize, entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut t: Vec<(usize, usize, f64)> =
            entries.into_iter().map(|(i, j, v)| (i.min(j), i.max(j), v)).collect();
        t.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(t.len());
        let mut vals: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in t {
            assert!(j < n, "entry ({i}, {j}) outside a {n}x{n} matrix");
            if last == Some((i, j)) {
                *vals.last_mut().expect("merged entry") += v;
            } else {
                cols.push(j);
                vals.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseSymMatrix { n, row_ptr, cols, vals }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, (0..n).map(|i| (i, i, 1.0)))
    }

    pub fn from_dense(a: &[Vec<f64>]) -> Self {
        let n = a.len();
        Self::from_triplets(
            n,
            (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).filter_map(|(i, j)| {
                (a[i][j] != 0.0).then_some((i, j, a[i][j]))
            }),
        )
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored (upper-triangle) entries.
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Stored upper-triangle entries `(row, col, value)` with `row <= col`.
    pub fn upper_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.cols[k], self.vals[k]))
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = (i.min(j), i.max(j));
        let row = &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]];
        match row.binary_search(&c) {
            Ok(k) => self.vals[self.row_ptr[r] + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[k];
                let v = self.vals[k];
                acc += v * x[j];
                if j != i {
                    y[j] += v * x[i];
                }
            }
            y[i] += acc;
        }
        y
    }

    /// `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let ay = self.mul_vec(y);
        x.iter().zip(&ay).map(|(a, b)| a * b).sum()
    }

    /// Row sums of the full symmetric matrix.
    pub fn row_sums(&self) -> Vec<f64> {
        self.mul_vec(&vec![1.0; self.n])
    }

    /// Sum of all entries of the full symmetric matrix.
    pub fn total_sum(&self) -> f64 {
        self.row_sums().iter().sum()
    }

    /// `a * self + b * other`.
    pub fn linear_combination(&self, a: f64, other: &SparseSymMatrix, b: f64) -> SparseSymMatrix {
        assert_eq!(self.n, other.n);
        Self::from_triplets(
            self.n,
            self.upper_entries()
                .map(|(i, j, v)| (i, j, a * v))
                .chain(other.upper_entries().map(|(i, j, v)| (i, j, b * v))),
        )
    }

    /// Principal submatrix on the rows/columns mapped by `keep`.
    pub fn restrict(&self, keep: &[Option<usize>], n_kept: usize) -> SparseSymMatrix {
        Self::from_triplets(
            n_kept,
            self.upper_entries().filter_map(|(i, j, v)| match (keep[i], keep[j]) {
                (Some(a), Some(b)) => Some((a, b, v)),
                _ => None,
            }),
        )
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; self.n]; self.n];
        for (i, j, v) in self.upper_entries() {
            a[i][j] = v;
            a[j][i] = v;
        }
        a
    }

    /// Coordinate text: `n nnz` header then `row col value` per stored entry.
    pub fn to_coordinate_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.n, self.nnz());
        for (i, j, v) in self.upper_entries() {
            let _ = writeln!(s, "{i} {j} {v:.16e}");
        }
        s
    }

    fn to_faer_upper(&self) -> SparseColMat<usize, f64> {
        // Upper triangle in row-major order is the lower triangle column-major;
        // hand faer the transpose-free upper view (row <= col).
        let triplets: Vec<Triplet<usize, usize, f64>> =
            self.upper_entries().map(|(i, j, v)| Triplet::new(i, j, v)).collect();
        SparseColMat::try_new_from_triplets(self.n, self.n, &triplets)
            .expect("valid sparse pattern")
    }
}

/// Assembles the P1 stiffness and consistent mass matrices.
pub fn assemble(mesh: &Mesh) -> Result<(SparseSymMatrix, SparseSymMatrix), FemError> {
    let n = mesh.num_nodes();
    let mut k = Vec::with_capacity(6 * mesh.triangles.len());
    let mut m = Vec::with_capacity(6 * mesh.triangles.len());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let p = tri.map(|i| mesh.vertices[i]);
        let (ke, me) = element_matrices(p);
        let area = mesh.signed_area(t);
        if area < MIN_TRIANGLE_AREA {
            return Err(FemError::DegenerateTriangle { index: t, area });
        }
        for a in 0..3 {
            for b in a..3 {
                k.push((tri[a], tri[b], ke[a][b]));
                m.push((tri[a], tri[b], me[a][b]));
            }
        }
    }
    Ok((SparseSymMatrix::from_triplets(n, k), SparseSymMatrix::from_triplets(n, m)))
}

/// Element stiffness and mass of a counterclockwise triangle.
pub fn element_matrices(p: [[f64; 2]; 3]) -> ([[f64; 3]; 3], [[f64; 3]; 3]) {
    let area = crate::geometry::triangle_signed_area(p[0], p[1], p[2]);
    let b = [p[1][1] - p[2][1], p[2][1] - p[0][1], p[0][1] - p[1][1]];
    let c = [p[2][0] - p[1][0], p[0][0] - p[2][0], p[1][0] - p[0][0]];
    let mut ke = [[0.0; 3]; 3];
    let mut me = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            ke[i][j] = (b[i] * b[j] + c[i] * c[j]) / (4.0 * area);
            me[i][j] = area / 12.0 * if i == j { 2.0 } else { 1.0 };
        }
    }
    (ke, me)
}

/// Map between full node indices and the unknowns left after elimination.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    reduced: Vec<Option<usize>>,
    free: Vec<usize>,
    prescribed: Vec<(usize, f64)>,
}

impl DofMap {
    pub fn new(n: usize, zero_nodes: &[usize], valued_nodes: &[(usize, f64)]) -> Result<Self, FemError> {
        let mut value: Vec<Option<f64>> = vec![None; n];
        let all = zero_nodes.iter().map(|&i| (i, 0.0)).chain(valued_nodes.iter().copied());
        for (i, v) in all {
            if i >= n {
                return Err(FemError::IndexOutOfRange { index: i, n });
            }
            if value[i].is_some() {
                return Err(FemError::OverlappingConstraints(i));
            }
            value[i] = Some(v);
        }
        let mut reduced = vec![None; n];
        let mut free = Vec::new();
        let mut prescribed = Vec::new();
        for i in 0..n {
            match value[i] {
                None => {
                    reduced[i] = Some(free.len());
                    free.push(i);
                }
                Some(v) => prescribed.push((i, v)),
            }
        }
        Ok(DofMap { reduced, free, prescribed })
    }

    pub fn n_full(&self) -> usize {
        self.reduced.len()
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free
    }

    pub fn prescribed(&self) -> &[(usize, f64)] {
        &self.prescribed
    }

    pub fn reduced_index(&self, node: usize) -> Option<usize> {
        self.reduced[node]
    }

    /// Full nodal vector from reduced unknowns plus prescribed values.
    pub fn extend(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.free.len());
        let mut full = vec![0.0; self.reduced.len()];
        for (k, &i) in self.free.iter().enumerate() {
            full[i] = x[k];
        }
        for &(i, v) in &self.prescribed {
            full[i] = v;
        }
        full
    }

    /// Extension by zero on constrained nodes (for eigenvectors).
    pub fn extend_homogeneous(&self, x: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.reduced.len()];
        for (k, &i) in self.free.iter().enumerate() {
            full[i] = x[k];
        }
        full
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| full[i]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub stiffness: SparseSymMatrix,
    pub mass: SparseSymMatrix,
    /// `-K_fc g`: coupling of the prescribed values into the free equations.
    pub load: Vec<f64>,
    pub dofmap: DofMap,
}

/// Eliminates constrained nodes: `zero_nodes` get 0, `valued_nodes` their value.
pub fn constrain(
    stiffness: &SparseSymMatrix,
    mass: &SparseSymMatrix,
    zero_nodes: &[usize],
    valued_nodes: &[(usize, f64)],
) -> Result<ReducedSystem, FemError> {
    let n = stiffness.dim();
    if mass.dim() != n {
        return Err(FemError::DimensionMismatch { expected: n, got: mass.dim() });
    }
    let dofmap = DofMap::new(n, zero_nodes, valued_nodes)?;
    let nf = dofmap.n_free();
    let k = stiffness.restrict(&dofmap.reduced, nf);
    let m = mass.restrict(&dofmap.reduced, nf);
    let mut g = vec![0.0; n];
    for &(i, v) in &dofmap.prescribed {
        g[i] = v;
    }
    let mut load = vec![0.0; nf];
    for (i, j, v) in stiffness.upper_entries() {
        match (dofmap.reduced[i], dofmap.reduced[j]) {
            (Some(a), None) => load[a] -= v * g[j],
            (None, Some(b)) => load[b] -= v * g[i],
            _ => {}
        }
    }
    Ok(ReducedSystem { stiffness: k, mass: m, load, dofmap })
}

/// Sparse Cholesky factorization of a symmetric positive definite matrix.
///
/// Immutable once built; solves take `&self` and may run concurrently.
pub struct SpdFactor {
    matrix: SparseSymMatrix,
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
}

impl std::fmt::Debug for SpdFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpdFactor").field("dim", &self.matrix.dim()).finish()
    }
}

/// Keeps faer single-threaded so results do not depend on the thread pool.
pub(crate) fn faer_sequential() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

/// Relative residual guaranteed by [`SpdFactor::solve`].
pub const SOLVE_RTOL: f64 = 1e-10;

impl SpdFactor {
    pub fn new(matrix: &SparseSymMatrix) -> Result<Self, FemError> {
        faer_sequential();
        if matrix.dim() == 0 {
            return Err(FemError::NotPositiveDefinite("empty matrix".into()));
        }
        let llt = matrix
            .to_faer_upper()
            .sp_cholesky(Side::Upper)
            .map_err(|e| FemError::NotPositiveDefinite(format!("{e:?}")))?;
        Ok(SpdFactor { matrix: matrix.clone(), llt })
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    fn raw_solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        let n = x.len();
        self.llt.solve_in_place_with_conj(Conj::No, MatMut::from_column_major_slice_mut(&mut x, n, 1));
        x
    }

    /// Solves `A x = b` with iterative refinement until the relative residual
    /// is at most [`SOLVE_RTOL`].
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, FemError> {
        let n = self.dim();
        if rhs.len() != n {
            return Err(FemError::DimensionMismatch { expected: n, got: rhs.len() });
        }
        let bnorm = norm(rhs);
        if bnorm == 0.0 {
            return Ok(vec![0.0; n]);
        }
        let mut x = self.raw_solve(rhs);
        for _ in 0..3 {
            let ax = self.matrix.mul_vec(&x);
            let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let rel = norm(&r) / bnorm;
            if !rel.is_finite() {
                break;
            }
            if rel <= SOLVE_RTOL * 1e-2 {
                return Ok(x);
            }
            let dx = self.raw_solve(&r);
            for (xi, d) in x.iter_mut().zip(dx) {
                *xi += d;
            }
        }
        let ax = self.matrix.mul_vec(&x);
        let rel = norm(&rhs.iter().zip(&ax).map(|(b, a)| b - a).collect::<Vec<_>>()) / bnorm;
        if rel.is_finite() && rel <= SOLVE_RTOL {
            Ok(x)
        } else {
            Err(FemError::NotPositiveDefinite(format!("relative residual {rel:.3e} after refinement")))
        }
    }
}

pub fn solve_spd(matrix: &SparseSymMatrix, rhs: &[f64]) -> Result<Vec<f64>, FemError> {
    SpdFactor::new(matrix)?.solve(rhs)
}

/// Discrete Dirichlet bilinear form `x^T K y`.
pub fn energy(stiffness: &SparseSymMatrix, x: &[f64], y: &[f64]) -> Result<f64, FemError> {
    let n = stiffness.dim();
    for v in [x, y] {
        if v.len() != n {
            return Err(FemError::DimensionMismatch { expected: n, got: v.len() });
        }
    }
    Ok(stiffness.bilinear(x, y))
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_mesh, DomainSpec, MeshParams};
    use std::f64::consts::PI;

    #[test]
    fn reference_triangle_element_matrices() {
        let (ke, me) = element_matrices([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let k_expected = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((ke[i][j] - k_expected[i][j]).abs() < 1e-15);
                let m_expected = 0.5 / 12.0 * if i == j { 2.0 } else { 1.0 };
                assert!((me[i][j] - m_expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn assembled_square_sums() {
        let mesh = generate_mesh(&DomainSpec::rectangle(PI, PI), None, &MeshParams::new(0.2)).unwrap();
        let (k, m) = assemble(&mesh).unwrap();
        assert!(k.row_sums().iter().all(|s| s.abs() < 1e-12));
        assert!((m.total_sum() - PI * PI).abs() < 1e-10);
        let ones = vec![1.0; k.dim()];
        assert!(energy(&k, &ones, &ones).unwrap().abs() < 1e-12);
    }

    #[test]
    fn degenerate_triangle_rejected() {
        let mesh = Mesh {
            vertices: vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
            triangles: vec![[0, 1, 2]],
            boundary_nodes: vec![],
            slit_nodes: vec![],
            tip_nodes: vec![],
            h_max: 1.0,
            h_tip: 0.0,
        };
        assert!(matches!(assemble(&mesh), Err(FemError::DegenerateTriangle { .. })));
    }

    #[test]
    fn path_graph_midpoint() {
        // 1D Laplacian on three nodes with the ends fixed at 0 and 1.
        let k = SparseSymMatrix::from_triplets(
            3,
            [(0, 0, 1.0), (0, 1, -1.0), (1, 1, 2.0), (1, 2, -1.0), (2, 2, 1.0)],
        );
        let m = SparseSymMatrix::identity(3);
        let sys = constrain(&k, &m, &[0], &[(2, 1.0)]).unwrap();
        let x = solve_spd(&sys.stiffness, &sys.load).unwrap();
        let full = sys.dofmap.extend(&x);
        assert!((full[1] - 0.5).abs() < 1e-15);
        assert_eq!(full[2], 1.0);
    }

    #[test]
    fn zero_valued_nodes_match_zero_nodes() {
        let mesh = generate_mesh(&DomainSpec::rectangle(1.0, 1.0), None, &MeshParams::new(0.25)).unwrap();
        let (k, m) = assemble(&mesh).unwrap();
        let valued: Vec<(usize, f64)> = mesh.boundary_nodes.iter().map(|&i| (i, 0.0)).collect();
        let a = constrain(&k, &m, &mesh.boundary_nodes, &[]).unwrap();
        let b = constrain(&k, &m, &[], &valued).unwrap();
        assert_eq!(a.stiffness, b.stiffness);
        assert_eq!(a.mass, b.mass);
        assert!(b.load.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constrain_errors() {
        let k = SparseSymMatrix::identity(3);
        assert!(matches!(
            constrain(&k, &k, &[5], &[]),
            Err(FemError::IndexOutOfRange { index: 5, n: 3 })
        ));
        assert!(matches!(
            constrain(&k, &k, &[1], &[(1, 2.0)]),
            Err(FemError::OverlappingConstraints(1))
        ));
    }

    #[test]
    fn solve_small_systems() {
        let id = SparseSymMatrix::identity(4);
        let b = vec![1.0, -2.0, 3.0, 0.5];
        assert_eq!(solve_spd(&id, &b).unwrap(), b);
        let a = SparseSymMatrix::from_dense(&[vec![2.0, -1.0], vec![-1.0, 2.0]]);
        let x = solve_spd(&a, &[1.0, 1.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
        let singular = SparseSymMatrix::from_dense(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert!(matches!(solve_spd(&singular, &[1.0, 0.0]), Err(FemError::NotPositiveDefinite(_))));
        let indefinite = SparseSymMatrix::from_dense(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(solve_spd(&indefinite, &[1.0, 0.0]), Err(FemError::NotPositiveDefinite(_))));
    }

    #[test]
    fn energy_of_linear_field() {
        let mesh = generate_mesh(&DomainSpec::rectangle(PI, PI), None, &MeshParams::new(0.05)).unwrap();
        let (k, _) = assemble(&mesh).unwrap();
        let x: Vec<f64> = mesh.vertices.iter().map(|p| p[0]).collect();
        let e = energy(&k, &x, &x).unwrap();
        assert!((e - PI * PI).abs() / (PI * PI) < 0.02);
        assert!(matches!(energy(&k, &x[1..], &x), Err(FemError::DimensionMismatch { .. })));
    }

    #[test]
    fn patch_test_reproduces_linear_field() {
        let mesh = generate_mesh(&DomainSpec::rectangle(2.0, 1.0), None, &MeshParams::new(0.15)).unwrap();
        let (k, m) = assemble(&mesh).unwrap();
        let valued: Vec<(usize, f64)> =
            mesh.boundary_nodes.iter().map(|&i| (i, mesh.vertices[i][0])).collect();
        let sys = constrain(&k, &m, &[], &valued).unwrap();
        let x = solve_spd(&sys.stiffness, &sys.load).unwrap();
        let full = sys.dofmap.extend(&x);
        for (v, p) in full.iter().zip(&mesh.vertices) {
            assert!((v - p[0]).abs() < 1e-11);
        }
    }

    #[test]
    fn coordinate_export_header() {
        let a = SparseSymMatrix::from_dense(&[vec![2.0, -1.0], vec![-1.0, 2.0]]);
        let text = a.to_coordinate_text();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("2 3"));
        assert_eq!(lines.count(), 3);
    }
}
