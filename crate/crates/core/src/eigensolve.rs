//! Lowest eigenpairs of the pencil `K x = λ M x` and multiplicity clustering.

use faer::linalg::solvers::SolveCore;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, Mat, MatMut, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fem::{dot, faer_sequential, FemError, SparseSymMatrix, SpdFactor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EigenError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("eigensolver did not converge: {0}")]
    ConvergenceFailure(String),
    #[error("shift {0} coincides with an eigenvalue")]
    ShiftHitsEigenvalue(f64),
    #[error(transparent)]
    Fem(#[from] FemError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    pub eigenvalues: Vec<f64>,
    /// M-orthonormal vectors in the index space of the pencil.
    pub eigenvectors: Vec<Vec<f64>>,
    /// `‖K x − λ M x‖` in a lumped-mass `M⁻¹` norm.
    pub residuals: Vec<f64>,
    pub clusters: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct EigenOptions {
    pub seed: u64,
    /// Relative residual target: `‖r‖ ≤ tol·λ`.
    pub tol: f64,
    pub block_size: usize,
    pub max_basis: usize,
    pub max_restarts: usize,
    pub cluster_rtol: f64,
    /// Pencils below this dimension are solved densely.
    pub dense_threshold: usize,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            seed: 0x5117,
            tol: 1e-10,
            block_size: 3,
            max_basis: 240,
            max_restarts: 20,
            cluster_rtol: 1e-6,
            dense_threshold: 2000,
        }
    }
}

pub fn solve_lowest(
    k: &SparseSymMatrix,
    m: &SparseSymMatrix,
    count: usize,
    shift: f64,
) -> Result<EigenResult, EigenError> {
    solve_lowest_with(k, m, count, shift, &EigenOptions::default())
}

pub fn solve_lowest_with(
    k: &SparseSymMatrix,
    m: &SparseSymMatrix,
    count: usize,
    shift: f64,
    opts: &EigenOptions,
) -> Result<EigenResult, EigenError> {
    let n = k.dim();
    if m.dim() != n {
        return Err(EigenError::InvalidRequest(format!("pencil dimensions {} and {}", n, m.dim())));
    }
    if count == 0 || count > n {
        return Err(EigenError::InvalidRequest(format!(
            "requested {count} eigenpairs of a pencil of dimension {n}"
        )));
    }
    if !shift.is_finite() {
        return Err(EigenError::InvalidRequest("non-finite shift".into()));
    }
    let (values, vectors) = if n < opts.dense_threshold {
        dense_pencil(k, m, count)?
    } else {
        krylov(k, m, count, shift, opts)?
    };
    Ok(finish(k, m, values, vectors, opts.cluster_rtol))
}

fn finish(
    k: &SparseSymMatrix,
    m: &SparseSymMatrix,
    values: Vec<f64>,
    mut vectors: Vec<Vec<f64>>,
    cluster_rtol: f64,
) -> EigenResult {
    let lumped = m.row_sums();
    let mut residuals = Vec::with_capacity(values.len());
    for (lam, x) in values.iter().zip(vectors.iter_mut()) {
        canonical_sign(x);
        residuals.push(residual_norm(k, m, &lumped, *lam, x));
    }
    let clusters = cluster(&values, cluster_rtol);
    EigenResult { eigenvalues: values, eigenvectors: vectors, residuals, clusters }
}

/// Makes the entry of largest magnitude positive.
fn canonical_sign(x: &mut [f64]) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &v in x.iter() {
        if v.abs() > best * (1.0 + 1e-9) {
            best = v.abs();
            sign = v.signum();
        }
    }
    if sign < 0.0 {
        x.iter_mut().for_each(|v| *v = -*v);
    }
}

fn residual_norm(k: &SparseSymMatrix, m: &SparseSymMatrix, lumped: &[f64], lam: f64, x: &[f64]) -> f64 {
    let kx = k.mul_vec(x);
    let mx = m.mul_vec(x);
    kx.iter()
        .zip(&mx)
        .zip(lumped)
        .map(|((a, b), l)| {
            let r = a - lam * b;
            r * r / l
        })
        .sum::<f64>()
        .sqrt()
}

/// Greedy grouping of ascending values: neighbours join when their gap is at
/// most `rel_tol·max(1, |value|)`.
pub fn cluster(values: &[f64], rel_tol: f64) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        match out.last_mut() {
            Some(c) if v - values[i - 1] <= rel_tol * v.abs().max(1.0) => c.push(i),
            _ => out.push(vec![i]),
        }
    }
    out
}

/// Eigen-decomposition of a small dense symmetric matrix, ascending.
pub fn symmetric_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    faer_sequential();
    let n = a.len();
    if n == 0 {
        return (vec![], vec![]);
    }
    let mat = Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (a[i][j] + a[j][i]));
    let evd = mat.self_adjoint_eigen(Side::Lower).expect("symmetric eigendecomposition");
    let s = evd.S().column_vector();
    let u = evd.U();
    let values = (0..n).map(|i| s[i]).collect();
    let vectors = (0..n).map(|c| (0..n).map(|r| u[(r, c)]).collect()).collect();
    (values, vectors)
}

fn dense_pencil(
    k: &SparseSymMatrix,
    m: &SparseSymMatrix,
    count: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), EigenError> {
    faer_sequential();
    let n = k.dim();
    let kd = k.to_dense();
    let md = m.to_dense();
    let mm = Mat::<f64>::from_fn(n, n, |i, j| md[i][j]);
    let llt = mm
        .llt(Side::Lower)
        .map_err(|e| FemError::NotPositiveDefinite(format!("mass matrix: {e:?}")))?;
    let l = llt.L().to_owned();
    // C = L⁻¹ K L⁻ᵀ
    let mut c = Mat::<f64>::from_fn(n, n, |i, j| kd[i][j]);
    l.solve_lower_triangular_in_place(c.as_mut());
    let mut ct = c.transpose().to_owned();
    l.solve_lower_triangular_in_place(ct.as_mut());
    let sym: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| ct[(i, j)]).collect()).collect();
    let (vals, vecs) = symmetric_eigen(&sym);
    let lt = l.transpose().to_owned();
    let mut values = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count);
    for i in 0..count {
        let mut y = Mat::<f64>::from_fn(n, 1, |r, _| vecs[i][r]);
        lt.solve_upper_triangular_in_place(y.as_mut());
        let mut x: Vec<f64> = (0..n).map(|r| y[(r, 0)]).collect();
        let nrm = dot(&x, &m.mul_vec(&x)).sqrt();
        x.iter_mut().for_each(|v| *v /= nrm);
        values.push(vals[i]);
        vectors.push(x);
    }
    Ok((values, vectors))
}

enum ShiftedFactor {
    Spd(SpdFactor),
    Lu(faer::sparse::linalg::solvers::Lu<usize, f64>),
}

struct ShiftInvert {
    factor: ShiftedFactor,
    shifted: SparseSymMatrix,
    m: SparseSymMatrix,
}

impl ShiftInvert {
    fn new(k: &SparseSymMatrix, m: &SparseSymMatrix, sigma: f64) -> Option<Self> {
        faer_sequential();
        let shifted = k.linear_combination(1.0, m, -sigma);
        let factor = match SpdFactor::new(&shifted) {
            Ok(f) => ShiftedFactor::Spd(f),
            Err(_) => {
                let n = shifted.dim();
                let mut t = Vec::with_capacity(2 * shifted.nnz());
                for (i, j, v) in shifted.upper_entries() {
                    t.push(Triplet::new(i, j, v));
                    if i != j {
                        t.push(Triplet::new(j, i, v));
                    }
                }
                let full = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &t).ok()?;
                ShiftedFactor::Lu(full.sp_lu().ok()?)
            }
        };
        let op = ShiftInvert { factor, shifted, m: m.clone() };
        // Probe for numerical singularity with a deterministic vector.
        let n = op.m.dim();
        let b: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.618_033_988_7).fract() - 0.5).collect();
        let x = op.solve(&b)?;
        let ax = op.shifted.mul_vec(&x);
        let r: f64 = b.iter().zip(&ax).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let xn = crate::fem::norm(&x);
        let bn = crate::fem::norm(&b);
        (r <= 1e-8 * bn && xn.is_finite() && xn < 1e14 * bn).then_some(op)
    }

    fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        match &self.factor {
            ShiftedFactor::Spd(f) => f.solve(b).ok(),
            ShiftedFactor::Lu(lu) => {
                let mut x = b.to_vec();
                let n = x.len();
                lu.solve_in_place_with_conj(Conj::No, MatMut::from_column_major_slice_mut(&mut x, n, 1));
                x.iter().all(|v| v.is_finite()).then_some(x)
            }
        }
    }

    /// `(K − σM)⁻¹ M x`
    fn apply(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.solve(&self.m.mul_vec(x))
    }
}

/// M-orthogonalizes `w` against `basis` (two passes) and normalizes it.
/// Returns `None` when `w` is numerically inside the span.
fn m_orthonormalize(m: &SparseSymMatrix, basis: &[Vec<f64>], mut w: Vec<f64>) -> Option<Vec<f64>> {
    let n0 = dot(&w, &m.mul_vec(&w)).sqrt();
    if !(n0 > 0.0) || !n0.is_finite() {
        return None;
    }
    for _ in 0..2 {
        let mw = m.mul_vec(&w);
        for q in basis {
            let c = dot(q, &mw);
            w.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
        }
    }
    let nrm = dot(&w, &m.mul_vec(&w)).sqrt();
    if nrm <= 1e-10 * n0 {
        return None;
    }
    w.iter_mut().for_each(|v| *v /= nrm);
    Some(w)
}

fn krylov(
    k: &SparseSymMatrix,
    m: &SparseSymMatrix,
    count: usize,
    shift: f64,
    opts: &EigenOptions,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), EigenError> {
    let n = k.dim();
    let mut sigma = shift;
    let mut op = None;
    for attempt in 0..4 {
        if let Some(o) = ShiftInvert::new(k, m, sigma) {
            op = Some(o);
            break;
        }
        sigma = shift + (attempt as f64 + 1.0) * 1e-3 * shift.abs().max(1.0);
    }
    let op = op.ok_or(EigenError::ShiftHitsEigenvalue(shift))?;
    let lumped = m.row_sums();
    let b = opts.block_size.max(1);
    let max_basis = opts.max_basis.max(count + 2 * b + 10).min(n);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    // Projected stiffness H = Qᵀ K Q, grown one column at a time.
    let mut h: Vec<Vec<f64>> = Vec::new();
    let mut block: Vec<Vec<f64>> = Vec::new();
    let push = |q: &mut Vec<Vec<f64>>, h: &mut Vec<Vec<f64>>, v: Vec<f64>| {
        let kv = k.mul_vec(&v);
        let col: Vec<f64> = q.iter().map(|qi| dot(qi, &kv)).collect();
        for (row, c) in h.iter_mut().zip(&col) {
            row.push(*c);
        }
        let mut new_row = col;
        new_row.push(dot(&v, &kv));
        h.push(new_row);
        q.push(v);
    };
    while block.len() < b {
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let v = op.apply(&v).ok_or(EigenError::ShiftHitsEigenvalue(sigma))?;
        if let Some(v) = m_orthonormalize(m, &q, v) {
            push(&mut q, &mut h, v.clone());
            block.push(v);
        }
    }

    let mut restarts = 0;
    loop {
        // Expand until the basis is full or a Rayleigh-Ritz check converges.
        let mut since_check = 0;
        let mut converged = None;
        loop {
            let mut next = Vec::with_capacity(b);
            for v in &block {
                if q.len() >= max_basis {
                    break;
                }
                let w = op.apply(v).ok_or(EigenError::ShiftHitsEigenvalue(sigma))?;
                match m_orthonormalize(m, &q, w) {
                    Some(w) => {
                        push(&mut q, &mut h, w.clone());
                        next.push(w);
                    }
                    None => {
                        // Deflated direction: replace by a fresh random one.
                        let r: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
                        if let Some(w) = m_orthonormalize(m, &q, r) {
                            push(&mut q, &mut h, w.clone());
                            next.push(w);
                        }
                    }
                }
            }
            since_check += 1;
            let full = q.len() >= max_basis || next.is_empty();
            if (q.len() >= count + b && since_check >= 2) || full {
                since_check = 0;
                let ritz = rayleigh_ritz(k, m, &lumped, &q, &h, count);
                if ritz.iter().all(|r| r.2 <= opts.tol * r.0.abs().max(1e-300)) {
                    converged = Some(ritz);
                    break;
                }
                if full {
                    break;
                }
            }
            block = next;
        }
        if let Some(ritz) = converged {
            return Ok(ritz.into_iter().map(|(l, x, _)| (l, x)).unzip());
        }
        restarts += 1;
        if restarts > opts.max_restarts || q.len() == n {
            let ritz = rayleigh_ritz(k, m, &lumped, &q, &h, count);
            let worst = ritz.iter().map(|r| r.2 / r.0.abs().max(1e-300)).fold(0.0, f64::max);
            return Err(EigenError::ConvergenceFailure(format!(
                "relative residual {worst:.3e} after {restarts} restarts"
            )));
        }
        // Thick restart: keep the wanted Ritz vectors plus a few extra.
        let keep = (count + b).min(q.len());
        let ritz = rayleigh_ritz(k, m, &lumped, &q, &h, keep);
        q.clear();
        h.clear();
        let mut worst: Vec<(f64, Vec<f64>)> = Vec::new();
        for (lam, x, res) in ritz {
            if let Some(x) = m_orthonormalize(m, &q, x) {
                push(&mut q, &mut h, x.clone());
                worst.push((res / lam.abs().max(1e-300), x));
            }
        }
        worst.sort_by(|a, b| b.0.total_cmp(&a.0));
        block = worst.into_iter().take(b).map(|w| w.1).collect();
    }
}

/// Ritz pairs `(λ, x, residual)` of the `count` smallest Ritz values.
fn rayleigh_ritz(
    k: &SparseSymMatrix,
    m: &SparseSymMatrix,
    lumped: &[f64],
    q: &[Vec<f64>],
    h: &[Vec<f64>],
    count: usize,
) -> Vec<(f64, Vec<f64>, f64)> {
    let (vals, vecs) = symmetric_eigen(h);
    let n = q[0].len();
    (0..count.min(vals.len()))
        .map(|i| {
            let mut x = vec![0.0; n];
            for (c, qj) in vecs[i].iter().zip(q) {
                x.iter_mut().zip(qj).for_each(|(a, b)| *a += c * b);
            }
            let nrm = dot(&x, &m.mul_vec(&x)).sqrt();
            x.iter_mut().for_each(|v| *v /= nrm);
            let lam = dot(&x, &k.mul_vec(&x));
            let res = residual_norm(k, m, lumped, lam, &x);
            (lam, x, res)
        })
        .collect()
}

/// Gram matrix `XᵀMX` of a set of vectors.
pub fn m_gram(m: &SparseSymMatrix, vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mv: Vec<Vec<f64>> = vectors.iter().map(|v| m.mul_vec(v)).collect();
    vectors.iter().map(|a| mv.iter().map(|b| dot(a, b)).collect()).collect()
}
