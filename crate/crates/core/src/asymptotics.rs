//! Closed-form coefficients, nodal data at the slit center, the eigenspace
//! decomposition by x₁-vanishing order, and leading-order shift predictions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AsymptoticsError {
    #[error("eps = {0} outside (0, 1)")]
    EpsOutOfRange(f64),
    #[error("function vanishes to the probing order")]
    ZeroFunction,
    #[error("leading part of degree {k} is not harmonic (relative deviation {deviation:.3e})")]
    NonHarmonicLeading { k: usize, deviation: f64 },
    #[error("truncation order {m} exceeds table order {max}")]
    OrderTooHigh { m: usize, max: usize },
    #[error("inner-product matrix is not symmetric positive definite")]
    GramNotSpd,
    #[error("rank structure not resolved at x1-order {order}; raise the probing order")]
    ProbingOrderTooSmall { order: usize },
    #[error("slit is tangent to the nodal set (alpha = 0); use the tangency predictor")]
    TangentCase,
    #[error("tangency order l = {0} must be at least 2")]
    BadTangencyOrder(usize),
    #[error("basis function {index} has x1-vanishing order {found:?}, expected {expected:?}")]
    InconsistentBasis { index: usize, expected: XVanishing, found: XVanishing },
    #[error("tables and inner-product matrix do not match: {0}")]
    Mismatch(String),
}

/// Relative threshold below which Taylor coefficients count as zero.
pub const ZERO_RTOL: f64 = 1e-10;

/// Default probing order for the decomposition.
pub const DEFAULT_PROBING_ORDER: usize = 8;

fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

/// Scaled Taylor coefficients `d[h][j] = ∂₁^h ∂₂^j u(0) / (h! j!)`, `h + j ≤ M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorTable {
    max_order: usize,
    d: Vec<Vec<f64>>,
}

impl TaylorTable {
    pub fn zeros(max_order: usize) -> Self {
        TaylorTable { max_order, d: (0..=max_order).map(|h| vec![0.0; max_order - h + 1]).collect() }
    }

    pub fn from_fn(max_order: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(max_order);
        for h in 0..=max_order {
            for j in 0..=max_order - h {
                t.d[h][j] = f(h, j);
            }
        }
        t
    }

    /// Table of the monomial `c·x₁^h x₂^j`.
    pub fn monomial(max_order: usize, h: usize, j: usize, c: f64) -> Self {
        Self::from_fn(max_order, |a, b| if (a, b) == (h, j) { c } else { 0.0 })
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    /// Coefficient of `x₁^h x₂^j`; zero beyond the table order.
    pub fn get(&self, h: usize, j: usize) -> f64 {
        if h + j <= self.max_order {
            self.d[h][j]
        } else {
            0.0
        }
    }

    pub fn set(&mut self, h: usize, j: usize, v: f64) {
        assert!(h + j <= self.max_order, "({h},{j}) beyond order {}", self.max_order);
        self.d[h][j] = v;
    }

    /// Mixed partial derivative `∂₁^h ∂₂^j u(0)`.
    pub fn derivative(&self, h: usize, j: usize) -> f64 {
        self.get(h, j) * factorial(h) * factorial(j)
    }

    pub fn max_abs(&self) -> f64 {
        self.d.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.d.iter().flatten().all(|v| v.is_finite())
    }

    /// Coefficients `c_j` of the degree-`k` part `Σ c_j x₁^{k−j} x₂^j`.
    pub fn homogeneous(&self, k: usize) -> Vec<f64> {
        (0..=k).map(|j| self.get(k - j, j)).collect()
    }

    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        let mut s = 0.0;
        for h in (0..=self.max_order).rev() {
            let mut row = 0.0;
            for j in (0..=self.max_order - h).rev() {
                row = row * x2 + self.d[h][j];
            }
            s = s * x1 + row;
        }
        s
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::from_fn(self.max_order, |h, j| c * self.d[h][j])
    }

    pub fn add(&self, other: &TaylorTable) -> Self {
        let m = self.max_order.min(other.max_order);
        Self::from_fn(m, |h, j| self.d[h][j] + other.d[h][j])
    }

    /// `Σ cᵢ tᵢ` over tables of a common order.
    pub fn combination(tables: &[TaylorTable], coeffs: &[f64]) -> Self {
        let m = tables.iter().map(|t| t.max_order).min().unwrap_or(0);
        Self::from_fn(m, |h, j| tables.iter().zip(coeffs).map(|(t, c)| c * t.d[h][j]).sum())
    }

    /// Product truncated at the smaller of the two orders.
    pub fn mul(&self, other: &TaylorTable) -> Self {
        let m = self.max_order.min(other.max_order);
        let mut out = Self::zeros(m);
        for h1 in 0..=m {
            for j1 in 0..=m - h1 {
                let a = self.d[h1][j1];
                if a == 0.0 {
                    continue;
                }
                for h2 in 0..=m - h1 - j1 {
                    for j2 in 0..=m - h1 - j1 - h2 {
                        out.d[h1 + h2][j1 + j2] += a * other.d[h2][j2];
                    }
                }
            }
        }
        out
    }

    /// Table in a frame rotated by `theta`: the new `x₁` axis points along
    /// `(cos θ, sin θ)` of the current frame.
    pub fn rotated(&self, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let m = self.max_order;
        let mut out = Self::zeros(m);
        // X₁ = c x₁ − s x₂, X₂ = s x₁ + c x₂
        for h in 0..=m {
            for j in 0..=m - h {
                let v = self.d[h][j];
                if v == 0.0 {
                    continue;
                }
                for a in 0..=h {
                    // (c x₁ − s x₂)^h: choose a factors of x₂
                    let pa = binom(h, a) * c.powi((h - a) as i32) * (-s).powi(a as i32);
                    for b in 0..=j {
                        // (s x₁ + c x₂)^j: choose b factors of x₂
                        let pb = binom(j, b) * s.powi((j - b) as i32) * c.powi(b as i32);
                        out.d[(h - a) + (j - b)][a + b] += v * pa * pb;
                    }
                }
            }
        }
        out
    }

    /// Table of `p(x₁, x₂ − f(x₁))` for a univariate polynomial `f`.
    pub fn substitute_x2_shift(&self, f: &[f64]) -> Self {
        // f[i] = coefficient of x₁^i of the univariate polynomial f.
        let m = self.max_order;
        let mut shift = Self::zeros(m);
        shift.d[0][1] = 1.0;
        for (i, &fi) in f.iter().enumerate().take(m + 1) {
            shift.d[i][0] -= fi;
        }
        let mut out = Self::zeros(m);
        let mut x1_pow = Self::monomial(m, 0, 0, 1.0);
        for h in 0..=m {
            let mut shift_pow = Self::monomial(m, 0, 0, 1.0);
            for j in 0..=m - h {
                let v = self.d[h][j];
                if v != 0.0 {
                    out = out.add(&x1_pow.mul(&shift_pow).scaled(v));
                }
                shift_pow = shift_pow.mul(&shift);
            }
            x1_pow = x1_pow.mul(&Self::monomial(m, 1, 0, 1.0));
        }
        out
    }
}

/// `A_{j,k} = (1/π) ∫₀^{2π} cos^k η cos jη dη`.
pub fn a_coeff(j: usize, k: usize) -> f64 {
    if j > k || (k - j) % 2 != 0 {
        return 0.0;
    }
    2f64.powi(1 - k as i32) * binom(k, (k - j) / 2)
}

/// `C_k = Σ_{j=1}^k j A_{j,k}²`, with `C_0 = 2`.
pub fn c_coeff(k: usize) -> f64 {
    if k == 0 {
        return 2.0;
    }
    (1..=k).map(|j| j as f64 * a_coeff(j, k).powi(2)).sum()
}

/// `ρ_k(ε)`: `1/|log ε|` for `k = 0`, `ε^{2k}` otherwise.
pub fn rho_scale(k: usize, eps: f64) -> Result<f64, AsymptoticsError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(AsymptoticsError::EpsOutOfRange(eps));
    }
    Ok(if k == 0 { 1.0 / eps.ln().abs() } else { eps.powi(2 * k as i32) })
}

/// Vanishing order and the `β sin(α − kt)` description of the leading part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodalData {
    pub k: usize,
    pub beta: f64,
    pub alpha: f64,
}

impl NodalData {
    /// `r^{-k} u(r cos t, r sin t)` in the limit `r → 0`.
    pub fn angular_profile(&self, t: f64) -> f64 {
        self.beta * (self.alpha - self.k as f64 * t).sin()
    }
}

fn degree_threshold(t: &TaylorTable) -> f64 {
    ZERO_RTOL * t.max_abs()
}

pub fn nodal_params(t: &TaylorTable) -> Result<NodalData, AsymptoticsError> {
    let scale = t.max_abs();
    if !(scale > 0.0) {
        return Err(AsymptoticsError::ZeroFunction);
    }
    let thr = degree_threshold(t);
    let k = (0..=t.max_order())
        .find(|&k| t.homogeneous(k).iter().any(|c| c.abs() > thr))
        .ok_or(AsymptoticsError::ZeroFunction)?;
    if k == 0 {
        return Ok(NodalData { k: 0, beta: t.get(0, 0), alpha: PI / 2.0 });
    }
    let coeffs = t.homogeneous(k);
    let p = |th: f64| {
        let (s, c) = th.sin_cos();
        coeffs.iter().enumerate().map(|(j, cj)| cj * c.powi((k - j) as i32) * s.powi(j as i32)).sum::<f64>()
    };
    // Trapezoid rule is exact for trigonometric polynomials of degree < n.
    let n = 4 * k + 8;
    let (mut a, mut b, mut norm_sq) = (0.0, 0.0, 0.0);
    let samples: Vec<(f64, f64)> = (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).map(|th| (th, p(th))).collect();
    for &(th, v) in &samples {
        let kt = k as f64 * th;
        a += v * kt.cos();
        b += v * kt.sin();
        norm_sq += v * v;
    }
    a *= 2.0 / n as f64;
    b *= 2.0 / n as f64;
    let resid_sq: f64 = samples
        .iter()
        .map(|&(th, v)| {
            let kt = k as f64 * th;
            (v - a * kt.cos() - b * kt.sin()).powi(2)
        })
        .sum();
    let deviation = (resid_sq / norm_sq).sqrt();
    if deviation > 1e-8 {
        return Err(AsymptoticsError::NonHarmonicLeading { k, deviation });
    }
    // a = β sin α, b = −β cos α
    let mut beta = a.hypot(b);
    let mut alpha = a.atan2(-b);
    if alpha < 0.0 {
        alpha += PI;
        beta = -beta;
    }
    if alpha >= PI - 1e-15 {
        alpha = 0.0;
        beta = -beta;
    }
    if alpha.sin().abs() < 1e-12 {
        alpha = 0.0;
    }
    Ok(NodalData { k, beta, alpha })
}

/// Order of x₁-vanishing at the slit center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum XVanishing {
    Finite(usize),
    /// All pure-x₁ coefficients vanish up to the given probing order.
    Beyond(usize),
}

impl XVanishing {
    pub fn finite(self) -> Option<usize> {
        match self {
            XVanishing::Finite(k) => Some(k),
            XVanishing::Beyond(_) => None,
        }
    }
}

impl std::fmt::Display for XVanishing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            XVanishing::Finite(k) => write!(f, "{k}"),
            XVanishing::Beyond(m) => write!(f, ">{m}"),
        }
    }
}

pub fn kappa1(t: &TaylorTable) -> XVanishing {
    let thr = degree_threshold(t);
    match (0..=t.max_order()).find(|&h| t.get(h, 0).abs() > thr && t.get(h, 0) != 0.0) {
        Some(h) => XVanishing::Finite(h),
        None => XVanishing::Beyond(t.max_order()),
    }
}

/// Taylor polynomial `u_{#,m}` of order `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedTaylor {
    table: TaylorTable,
}

impl TruncatedTaylor {
    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        self.table.eval(x1, x2)
    }

    pub fn table(&self) -> &TaylorTable {
        &self.table
    }
}

pub fn taylor_truncate(t: &TaylorTable, m: usize) -> Result<TruncatedTaylor, AsymptoticsError> {
    if m > t.max_order() {
        return Err(AsymptoticsError::OrderTooHigh { m, max: t.max_order() });
    }
    Ok(TruncatedTaylor { table: TaylorTable::from_fn(m, |h, j| t.get(h, j)) })
}

/// `E(λ) = E_∞ ⊕ E_1 ⊕ ⋯ ⊕ E_p` expressed as coefficient vectors over the input basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub probing_order: usize,
    /// `k_1 > k_2 > ⋯ > k_p`.
    pub orders: Vec<usize>,
    /// Basis of `E_∞` (x₁-vanishing beyond the probing order).
    pub infinite: Vec<Vec<f64>>,
    /// One vector per entry of `orders`, spanning `E_j`.
    pub finite: Vec<Vec<f64>>,
}

impl DecompositionResult {
    /// Output basis ordered as `E_∞` first, then `E_1, …, E_p`.
    pub fn basis(&self) -> Vec<Vec<f64>> {
        self.infinite.iter().chain(&self.finite).cloned().collect()
    }

    /// x₁-vanishing order of each output basis function, in `basis()` order.
    pub fn kappa(&self) -> Vec<XVanishing> {
        std::iter::repeat_n(XVanishing::Beyond(self.probing_order), self.infinite.len())
            .chain(self.orders.iter().map(|&k| XVanishing::Finite(k)))
            .collect()
    }

    /// Tables of the output basis functions.
    pub fn tables(&self, input: &[TaylorTable]) -> Vec<TaylorTable> {
        self.basis().iter().map(|c| TaylorTable::combination(input, c)).collect()
    }

    pub fn p(&self) -> usize {
        self.orders.len()
    }
}

fn cholesky(g: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = g.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = g[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if !(s > 1e-12 * g[i][i].abs()) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormal basis of the complement of unit vector `w` in `R^d`: the
/// trailing columns of the Householder reflection mapping `w` to `±e₁`.
fn complement(w: &[f64]) -> Vec<Vec<f64>> {
    let d = w.len();
    let sign = if w[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut v = w.to_vec();
    v[0] += sign;
    let vv = dotv(&v, &v);
    (1..d)
        .map(|c| (0..d).map(|r| f64::from(u8::from(r == c)) - 2.0 * v[r] * v[c] / vv).collect())
        .collect()
}

/// Splits the span of the input functions by x₁-vanishing order.
///
/// `gram[i][j]` is the inner product of input functions `i` and `j`.
pub fn decompose(tables: &[TaylorTable], gram: &[Vec<f64>]) -> Result<DecompositionResult, AsymptoticsError> {
    let m = tables.len();
    if m == 0 || gram.len() != m || gram.iter().any(|r| r.len() != m) {
        return Err(AsymptoticsError::Mismatch(format!("{m} tables, {}x? inner-product matrix", gram.len())));
    }
    let order = tables[0].max_order();
    if tables.iter().any(|t| t.max_order() != order) {
        return Err(AsymptoticsError::Mismatch("tables of different orders".into()));
    }
    for i in 0..m {
        for j in 0..m {
            if (gram[i][j] - gram[j][i]).abs() > 1e-10 * (gram[i][i].abs() + gram[j][j].abs()) {
                return Err(AsymptoticsError::GramNotSpd);
            }
        }
    }
    let l = cholesky(gram).ok_or(AsymptoticsError::GramNotSpd)?;
    // Coordinates y with c = L⁻ᵀ y are Euclidean-orthonormal. Column h of the
    // constraint matrix in y coordinates is L⁻¹ P[:, h].
    let forward = |rhs: &[f64]| {
        let mut x = vec![0.0; m];
        for i in 0..m {
            x[i] = (rhs[i] - (0..i).map(|k| l[i][k] * x[k]).sum::<f64>()) / l[i][i];
        }
        x
    };
    let back = |rhs: &[f64]| {
        let mut x = vec![0.0; m];
        for i in (0..m).rev() {
            x[i] = (rhs[i] - (i + 1..m).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
        }
        x
    };
    let cols: Vec<Vec<f64>> =
        (0..=order).map(|h| forward(&tables.iter().map(|t| t.get(h, 0)).collect::<Vec<_>>())).collect();
    let scale = cols.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = ZERO_RTOL * scale;
    let ambiguous = 1e-7 * scale;

    let mut null: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let mut finite: Vec<(usize, Vec<f64>)> = Vec::new();
    for (h, col) in cols.iter().enumerate() {
        if null.is_empty() {
            break;
        }
        let w: Vec<f64> = null.iter().map(|q| dotv(q, col)).collect();
        let wn = dotv(&w, &w).sqrt();
        if wn > tol && wn < ambiguous {
            return Err(AsymptoticsError::ProbingOrderTooSmall { order: h });
        }
        if wn <= tol {
            continue;
        }
        let unit: Vec<f64> = w.iter().map(|x| x / wn).collect();
        let mut y = vec![0.0; m];
        for (c, q) in unit.iter().zip(&null) {
            y.iter_mut().zip(q).for_each(|(a, b)| *a += c * b);
        }
        let rest = complement(&unit);
        null = rest
            .iter()
            .map(|r| {
                let mut v = vec![0.0; m];
                for (c, q) in r.iter().zip(&null) {
                    v.iter_mut().zip(q).for_each(|(a, b)| *a += c * b);
                }
                v
            })
            .collect();
        finite.push((h, y));
    }
    let to_coeffs = |y: &[f64]| back(y);
    let pure_x1 = |c: &[f64], h: usize| tables.iter().zip(c).map(|(t, ci)| ci * t.get(h, 0)).sum::<f64>();
    let mut infinite: Vec<Vec<f64>> = null.iter().map(|y| to_coeffs(y)).collect();
    for c in &mut infinite {
        let lead = c.iter().copied().find(|v| v.abs() > 1e-12).unwrap_or(1.0);
        if lead < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
    }
    finite.reverse();
    let orders: Vec<usize> = finite.iter().map(|f| f.0).collect();
    let finite: Vec<Vec<f64>> = finite
        .iter()
        .map(|(h, y)| {
            let mut c = to_coeffs(y);
            if pure_x1(&c, *h) < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            c
        })
        .collect();
    Ok(DecompositionResult { probing_order: order, orders, infinite, finite })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScaleKind {
    /// `1/|log ε|`
    Log,
    /// `ε^exponent`
    Power { exponent: u32 },
    /// No shift to leading order.
    Unchanged,
}

impl ScaleKind {
    pub fn eval(&self, eps: f64) -> f64 {
        match self {
            ScaleKind::Log => 1.0 / eps.ln().abs(),
            ScaleKind::Power { exponent } => eps.powi(*exponent as i32),
            ScaleKind::Unchanged => 0.0,
        }
    }

    pub fn for_order(k: usize) -> Self {
        if k == 0 {
            ScaleKind::Log
        } else {
            ScaleKind::Power { exponent: 2 * k as u32 }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedShift {
    pub scale: ScaleKind,
    pub coefficient: f64,
    pub description: String,
}

impl PredictedShift {
    pub fn unchanged(description: &str) -> Self {
        PredictedShift { scale: ScaleKind::Unchanged, coefficient: 0.0, description: description.into() }
    }

    /// Leading-order shift at `eps`.
    pub fn eval(&self, eps: f64) -> f64 {
        self.coefficient * self.scale.eval(eps)
    }
}

/// Leading term of `Cap(s_ε, u)` from the Taylor table at the slit center.
pub fn predict_capacity(t: &TaylorTable) -> PredictedShift {
    match kappa1(t) {
        XVanishing::Beyond(_) => PredictedShift::unchanged("u vanishes on the segment to the probing order"),
        XVanishing::Finite(0) => PredictedShift {
            scale: ScaleKind::Log,
            coefficient: 2.0 * PI * t.get(0, 0).powi(2),
            description: "segment capacity, k = 0: 2 pi u(0)^2 / |log eps|".into(),
        },
        XVanishing::Finite(k) => PredictedShift {
            scale: ScaleKind::for_order(k),
            coefficient: PI * c_coeff(k) * t.get(k, 0).powi(2),
            description: format!("segment capacity, k = {k}: pi C_k c0^2 eps^{}", 2 * k),
        },
    }
}

/// Shift of a simple eigenvalue whose nodal set is transversal to the slit.
pub fn predict_simple(n: &NodalData) -> Result<PredictedShift, AsymptoticsError> {
    let amp = n.beta * n.alpha.sin();
    if n.k == 0 {
        return Ok(PredictedShift {
            scale: ScaleKind::Log,
            coefficient: 2.0 * PI * amp * amp,
            description: "simple eigenvalue, u(0) != 0".into(),
        });
    }
    if n.alpha == 0.0 {
        return Err(AsymptoticsError::TangentCase);
    }
    Ok(PredictedShift {
        scale: ScaleKind::for_order(n.k),
        coefficient: PI * amp * amp * c_coeff(n.k),
        description: format!("simple eigenvalue, transversal zero of order {}", n.k),
    })
}

/// Contact of the slit line with a nodal line: `f^{(s)}(0) = 0` for `s < l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TangencyData {
    /// `None` when the nodal line contains the slit line to all orders.
    pub l: Option<usize>,
    pub f_l: f64,
}

impl TangencyData {
    pub fn finite(l: usize, f_l: f64) -> Result<Self, AsymptoticsError> {
        if l < 2 {
            return Err(AsymptoticsError::BadTangencyOrder(l));
        }
        if f_l == 0.0 || !f_l.is_finite() {
            return Err(AsymptoticsError::Mismatch(format!("f^(l)(0) = {f_l} must be finite and nonzero")));
        }
        Ok(TangencyData { l: Some(l), f_l })
    }

    pub fn infinite() -> Self {
        TangencyData { l: None, f_l: 0.0 }
    }
}

/// Coefficient identity `∂₁^{k+l−1} u(0) = binom(k+l−1, k−1) β k! f^{(l)}(0)`.
pub fn tangency_derivative(k: usize, l: usize, beta: f64, f_l: f64) -> f64 {
    binom(k + l - 1, k - 1) * beta * factorial(k) * f_l
}

/// Tangency data read off the pure-x₁ coefficients when the nodal line through
/// the slit center is tangent to the slit (`alpha = 0`).
pub fn tangency_from_table(t: &TaylorTable, n: &NodalData) -> Result<TangencyData, AsymptoticsError> {
    if n.k == 0 || n.alpha != 0.0 {
        return Err(AsymptoticsError::Mismatch("tangency needs a zero of order k >= 1 with alpha = 0".into()));
    }
    match kappa1(t) {
        XVanishing::Beyond(_) => Ok(TangencyData::infinite()),
        XVanishing::Finite(q) if q <= n.k => {
            Err(AsymptoticsError::Mismatch(format!("x1-vanishing order {q} does not exceed k = {}", n.k)))
        }
        XVanishing::Finite(q) => {
            let raw = t.get(q, 0) * factorial(q);
            TangencyData::finite(q - n.k + 1, raw / (binom(q, n.k - 1) * n.beta * factorial(n.k)))
        }
    }
}

/// Shift when the slit is tangent to a nodal line, with the constant as stated
/// in the tangency theorem.
pub fn predict_tangent(n: &NodalData, tg: &TangencyData) -> Result<PredictedShift, AsymptoticsError> {
    let Some(l) = tg.l else {
        return Ok(PredictedShift::unchanged("lambda unchanged: slit lies on the nodal line"));
    };
    if l < 2 {
        return Err(AsymptoticsError::BadTangencyOrder(l));
    }
    if n.k == 0 {
        return Err(AsymptoticsError::Mismatch("tangency requires k >= 1".into()));
    }
    let q = n.k + l - 1;
    Ok(PredictedShift {
        scale: ScaleKind::for_order(q),
        coefficient: tangency_derivative(n.k, l, n.beta, tg.f_l).powi(2) * PI * c_coeff(q),
        description: format!("tangent nodal line, k = {}, l = {l}", n.k),
    })
}

/// The same tangency shift with the Taylor coefficient `∂₁^{q}u(0)/q!`
/// (`q = k+l−1`) in place of the raw derivative, matching `predict_capacity`.
pub fn predict_tangent_taylor(n: &NodalData, tg: &TangencyData) -> Result<PredictedShift, AsymptoticsError> {
    let mut p = predict_tangent(n, tg)?;
    if let Some(l) = tg.l {
        let q = n.k + l - 1;
        p.coefficient /= factorial(q).powi(2);
        p.description.push_str(" (Taylor-coefficient form)");
    }
    Ok(p)
}

/// Shifts of a multiple eigenvalue, ordered as `E_∞` block then `E_1, …, E_p`.
///
/// `tables` are the Taylor tables of the decomposition's output basis.
pub fn predict_multiple(
    dec: &DecompositionResult,
    tables: &[TaylorTable],
) -> Result<Vec<PredictedShift>, AsymptoticsError> {
    let kappa = dec.kappa();
    if tables.len() != kappa.len() {
        return Err(AsymptoticsError::Mismatch(format!("{} tables for {} basis functions", tables.len(), kappa.len())));
    }
    let mut out = Vec::with_capacity(tables.len());
    for (i, (t, expected)) in tables.iter().zip(&kappa).enumerate() {
        let found = kappa1(t);
        let consistent = match (expected, found) {
            (XVanishing::Beyond(_), XVanishing::Beyond(_)) => true,
            (XVanishing::Finite(a), XVanishing::Finite(b)) => *a == b,
            _ => false,
        };
        if !consistent {
            return Err(AsymptoticsError::InconsistentBasis { index: i, expected: *expected, found });
        }
        out.push(match expected {
            XVanishing::Beyond(_) => PredictedShift::unchanged("lambda unchanged: E_inf component"),
            XVanishing::Finite(k) => PredictedShift {
                scale: ScaleKind::for_order(*k),
                coefficient: PI * c_coeff(*k) * t.get(*k, 0).powi(2),
                description: format!("multiple eigenvalue branch with k = {k}"),
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Adaptive Gauss-Kronrod (7/15) quadrature.
    fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        const XK: [f64; 8] = [
            0.991455371120812639206854697526329,
            0.949107912342758524526189684047851,
            0.864864423359769072789712788640926,
            0.741531185599394439863864773280788,
            0.586087235467691130294144845693013,
            0.405845151377397166906606412076961,
            0.207784955007898467600689403773245,
            0.0,
        ];
        const WK: [f64; 8] = [
            0.022935322010529224963732008058970,
            0.063092092629978553290700663189204,
            0.104790010322250183839876322541518,
            0.140653259715525918745189590510238,
            0.169004726639267902826583426598550,
            0.190350578064785409913256402421014,
            0.204432940075298892414161999234649,
            0.209482141084727828012999174891714,
        ];
        const WG: [f64; 4] = [
            0.129484966168869693270611432679082,
            0.279705391489276667901467771423780,
            0.381830050505118944950369775488975,
            0.417959183673469387755102040816327,
        ];
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let mut k = WK[7] * f(c);
        let mut g = WG[3] * f(c);
        for i in 0..7 {
            let v = f(c - h * XK[i]) + f(c + h * XK[i]);
            k += WK[i] * v;
            if i % 2 == 1 {
                g += WG[i / 2] * v;
            }
        }
        let (k, g) = (k * h, g * h);
        if (k - g).abs() <= tol || depth == 0 {
            k
        } else {
            gk15(f, a, c, tol / 2.0, depth - 1) + gk15(f, c, b, tol / 2.0, depth - 1)
        }
    }

    fn a_quad(j: usize, k: usize) -> f64 {
        let f = move |e: f64| e.cos().powi(k as i32) * (j as f64 * e).cos();
        gk15(&f, 0.0, 2.0 * PI, 1e-15, 30) / PI
    }

    #[test]
    fn a_coeff_matches_quadrature() {
        for k in 0..=12 {
            for j in 0..=k {
                assert!((a_coeff(j, k) - a_quad(j, k)).abs() < 1e-12, "A_{{{j},{k}}}");
            }
        }
        assert_eq!(a_coeff(1, 1), 1.0);
        assert_eq!(a_coeff(2, 2), 0.5);
        assert_eq!(a_coeff(1, 2), 0.0);
        assert_eq!(a_coeff(1, 3), 0.75);
        assert_eq!(a_coeff(3, 3), 0.25);
        assert_eq!(a_coeff(4, 3), 0.0);
    }

    #[test]
    fn c_coeff_values() {
        assert_eq!(c_coeff(0), 2.0);
        assert_eq!(c_coeff(1), 1.0);
        assert_eq!(c_coeff(2), 0.5);
        assert_eq!(c_coeff(3), 0.75);
        for k in 1..=12 {
            let q: f64 = (1..=k).map(|j| j as f64 * a_quad(j, k).powi(2)).sum();
            assert!((c_coeff(k) - q).abs() < 1e-12);
        }
    }

    #[test]
    fn rho_scale_values() {
        assert!((rho_scale(0, (-1f64).exp()).unwrap() - 1.0).abs() < 1e-15);
        assert!((rho_scale(1, 0.1).unwrap() - 0.01).abs() < 1e-17);
        assert_eq!(rho_scale(3, 0.5).unwrap(), 2f64.powi(-6));
        assert!(matches!(rho_scale(1, 1.0), Err(AsymptoticsError::EpsOutOfRange(_))));
        assert!(matches!(rho_scale(1, 0.0), Err(AsymptoticsError::EpsOutOfRange(_))));
    }

    #[test]
    fn nodal_params_examples() {
        let x1 = TaylorTable::monomial(4, 1, 0, 1.0);
        let n = nodal_params(&x1).unwrap();
        assert_eq!(n.k, 1);
        assert!((n.alpha - PI / 2.0).abs() < 1e-14);
        assert!(((n.beta * n.alpha.sin()).powi(2) - 1.0).abs() < 1e-14);

        let x2 = TaylorTable::monomial(4, 0, 1, 1.0);
        let n = nodal_params(&x2).unwrap();
        assert_eq!((n.k, n.alpha), (1, 0.0));
        assert!((n.beta.abs() - 1.0).abs() < 1e-14);

        let c = TaylorTable::monomial(4, 0, 0, 3.5);
        let n = nodal_params(&c).unwrap();
        assert_eq!(n.k, 0);
        assert!((n.beta * n.alpha.sin() - 3.5).abs() < 1e-14);

        assert!(matches!(nodal_params(&TaylorTable::zeros(3)), Err(AsymptoticsError::ZeroFunction)));
        let x1sq = TaylorTable::monomial(4, 2, 0, 1.0);
        assert!(matches!(nodal_params(&x1sq), Err(AsymptoticsError::NonHarmonicLeading { k: 2, .. })));
    }

    #[test]
    fn nodal_params_reproduce_profile() {
        // Re z^3 and Im z^3 combinations.
        for &(a, b) in &[(1.0, 0.0), (0.3, -2.0), (-1.0, 0.5), (0.0, -1.0)] {
            let re = TaylorTable::from_fn(5, |h, j| match (h, j) {
                (3, 0) => 1.0,
                (1, 2) => -3.0,
                _ => 0.0,
            });
            let im = TaylorTable::from_fn(5, |h, j| match (h, j) {
                (2, 1) => 3.0,
                (0, 3) => -1.0,
                _ => 0.0,
            });
            let t = re.scaled(a).add(&im.scaled(b));
            let n = nodal_params(&t).unwrap();
            assert_eq!(n.k, 3);
            assert!((0.0..PI).contains(&n.alpha));
            for i in 0..10 {
                let th = i as f64 * 0.7;
                let (s, c) = th.sin_cos();
                assert!((t.eval(c, s) - n.angular_profile(th)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kappa1_examples() {
        let u = TaylorTable::from_fn(8, |h, j| if (h, j) == (2, 1) || (h, j) == (0, 1) { 1.0 } else { 0.0 });
        assert_eq!(kappa1(&u), XVanishing::Beyond(8));
        let u = TaylorTable::from_fn(8, |h, j| match (h, j) {
            (2, 0) => 3.0,
            (0, 1) => 1.0,
            _ => 0.0,
        });
        assert_eq!(kappa1(&u), XVanishing::Finite(2));
        assert_eq!(kappa1(&TaylorTable::monomial(8, 0, 0, 5.0)), XVanishing::Finite(0));
    }

    #[test]
    fn truncation_examples() {
        let sin = TaylorTable::from_fn(7, |h, j| match (h, j) {
            (1, 0) => 1.0,
            (3, 0) => -1.0 / 6.0,
            (5, 0) => 1.0 / 120.0,
            (7, 0) => -1.0 / 5040.0,
            _ => 0.0,
        });
        let p = taylor_truncate(&sin, 3).unwrap();
        for x in [-0.3, 0.1, 0.7] {
            assert!((p.eval(x, 0.2) - (x - x * x * x / 6.0)).abs() < 1e-12);
        }
        let c = taylor_truncate(&TaylorTable::monomial(4, 0, 0, 2.5).add(&sin.scaled(0.0).add(&TaylorTable::zeros(7))), 0).unwrap();
        assert_eq!(c.eval(0.4, -0.3), 2.5);
        let u = TaylorTable::from_fn(6, |h, j| match (h, j) {
            (2, 0) => 1.0,
            (0, 1) => 4.0,
            (1, 1) => -2.0,
            _ => 0.0,
        });
        let p = taylor_truncate(&u, 1).unwrap();
        assert_eq!(p.eval(0.37, 0.0), 0.0);
        assert!(matches!(taylor_truncate(&u, 7), Err(AsymptoticsError::OrderTooHigh { m: 7, max: 6 })));
    }

    #[test]
    fn rotation_composes_and_inverts() {
        let t = TaylorTable::from_fn(5, |h, j| ((h * 7 + j * 3) % 5) as f64 - 2.0);
        let r = t.rotated(0.4).rotated(0.9);
        let direct = t.rotated(1.3);
        let back = t.rotated(0.7).rotated(-0.7);
        for h in 0..=5 {
            for j in 0..=5 - h {
                assert!((r.get(h, j) - direct.get(h, j)).abs() < 1e-12);
                assert!((back.get(h, j) - t.get(h, j)).abs() < 1e-12);
            }
        }
        // Evaluating in the rotated frame equals evaluating at the rotated point.
        let (x1, x2) = (0.3, -0.2);
        let (s, c) = 0.4f64.sin_cos();
        assert!((t.rotated(0.4).eval(x1, x2) - t.eval(c * x1 - s * x2, s * x1 + c * x2)).abs() < 1e-13);
    }

    #[test]
    fn decompose_square_pair() {
        // Normalized square modes (1,2) and (2,1) around the center in the slit frame.
        let s = 2.0 / PI;
        let sin_taylor = |k: f64, phase: f64, m: usize| -> Vec<f64> {
            // Taylor coefficients of sin(k t + phase) at t = 0.
            (0..=m).map(|h| k.powi(h as i32) * (phase + h as f64 * PI / 2.0).sin() / factorial(h)).collect()
        };
        let m = 8;
        let table = |a: f64, b: f64| {
            let fx = sin_taylor(a, a * PI / 2.0, m);
            let fy = sin_taylor(b, b * PI / 2.0, m);
            TaylorTable::from_fn(m, |h, j| s * fx[h] * fy[j])
        };
        let u12 = table(1.0, 2.0);
        let u21 = table(2.0, 1.0);
        assert_eq!(kappa1(&u12), XVanishing::Beyond(8));
        let gram = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let dec = decompose(&[u12.clone(), u21.clone()], &gram).unwrap();
        assert_eq!(dec.orders, vec![1]);
        assert_eq!(dec.infinite.len(), 1);
        assert!((dec.infinite[0][0].abs() - 1.0).abs() < 1e-12 && dec.infinite[0][1].abs() < 1e-12);
        let tables = dec.tables(&[u12, u21]);
        let shifts = predict_multiple(&dec, &tables).unwrap();
        assert_eq!(shifts[0].coefficient, 0.0);
        assert!((shifts[1].coefficient - 16.0 / PI).abs() < 1e-12);
        assert_eq!(shifts[1].scale, ScaleKind::Power { exponent: 2 });
    }

    #[test]
    fn decompose_identical_rows() {
        let a = TaylorTable::from_fn(6, |h, j| match (h, j) {
            (1, 0) => 1.0,
            (0, 1) => 1.0,
            _ => 0.0,
        });
        let b = TaylorTable::from_fn(6, |h, j| match (h, j) {
            (1, 0) => 1.0,
            (0, 1) => -1.0,
            (1, 1) => 1.0,
            _ => 0.0,
        });
        let gram = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let dec = decompose(&[a, b], &gram).unwrap();
        assert_eq!(dec.orders, vec![1]);
        let inf = &dec.infinite[0];
        assert!((inf[0] + inf[1]).abs() < 1e-12);
    }

    #[test]
    fn decompose_single_and_errors() {
        let t = TaylorTable::monomial(8, 2, 0, -3.0).add(&TaylorTable::monomial(8, 0, 2, 3.0));
        let dec = decompose(std::slice::from_ref(&t), &[vec![4.0]]).unwrap();
        assert_eq!(dec.orders, vec![2]);
        assert!(dec.infinite.is_empty());
        // Sign convention makes the pure-x1 coefficient positive: d[2][0] = -3.
        assert!((dec.finite[0][0] + 0.5).abs() < 1e-14);
        assert!(matches!(decompose(&[t.clone()], &[vec![-1.0]]), Err(AsymptoticsError::GramNotSpd)));
        let tiny = TaylorTable::monomial(8, 0, 0, 1.0).add(&TaylorTable::monomial(8, 3, 0, 1e-8));
        let zero_x1 = TaylorTable::monomial(8, 0, 1, 1.0);
        let g = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            decompose(&[tiny, zero_x1.add(&TaylorTable::monomial(8, 2, 0, 1e-9))], &g),
            Err(AsymptoticsError::ProbingOrderTooSmall { .. })
        ));
    }

    #[test]
    fn decompose_three_orders_with_gram() {
        let t0 = TaylorTable::monomial(8, 0, 0, 1.0).add(&TaylorTable::monomial(8, 1, 0, 2.0));
        let t1 = TaylorTable::monomial(8, 1, 0, 1.0).add(&TaylorTable::monomial(8, 3, 0, 1.0));
        let t2 = TaylorTable::monomial(8, 3, 0, 1.0).add(&TaylorTable::monomial(8, 0, 1, 1.0));
        let gram = vec![vec![2.0, 0.3, 0.1], vec![0.3, 1.0, -0.2], vec![0.1, -0.2, 1.5]];
        let input = [t0, t1, t2];
        let dec = decompose(&input, &gram).unwrap();
        assert_eq!(dec.orders, vec![3, 1, 0]);
        let basis = dec.basis();
        for (i, a) in basis.iter().enumerate() {
            for (j, b) in basis.iter().enumerate() {
                let ip: f64 = (0..3).map(|p| (0..3).map(|q| a[p] * gram[p][q] * b[q]).sum::<f64>()).sum();
                assert!((ip - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
        let tables = dec.tables(&input);
        for (t, k) in tables.iter().zip(dec.kappa()) {
            assert_eq!(kappa1(t), k);
            assert!(t.get(k.finite().unwrap(), 0) > 0.0);
        }
        // Idempotence on the output basis.
        let again = decompose(&tables, &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(again.orders, dec.orders);
        for (i, v) in again.basis().iter().enumerate() {
            for (j, x) in v.iter().enumerate() {
                assert!((x.abs() - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn predictor_examples() {
        let one = TaylorTable::monomial(6, 0, 0, 1.0);
        let p = predict_capacity(&one);
        assert_eq!(p.scale, ScaleKind::Log);
        assert!((p.coefficient - 2.0 * PI).abs() < 1e-14);
        let p = predict_capacity(&TaylorTable::monomial(6, 1, 0, 1.0));
        assert_eq!(p.scale, ScaleKind::Power { exponent: 2 });
        assert!((p.coefficient - PI).abs() < 1e-14);
        assert_eq!(predict_capacity(&TaylorTable::monomial(6, 0, 1, 1.0)).coefficient, 0.0);

        let ground = NodalData { k: 0, beta: 2.0 / PI, alpha: PI / 2.0 };
        assert!((predict_simple(&ground).unwrap().coefficient - 8.0 / PI).abs() < 1e-14);
        let k1 = NodalData { k: 1, beta: 1.0, alpha: PI / 2.0 };
        assert!((predict_simple(&k1).unwrap().coefficient - PI).abs() < 1e-14);
        let tangent = NodalData { k: 1, beta: 1.0, alpha: 0.0 };
        assert!(matches!(predict_simple(&tangent), Err(AsymptoticsError::TangentCase)));

        let p = predict_tangent(&tangent, &TangencyData::infinite()).unwrap();
        assert_eq!((p.coefficient, p.scale), (0.0, ScaleKind::Unchanged));
        let n = NodalData { k: 1, beta: 1.7, alpha: 0.0 };
        let p = predict_tangent(&n, &TangencyData::finite(2, 0.6).unwrap()).unwrap();
        assert_eq!(p.scale, ScaleKind::Power { exponent: 4 });
        assert!((p.coefficient - PI * 1.7f64.powi(2) * 0.36 / 2.0).abs() < 1e-13);
        let n = NodalData { k: 2, beta: 1.0, alpha: 0.0 };
        let p = predict_tangent(&n, &TangencyData::finite(2, 1.0).unwrap()).unwrap();
        assert_eq!(p.scale, ScaleKind::Power { exponent: 6 });
        assert!((p.coefficient - 27.0 * PI).abs() < 1e-12);
        assert!(matches!(TangencyData::finite(1, 1.0), Err(AsymptoticsError::BadTangencyOrder(1))));
    }

    /// `u = −β (x₂ − f(x₁)) Q(x₁, x₂)` with `Im z^k = x₂ Q`, so `u(t, f(t)) ≡ 0`
    /// and the leading part is `β sin(−kθ) r^k`.
    fn tangent_pair(k: usize, l: usize, beta: f64, f_l: f64, m: usize) -> TaylorTable {
        // Im z^k = Σ_{odd j} binom(k, j) (−1)^{(j−1)/2} x₁^{k−j} x₂^j
        let q = TaylorTable::from_fn(m, |h, j| {
            let jj = j + 1;
            if h + jj == k && jj % 2 == 1 {
                let sign = if (jj - 1) / 2 % 2 == 0 { 1.0 } else { -1.0 };
                sign * binom(k, jj)
            } else {
                0.0
            }
        });
        let mut f = vec![0.0; m + 1];
        f[l] = f_l / factorial(l);
        if l + 1 <= m {
            f[l + 1] = 0.3;
        }
        let x2 = TaylorTable::monomial(m, 0, 1, 1.0);
        x2.substitute_x2_shift(&f).mul(&q).scaled(-beta)
    }

    #[test]
    fn tangency_chain_rule_identity() {
        for &(k, l) in &[(1, 2), (1, 3), (2, 2), (2, 3), (3, 2)] {
            let (beta, f_l) = (1.3, -0.8);
            let u = tangent_pair(k, l, beta, f_l, 10);
            let n = nodal_params(&u).unwrap();
            assert_eq!((n.k, n.alpha), (k, 0.0));
            assert!((n.beta.abs() - beta).abs() < 1e-12);
            assert_eq!(kappa1(&u), XVanishing::Finite(k + l - 1));
            let lhs = u.derivative(k + l - 1, 0);
            let rhs = tangency_derivative(k, l, beta, f_l);
            assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs(), "(k,l)=({k},{l}): {lhs} vs {rhs}");
        }
    }

    #[test]
    fn tangent_forms_relate_by_factorial() {
        let n = NodalData { k: 1, beta: 2.0, alpha: 0.0 };
        let tg = TangencyData::finite(2, 3.0).unwrap();
        let lit = predict_tangent(&n, &tg).unwrap();
        let tay = predict_tangent_taylor(&n, &tg).unwrap();
        assert!((lit.coefficient / tay.coefficient - 4.0).abs() < 1e-14);
        // The Taylor form agrees with the capacity predictor on the constructed pair.
        let u = tangent_pair(1, 2, 2.0, 3.0, 8);
        assert!((predict_capacity(&u).coefficient - tay.coefficient).abs() < 1e-12 * tay.coefficient);
    }

    proptest! {
        #[test]
        fn scaling_covariance(c in prop_oneof![-5.0..-0.1f64, 0.1..5.0f64]) {
            let t0 = TaylorTable::monomial(8, 0, 0, 1.0).add(&TaylorTable::monomial(8, 2, 0, 0.5));
            let t1 = TaylorTable::monomial(8, 1, 0, 1.0).add(&TaylorTable::monomial(8, 0, 1, -0.5));
            let gram = vec![vec![1.0, 0.2], vec![0.2, 1.0]];
            let base = decompose(&[t0.clone(), t1.clone()], &gram).unwrap();
            let scaled_gram = vec![vec![1.0, 0.2 * c], vec![0.2 * c, c * c]];
            let scaled = decompose(&[t0.clone(), t1.scaled(c)], &scaled_gram).unwrap();
            prop_assert_eq!(&base.orders, &scaled.orders);
            let bt = base.tables(&[t0.clone(), t1.clone()]);
            let st = scaled.tables(&[t0, t1.scaled(c)]);
            for (a, b) in bt.iter().zip(&st) {
                for h in 0..=8 {
                    for j in 0..=8 - h {
                        prop_assert!((a.get(h, j) - b.get(h, j)).abs() < 1e-9);
                    }
                }
            }
            let p = predict_capacity(&TaylorTable::monomial(8, 1, 0, 0.7));
            let q = predict_capacity(&TaylorTable::monomial(8, 1, 0, 0.7 * c));
            prop_assert!((q.coefficient - c * c * p.coefficient).abs() < 1e-12 * q.coefficient);
        }

        #[test]
        fn nodal_and_capacity_predictors_agree(k in 1usize..6, a in -3.0..3.0f64, b in -3.0..3.0f64) {
            prop_assume!(a.abs() > 0.05);
            // a Re z^k + b Im z^k
            let t = TaylorTable::from_fn(8, |h, j| {
                if h + j != k { return 0.0; }
                let c = binom(k, j);
                let s = match j % 4 { 0 => (1.0, 0.0), 1 => (0.0, 1.0), 2 => (-1.0, 0.0), _ => (0.0, -1.0) };
                c * (a * s.0 + b * s.1)
            });
            let n = nodal_params(&t).unwrap();
            let simple = predict_simple(&n).unwrap();
            let cap = predict_capacity(&t);
            prop_assert!((simple.coefficient - cap.coefficient).abs() <= 1e-10 * cap.coefficient);
        }
    }
}
