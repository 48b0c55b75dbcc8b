//! Exact Dirichlet eigenpairs of rectangles and disks, with Taylor tables at
//! arbitrary points and frames.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asymptotics::{NodalData, TangencyData, TaylorTable};
use crate::geometry::{DomainSpec, Point};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticError {
    #[error("Bessel zero j({n},{s}) did not converge")]
    ConvergenceFailure { n: usize, s: usize },
    #[error("shape has no closed-form spectrum")]
    UnsupportedShape,
    #[error("point ({0}, {1}) is not inside the domain")]
    PointOutsideDomain(f64, f64),
    #[error("radial mode with s = 1 has no interior nodal circle")]
    NoInteriorNodalCircle,
    #[error("invalid mode: {0}")]
    InvalidMode(String),
}

fn bessel_series(n: usize, x: f64) -> f64 {
    let half = 0.5 * x;
    let mut term = (1..=n).fold(1.0, |acc, i| acc * half / i as f64);
    let mut sum = term;
    let q = -half * half;
    for s in 1..200 {
        term *= q / (s as f64 * (n + s) as f64);
        sum += term;
        if term.abs() < 1e-17 * sum.abs().max(1e-300) {
            break;
        }
    }
    sum
}

/// Bessel function of the first kind `J_n(x)` for `x ≥ 0`.
pub fn bessel_j(n: usize, x: f64) -> f64 {
    let x = x.abs();
    if x == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    if x < 2.0 {
        return bessel_series(n, x);
    }
    // Miller's backward recurrence normalized by J₀ + 2 Σ J₂ₖ = 1.
    let big = n.max(x as usize);
    let mut top = big + 30 + (40.0 * big as f64).sqrt() as usize;
    top += top % 2;
    let (mut jp1, mut j) = (0.0f64, 1e-300f64);
    let mut norm = 0.0;
    let mut jn = 0.0;
    for k in (1..=top).rev() {
        let jm1 = 2.0 * k as f64 / x * j - jp1;
        jp1 = j;
        j = jm1;
        if k - 1 == n {
            jn = j;
        }
        if (k - 1) % 2 == 0 && k - 1 > 0 {
            norm += 2.0 * j;
        }
        if j.abs() > 1e250 {
            j *= 1e-250;
            jp1 *= 1e-250;
            jn *= 1e-250;
            norm *= 1e-250;
        }
    }
    norm += j;
    jn / norm
}

/// `J_n'(x)`.
pub fn bessel_j_prime(n: usize, x: f64) -> f64 {
    if n == 0 {
        -bessel_j(1, x)
    } else {
        0.5 * (bessel_j(n - 1, x) - bessel_j(n + 1, x))
    }
}

/// `J_ν` for integer `ν` of either sign.
fn bessel_j_signed(nu: i64, x: f64) -> f64 {
    let v = bessel_j(nu.unsigned_abs() as usize, x);
    if nu < 0 && nu % 2 != 0 {
        -v
    } else {
        v
    }
}

/// `s`-th positive zero `j_{n,s}` of `J_n`.
pub fn bessel_zero(n: usize, s: usize) -> Result<f64, AnalyticError> {
    if s == 0 {
        return Err(AnalyticError::InvalidMode("zero index starts at 1".into()));
    }
    let nf = n as f64;
    let mut x = if s == 1 && n >= 1 {
        nf + 1.855_757_1 * nf.cbrt() + 1.033_150 / nf.cbrt()
    } else {
        // McMahon expansion.
        let mu = 4.0 * nf * nf;
        let b = (s as f64 + 0.5 * nf - 0.25) * PI;
        let e = 8.0 * b;
        b - (mu - 1.0) / e - 4.0 * (mu - 1.0) * (7.0 * mu - 31.0) / (3.0 * e.powi(3))
    };
    for _ in 0..100 {
        let j = bessel_j(n, x);
        let jp = bessel_j_prime(n, x);
        let jpp = -jp / x - (1.0 - nf * nf / (x * x)) * j;
        // Halley step
        let dx = 2.0 * j * jp / (2.0 * jp * jp - j * jpp);
        x -= dx;
        if dx.abs() < 1e-15 * x {
            let check = bessel_j(n, x);
            if check.abs() < 1e-13 {
                return Ok(x);
            }
        }
    }
    Err(AnalyticError::ConvergenceFailure { n, s })
}

/// `(2/√(ab)) sin(mπ(x−x₀)/a) sin(nπ(y−y₀)/b)` on an axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectMode {
    pub width: f64,
    pub height: f64,
    pub origin: Point,
    pub m: usize,
    pub n: usize,
}

impl RectMode {
    pub fn new(width: f64, height: f64, m: usize, n: usize) -> Self {
        RectMode { width, height, origin: [0.0, 0.0], m, n }
    }

    pub fn eigenvalue(&self) -> f64 {
        (self.m as f64 * PI / self.width).powi(2) + (self.n as f64 * PI / self.height).powi(2)
    }

    pub fn normalization(&self) -> f64 {
        2.0 / (self.width * self.height).sqrt()
    }

    fn wavenumbers(&self) -> (f64, f64) {
        (self.m as f64 * PI / self.width, self.n as f64 * PI / self.height)
    }

    pub fn eval(&self, p: Point) -> f64 {
        let (kx, ky) = self.wavenumbers();
        self.normalization() * (kx * (p[0] - self.origin[0])).sin() * (ky * (p[1] - self.origin[1])).sin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Cos,
    Sin,
}

/// `N J_n(j_{n,s} r/R) cos(nθ)` (or `sin`) on a disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiskMode {
    pub radius: f64,
    pub center: Point,
    pub n: usize,
    pub s: usize,
    pub zero: f64,
    pub flavor: Flavor,
}

impl DiskMode {
    pub fn new(radius: f64, n: usize, s: usize, flavor: Flavor) -> Result<Self, AnalyticError> {
        if n == 0 && flavor == Flavor::Sin {
            return Err(AnalyticError::InvalidMode("radial modes have no sine flavor".into()));
        }
        Ok(DiskMode { radius, center: [0.0, 0.0], n, s, zero: bessel_zero(n, s)?, flavor })
    }

    pub fn wavenumber(&self) -> f64 {
        self.zero / self.radius
    }

    pub fn eigenvalue(&self) -> f64 {
        self.wavenumber().powi(2)
    }

    pub fn normalization(&self) -> f64 {
        let jn1 = bessel_j(self.n + 1, self.zero).abs();
        if self.n == 0 {
            1.0 / (PI.sqrt() * self.radius * jn1)
        } else {
            2f64.sqrt() / (PI.sqrt() * self.radius * jn1)
        }
    }

    pub fn eval(&self, p: Point) -> f64 {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let r = dx.hypot(dy);
        let th = dy.atan2(dx);
        let ang = match self.flavor {
            Flavor::Cos => (self.n as f64 * th).cos(),
            Flavor::Sin => (self.n as f64 * th).sin(),
        };
        self.normalization() * bessel_j(self.n, self.wavenumber() * r) * ang
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Mode {
    Rect(RectMode),
    Disk(DiskMode),
}

impl Mode {
    pub fn eigenvalue(&self) -> f64 {
        match self {
            Mode::Rect(m) => m.eigenvalue(),
            Mode::Disk(m) => m.eigenvalue(),
        }
    }

    pub fn eval(&self, p: Point) -> f64 {
        match self {
            Mode::Rect(m) => m.eval(p),
            Mode::Disk(m) => m.eval(p),
        }
    }

    pub fn domain(&self) -> DomainSpec {
        match self {
            Mode::Rect(m) => DomainSpec::Rectangle { width: m.width, height: m.height, origin: m.origin },
            Mode::Disk(m) => DomainSpec::Disk { radius: m.radius, center: m.center },
        }
    }

    pub fn label(&self) -> String {
        match self {
            Mode::Rect(m) => format!("rect({},{})", m.m, m.n),
            Mode::Disk(m) => format!("disk({},{},{:?})", m.n, m.s, m.flavor).to_lowercase(),
        }
    }

    /// Taylor table at `point` in the frame whose first axis points along
    /// `(cos frame_angle, sin frame_angle)`.
    pub fn taylor_at(&self, point: Point, max_order: usize, frame_angle: f64) -> Result<TaylorTable, AnalyticError> {
        if !self.domain().contains(point) || self.domain().boundary_distance(point) <= 0.0 {
            return Err(AnalyticError::PointOutsideDomain(point[0], point[1]));
        }
        Ok(match self {
            Mode::Rect(m) => rect_taylor(m, point, max_order, frame_angle),
            Mode::Disk(m) => disk_taylor(m, point, max_order, frame_angle),
        })
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

/// `sin(A) sin(B) = ½[cos(A−B) − cos(A+B)]`: each plane wave `cos(k·y + φ)`
/// differentiates in any frame as `(k·e₁)^h (k·e₂)^j cos(φ' + (h+j)π/2)`.
fn rect_taylor(m: &RectMode, p: Point, order: usize, theta: f64) -> TaylorTable {
    let (kx, ky) = m.wavenumbers();
    let a = kx * (p[0] - m.origin[0]);
    let b = ky * (p[1] - m.origin[1]);
    let (s, c) = theta.sin_cos();
    let e1 = [c, s];
    let e2 = [-s, c];
    let waves = [([kx, -ky], a - b, 0.5), ([kx, ky], a + b, -0.5)];
    let norm = m.normalization();
    TaylorTable::from_fn(order, |h, j| {
        let mut v = 0.0;
        for (k, phase, w) in &waves {
            let k1 = k[0] * e1[0] + k[1] * e1[1];
            let k2 = k[0] * e2[0] + k[1] * e2[1];
            v += w * k1.powi(h as i32) * k2.powi(j as i32) * (phase + (h + j) as f64 * PI / 2.0).cos();
        }
        norm * v / (factorial(h) * factorial(j))
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cx(f64, f64);

impl Cx {
    fn mul(self, o: Cx) -> Cx {
        Cx(self.0 * o.0 - self.1 * o.1, self.0 * o.1 + self.1 * o.0)
    }
    fn scale(self, s: f64) -> Cx {
        Cx(self.0 * s, self.1 * s)
    }
    fn expi(t: f64) -> Cx {
        Cx(t.cos(), t.sin())
    }
}

/// Regular wave functions `R_ν(x) = J_ν(k|x|) e^{iν arg x}` obey the addition
/// theorem `R_n(p + y) = Σ_m R_{n−m}(p) R_m(y)`. The series of `R_m(y)` in
/// `z = y₁ + i y₂` is `Σ_s (−1)^s (k/2)^{|m|+2s} / (s!(|m|+s)!) z^{·} z̄^{·}`,
/// and a frame rotation by `θ` turns `z^a z̄^b` into `e^{iθ(a−b)} z'^a z̄'^b`.
fn disk_taylor(mode: &DiskMode, p: Point, order: usize, theta: f64) -> TaylorTable {
    let k = mode.wavenumber();
    let n = mode.n as i64;
    let (dx, dy) = (p[0] - mode.center[0], p[1] - mode.center[1]);
    let rp = dx.hypot(dy);
    let thp = if rp == 0.0 { 0.0 } else { dy.atan2(dx) };
    // coefficient of z^a z̄^b in R_n(p + ·), a + b ≤ order
    let mut coeffs = vec![vec![Cx(0.0, 0.0); order + 1]; order + 1];
    let om = order as i64;
    {
        for m in -om..=om {
            let nu = n - m;
            let outer = Cx::expi(nu as f64 * thp).scale(bessel_j_signed(nu, k * rp));
            if outer.0 == 0.0 && outer.1 == 0.0 {
                continue;
            }
            let am = m.unsigned_abs() as usize;
            let sign_m = if m < 0 && am % 2 == 1 { -1.0 } else { 1.0 };
            let mut s = 0;
            while am + 2 * s <= order {
                let c = sign_m * if s % 2 == 0 { 1.0 } else { -1.0 } * (0.5 * k).powi((am + 2 * s) as i32)
                    / (factorial(s) * factorial(am + s));
                let (a, b) = if m >= 0 { (am + s, s) } else { (s, am + s) };
                let rot = Cx::expi(theta * (a as f64 - b as f64));
                let add = outer.mul(rot).scale(c);
                coeffs[a][b] = Cx(coeffs[a][b].0 + add.0, coeffs[a][b].1 + add.1);
                s += 1;
            }
        }
    }
    // J_n(kr) is real, so u = N·Re R_n (cos flavor) or N·Im R_n (sin flavor).
    let norm = mode.normalization();
    // Expand z^a z̄^b = (y₁ + i y₂)^a (y₁ − i y₂)^b into real monomials.
    let mut table = TaylorTable::zeros(order);
    for a in 0..=order {
        for b in 0..=order - a {
            let c = coeffs[a][b];
            if c.0 == 0.0 && c.1 == 0.0 {
                continue;
            }
            // polynomial in (y₁, y₂) with complex coefficients, indexed by y₂ power
            let mut poly = vec![Cx(0.0, 0.0); a + b + 1];
            for i in 0..=a {
                let ci = binom(a, i);
                let ipow = i_pow(i);
                for q in 0..=b {
                    let cq = binom(b, q) * if q % 2 == 0 { 1.0 } else { -1.0 };
                    let qpow = i_pow(q);
                    let t = ipow.mul(qpow).scale(ci * cq);
                    poly[i + q] = Cx(poly[i + q].0 + t.0, poly[i + q].1 + t.1);
                }
            }
            for (j, pc) in poly.iter().enumerate() {
                let v = c.mul(*pc);
                let part = match mode.flavor {
                    Flavor::Cos => v.0,
                    Flavor::Sin => v.1,
                };
                let h = a + b - j;
                table.set(h, j, table.get(h, j) + norm * part);
            }
        }
    }
    table
}

fn i_pow(p: usize) -> Cx {
    match p % 4 {
        0 => Cx(1.0, 0.0),
        1 => Cx(0.0, 1.0),
        2 => Cx(-1.0, 0.0),
        _ => Cx(0.0, -1.0),
    }
}

fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k.min(n - k)).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// One eigenvalue of the reference spectrum with its eigenspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCluster {
    pub eigenvalue: f64,
    pub modes: Vec<Mode>,
}

/// Ascending exact eigenvalues, grouped by multiplicity, covering at least
/// `count` eigenfunctions (the last cluster is completed).
pub fn eigen_list(domain: &DomainSpec, count: usize) -> Result<Vec<ReferenceCluster>, AnalyticError> {
    let mut modes: Vec<Mode> = Vec::new();
    match *domain {
        DomainSpec::Rectangle { width, height, origin } => {
            let lim = count + 2;
            for m in 1..=lim {
                for n in 1..=lim {
                    modes.push(Mode::Rect(RectMode { width, height, origin, m, n }));
                }
            }
        }
        DomainSpec::Disk { radius, center } => {
            let lim = count + 2;
            for n in 0..=lim {
                for s in 1..=lim {
                    let flavors: &[Flavor] = if n == 0 { &[Flavor::Cos] } else { &[Flavor::Cos, Flavor::Sin] };
                    for &f in flavors {
                        let mut d = DiskMode::new(radius, n, s, f)?;
                        d.center = center;
                        modes.push(Mode::Disk(d));
                    }
                }
            }
        }
        DomainSpec::Polygon { .. } => return Err(AnalyticError::UnsupportedShape),
    }
    modes.sort_by(|a, b| a.eigenvalue().total_cmp(&b.eigenvalue()));
    let mut out: Vec<ReferenceCluster> = Vec::new();
    let mut used = 0;
    for mode in modes {
        let lam = mode.eigenvalue();
        match out.last_mut() {
            Some(c) if (lam - c.eigenvalue).abs() <= 1e-12 * lam => c.modes.push(mode),
            _ => {
                if used >= count {
                    break;
                }
                out.push(ReferenceCluster { eigenvalue: lam, modes: vec![mode] });
            }
        }
        used += 1;
    }
    Ok(out)
}

/// Slit placement tangent to the interior nodal circle of a radial disk mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangencySetup {
    pub slit_center: Point,
    pub slit_angle: f64,
    pub nodal_radius: f64,
    /// Eigenfunction sign chosen so that `beta > 0`.
    pub sign: f64,
    pub nodal: NodalData,
    pub tangency: TangencyData,
    pub table: TaylorTable,
}

/// Bottom point of the innermost nodal circle of radial mode `(0, s)`, with a
/// horizontal slit; the nodal circle is the graph `x₂ = f(x₁)` with
/// `f''(0) = 1/r₀`.
pub fn tangency_setup(mode: &DiskMode, max_order: usize) -> Result<TangencySetup, AnalyticError> {
    if mode.n != 0 {
        return Err(AnalyticError::InvalidMode("tangency setup needs a radial mode".into()));
    }
    if mode.s < 2 {
        return Err(AnalyticError::NoInteriorNodalCircle);
    }
    let r0 = mode.radius * bessel_zero(0, 1)? / mode.zero;
    let center = [mode.center[0], mode.center[1] - r0];
    let raw = Mode::Disk(*mode).taylor_at(center, max_order, 0.0)?;
    // u'(r₀) points outward, i.e. along −x₂ at the bottom point.
    let du_dr = mode.normalization() * mode.wavenumber() * bessel_j_prime(0, mode.zero * r0 / mode.radius);
    let sign = if du_dr < 0.0 { -1.0 } else { 1.0 };
    let table = raw.scaled(sign);
    Ok(TangencySetup {
        slit_center: center,
        slit_angle: 0.0,
        nodal_radius: r0,
        sign,
        nodal: NodalData { k: 1, beta: du_dr.abs(), alpha: 0.0 },
        tangency: TangencyData { l: Some(2), f_l: 1.0 / r0 },
        table,
    })
}
