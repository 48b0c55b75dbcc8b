//! Planar domains, slits and slit-conforming triangulations.
//!
//! The mesher inserts the domain boundary and the slit as constraint edges of a
//! constrained Delaunay triangulation, seeds geometrically graded layers of
//! points around the slit, and then runs Delaunay refinement for the angle
//! bound. The slit therefore always ends up as a chain of mesh edges, so
//! Dirichlet data on it can be prescribed node by node.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use spade::{
    AngleLimit, ConstrainedDelaunayTriangulation, DelaunayTriangulation, Point2,
    RefinementParameters, Triangulation,
};
use thiserror::Error;

pub type Point = [f64; 2];

/// Tolerance (domain units) for classifying nodes on the slit or on the boundary.
pub const ON_SET_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("invalid slit: {0}")]
    InvalidSlit(String),
    #[error("invalid mesh parameters: {0}")]
    InvalidParams(String),
    #[error("slit is too close to the boundary: distance {distance:.6e} < required {required:.6e}")]
    SlitTooCloseToBoundary { distance: f64, required: f64 },
    #[error("mesh quality failure: {0}")]
    MeshQualityFailure(String),
    #[error("mesh format error: {0}")]
    Format(String),
}

fn default_origin() -> Point {
    [0.0, 0.0]
}

/// A bounded planar domain.
///
/// Rectangles span `[x0, x0 + width] x [y0, y0 + height]` where `origin = [x0, y0]`,
/// disks are centered at `center`, polygons are listed counterclockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase", deny_unknown_fields)]
pub enum DomainSpec {
    Rectangle {
        width: f64,
        height: f64,
        #[serde(default = "default_origin")]
        origin: Point,
    },
    Disk {
        radius: f64,
        #[serde(default = "default_origin")]
        center: Point,
    },
    Polygon {
        vertices: Vec<Point>,
    },
}

impl DomainSpec {
    pub fn rectangle(width: f64, height: f64) -> Self {
        DomainSpec::Rectangle { width, height, origin: [0.0, 0.0] }
    }

    pub fn disk(radius: f64) -> Self {
        DomainSpec::Disk { radius, center: [0.0, 0.0] }
    }

    pub fn polygon(vertices: Vec<Point>) -> Self {
        DomainSpec::Polygon { vertices }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        match self {
            DomainSpec::Rectangle { width, height, origin } => {
                if !(width.is_finite() && height.is_finite() && *width > 0.0 && *height > 0.0) {
                    return Err(GeometryError::InvalidDomain(format!(
                        "rectangle dimensions must be positive, got {width} x {height}"
                    )));
                }
                if !(origin[0].is_finite() && origin[1].is_finite()) {
                    return Err(GeometryError::InvalidDomain("non-finite origin".into()));
                }
            }
            DomainSpec::Disk { radius, center } => {
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(GeometryError::InvalidDomain(format!(
                        "disk radius must be positive, got {radius}"
                    )));
                }
                if !(center[0].is_finite() && center[1].is_finite()) {
                    return Err(GeometryError::InvalidDomain("non-finite center".into()));
                }
            }
            DomainSpec::Polygon { vertices } => {
                if vertices.len() < 3 {
                    return Err(GeometryError::InvalidDomain(
                        "polygon needs at least 3 vertices".into(),
                    ));
                }
                if vertices.iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
                    return Err(GeometryError::InvalidDomain("non-finite polygon vertex".into()));
                }
                if polygon_signed_area(vertices) <= 0.0 {
                    return Err(GeometryError::InvalidDomain(
                        "polygon must be counterclockwise".into(),
                    ));
                }
                if !polygon_is_simple(vertices) {
                    return Err(GeometryError::InvalidDomain("polygon is self-intersecting".into()));
                }
            }
        }
        Ok(())
    }

    /// Corner list of the polygonal boundary (not used for disks).
    fn corners(&self) -> Option<Vec<Point>> {
        match self {
            DomainSpec::Rectangle { width, height, origin } => {
                let [x0, y0] = *origin;
                Some(vec![[x0, y0], [x0 + width, y0], [x0 + width, y0 + height], [x0, y0 + height]])
            }
            DomainSpec::Polygon { vertices } => Some(vertices.clone()),
            DomainSpec::Disk { .. } => None,
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            DomainSpec::Rectangle { width, height, .. } => width * height,
            DomainSpec::Disk { radius, .. } => PI * radius * radius,
            DomainSpec::Polygon { vertices } => polygon_signed_area(vertices),
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        match self {
            DomainSpec::Rectangle { width, height, origin } => {
                p[0] > origin[0]
                    && p[0] < origin[0] + width
                    && p[1] > origin[1]
                    && p[1] < origin[1] + height
            }
            DomainSpec::Disk { radius, center } => dist(p, *center) < *radius,
            DomainSpec::Polygon { vertices } => point_in_polygon(p, vertices),
        }
    }

    /// Unsigned distance from `p` to the boundary curve.
    pub fn boundary_distance(&self, p: Point) -> f64 {
        match self {
            DomainSpec::Disk { radius, center } => (dist(p, *center) - radius).abs(),
            _ => {
                let c = self.corners().expect("polygonal domain");
                (0..c.len())
                    .map(|i| point_segment_distance(p, c[i], c[(i + 1) % c.len()]))
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// Distance between the closed segment `[a, b]` and the boundary, zero if they meet.
    pub fn segment_boundary_distance(&self, a: Point, b: Point) -> f64 {
        match self {
            DomainSpec::Disk { radius, center } => {
                let far = dist(a, *center).max(dist(b, *center));
                let near = point_segment_distance(*center, a, b);
                if far <= *radius {
                    radius - far
                } else if near >= *radius {
                    near - radius
                } else {
                    0.0
                }
            }
            _ => {
                let c = self.corners().expect("polygonal domain");
                (0..c.len())
                    .map(|i| segment_segment_distance(a, b, c[i], c[(i + 1) % c.len()]))
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// Radius of the largest inscribed disk (approximate for general polygons).
    pub fn inradius(&self) -> f64 {
        match self {
            DomainSpec::Rectangle { width, height, .. } => 0.5 * width.min(*height),
            DomainSpec::Disk { radius, .. } => *radius,
            DomainSpec::Polygon { vertices } => {
                let (lo, hi) = bounding_box(vertices);
                let n = 200;
                let mut best: f64 = 0.0;
                for i in 0..=n {
                    for j in 0..=n {
                        let p = [
                            lo[0] + (hi[0] - lo[0]) * i as f64 / n as f64,
                            lo[1] + (hi[1] - lo[1]) * j as f64 / n as f64,
                        ];
                        if self.contains(p) {
                            best = best.max(self.boundary_distance(p));
                        }
                    }
                }
                best
            }
        }
    }

    /// Counterclockwise boundary polyline with segment length at most `h`.
    ///
    /// Disk boundaries use chords of length at most `h / 2` with vertices on the circle.
    pub fn boundary_polyline(&self, h: f64) -> Vec<Point> {
        match self {
            DomainSpec::Disk { radius, center } => {
                let n = ((2.0 * PI * radius / (0.5 * h)).ceil() as usize).max(16);
                (0..n)
                    .map(|i| {
                        let t = 2.0 * PI * i as f64 / n as f64;
                        [center[0] + radius * t.cos(), center[1] + radius * t.sin()]
                    })
                    .collect()
            }
            _ => {
                let c = self.corners().expect("polygonal domain");
                let mut out = Vec::new();
                for i in 0..c.len() {
                    let a = c[i];
                    let b = c[(i + 1) % c.len()];
                    let n = ((dist(a, b) / h).ceil() as usize).max(1);
                    for s in 0..n {
                        let t = s as f64 / n as f64;
                        out.push(lerp(a, b, t));
                    }
                }
                out
            }
        }
    }

    /// Rigid motion: rotate by `angle` about `pivot`, then translate by `shift`.
    fn transformed(&self, pivot: Point, angle: f64, shift: Point) -> DomainSpec {
        let map = |p: Point| {
            let q = rotate_about(p, pivot, angle);
            [q[0] + shift[0], q[1] + shift[1]]
        };
        match self {
            DomainSpec::Disk { radius, center } => {
                DomainSpec::Disk { radius: *radius, center: map(*center) }
            }
            _ => {
                let c = self.corners().expect("polygonal domain");
                DomainSpec::Polygon { vertices: c.into_iter().map(map).collect() }
            }
        }
    }
}

/// The removed segment: center, half length `eps`, and axis angle in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlitSpec {
    pub center: Point,
    pub half_length: f64,
    #[serde(default)]
    pub angle: f64,
}

impl SlitSpec {
    pub fn new(center: Point, half_length: f64, angle: f64) -> Self {
        SlitSpec { center, half_length, angle }
    }

    pub fn direction(&self) -> Point {
        [self.angle.cos(), self.angle.sin()]
    }

    /// Global point at local coordinate `x1` along the slit axis.
    pub fn point_at(&self, x1: f64) -> Point {
        let d = self.direction();
        [self.center[0] + x1 * d[0], self.center[1] + x1 * d[1]]
    }

    pub fn endpoints(&self) -> (Point, Point) {
        (self.point_at(-self.half_length), self.point_at(self.half_length))
    }

    /// Coordinates of `p` in the slit frame (x1 along the slit, x2 normal to it).
    pub fn to_local(&self, p: Point) -> Point {
        let d = self.direction();
        let v = [p[0] - self.center[0], p[1] - self.center[1]];
        [v[0] * d[0] + v[1] * d[1], -v[0] * d[1] + v[1] * d[0]]
    }

    pub fn distance(&self, p: Point) -> f64 {
        let (a, b) = self.endpoints();
        point_segment_distance(p, a, b)
    }

    fn validate(&self) -> Result<(), GeometryError> {
        if !(self.half_length.is_finite() && self.half_length > 0.0) {
            return Err(GeometryError::InvalidSlit(format!(
                "half length must be positive, got {}",
                self.half_length
            )));
        }
        if !(self.center[0].is_finite() && self.center[1].is_finite() && self.angle.is_finite()) {
            return Err(GeometryError::InvalidSlit("non-finite slit placement".into()));
        }
        Ok(())
    }

    /// Checks that the slit lies inside `domain` with clearance at least `2 eps`.
    pub fn check_margin(&self, domain: &DomainSpec) -> Result<(), GeometryError> {
        self.validate()?;
        let (a, b) = self.endpoints();
        let required = 2.0 * self.half_length;
        let inside = domain.contains(a) && domain.contains(b) && domain.contains(self.center);
        let distance = if inside { domain.segment_boundary_distance(a, b) } else { 0.0 };
        if distance < required {
            return Err(GeometryError::SlitTooCloseToBoundary { distance, required });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshParams {
    /// Global target edge length.
    pub h_max: f64,
    /// Geometric ratio of successive slit edge lengths toward each tip.
    #[serde(default = "MeshParams::default_tip_ratio")]
    pub tip_ratio: f64,
    /// Number of geometric grading steps at each tip.
    #[serde(default = "MeshParams::default_tip_levels")]
    pub tip_levels: u32,
    /// Minimum interior angle in degrees.
    #[serde(default = "MeshParams::default_min_angle")]
    pub min_angle: f64,
    /// Minimum number of slit edges before tip grading.
    #[serde(default = "MeshParams::default_slit_divisions")]
    pub slit_divisions: u32,
    /// Growth rate of the element size with distance from the slit.
    #[serde(default = "MeshParams::default_grading")]
    pub grading: f64,
}

impl MeshParams {
    fn default_tip_ratio() -> f64 {
        0.7
    }
    fn default_tip_levels() -> u32 {
        6
    }
    fn default_min_angle() -> f64 {
        25.0
    }
    fn default_slit_divisions() -> u32 {
        8
    }
    fn default_grading() -> f64 {
        0.3
    }

    pub fn new(h_max: f64) -> Self {
        MeshParams {
            h_max,
            tip_ratio: Self::default_tip_ratio(),
            tip_levels: Self::default_tip_levels(),
            min_angle: Self::default_min_angle(),
            slit_divisions: Self::default_slit_divisions(),
            grading: Self::default_grading(),
        }
    }

    /// Halves every length scale of the sizing field (used for two-level extrapolation).
    pub fn refined(&self) -> Self {
        MeshParams {
            h_max: 0.5 * self.h_max,
            slit_divisions: 2 * self.slit_divisions,
            grading: 0.5 * self.grading,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: String| Err(GeometryError::InvalidParams(m));
        if !(self.h_max.is_finite() && self.h_max > 0.0) {
            return bad(format!("h_max must be positive, got {}", self.h_max));
        }
        if !(self.tip_ratio > 0.0 && self.tip_ratio < 1.0) {
            return bad(format!("tip_ratio must lie in (0,1), got {}", self.tip_ratio));
        }
        if !(15.0..=30.0).contains(&self.min_angle) {
            return bad(format!("min_angle must lie in [15,30] degrees, got {}", self.min_angle));
        }
        if self.slit_divisions < 2 {
            return bad("slit_divisions must be at least 2".into());
        }
        if !(self.grading > 0.0 && self.grading <= 1.0) {
            return bad(format!("grading must lie in (0,1], got {}", self.grading));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeMarker {
    Interior,
    Boundary,
    Slit,
    Tip,
}

impl NodeMarker {
    fn as_str(self) -> &'static str {
        match self {
            NodeMarker::Interior => "interior",
            NodeMarker::Boundary => "boundary",
            NodeMarker::Slit => "slit",
            NodeMarker::Tip => "tip",
        }
    }
}

/// Conforming triangulation. `slit_nodes` run from the lexicographically smaller tip to the other.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_nodes: Vec<usize>,
    pub slit_nodes: Vec<usize>,
    pub tip_nodes: Vec<usize>,
    pub h_max: f64,
    pub h_tip: f64,
}

impl Mesh {
    pub fn num_nodes(&self) -> usize {
        self.vertices.len()
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        triangle_signed_area(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.signed_area(t)).sum()
    }

    /// Smallest interior angle over all triangles, in degrees.
    pub fn min_angle_deg(&self) -> f64 {
        self.triangles
            .iter()
            .map(|&[a, b, c]| {
                triangle_min_angle(self.vertices[a], self.vertices[b], self.vertices[c])
            })
            .fold(f64::INFINITY, f64::min)
            .to_degrees()
    }

    pub fn markers(&self) -> Vec<NodeMarker> {
        let mut m = vec![NodeMarker::Interior; self.vertices.len()];
        for &i in &self.boundary_nodes {
            m[i] = NodeMarker::Boundary;
        }
        for &i in &self.slit_nodes {
            m[i] = NodeMarker::Slit;
        }
        for &i in &self.tip_nodes {
            m[i] = NodeMarker::Tip;
        }
        m
    }

    /// Lengths of consecutive slit edges, tip to tip.
    pub fn slit_edge_lengths(&self) -> Vec<f64> {
        self.slit_nodes
            .windows(2)
            .map(|w| dist(self.vertices[w[0]], self.vertices[w[1]]))
            .collect()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.triangles.iter().any(|t| t.contains(&a) && t.contains(&b))
    }

    /// Plain-text export: `vertices N triangles M`, then `x y marker` lines, then `i j k` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "vertices {} triangles {}", self.vertices.len(), self.triangles.len());
        for (p, m) in self.vertices.iter().zip(self.markers()) {
            let _ = writeln!(s, "{:.16e} {:.16e} {}", p[0], p[1], m.as_str());
        }
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Mesh, GeometryError> {
        let fmt = |m: String| GeometryError::Format(m);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| fmt("empty mesh file".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 4 || h[0] != "vertices" || h[2] != "triangles" {
            return Err(fmt(format!("bad header line: {header:?}")));
        }
        let nv: usize = h[1].parse().map_err(|_| fmt(format!("bad vertex count {:?}", h[1])))?;
        let nt: usize = h[3].parse().map_err(|_| fmt(format!("bad triangle count {:?}", h[3])))?;
        let mut vertices = Vec::with_capacity(nv);
        let mut boundary_nodes = Vec::new();
        let mut slit_nodes = Vec::new();
        let mut tip_nodes = Vec::new();
        for i in 0..nv {
            let line = lines.next().ok_or_else(|| fmt(format!("missing vertex line {i}")))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(fmt(format!("bad vertex line {i}: {line:?}")));
            }
            let x: f64 = f[0].parse().map_err(|_| fmt(format!("bad x on vertex {i}")))?;
            let y: f64 = f[1].parse().map_err(|_| fmt(format!("bad y on vertex {i}")))?;
            vertices.push([x, y]);
            match f[2] {
                "interior" => {}
                "boundary" => boundary_nodes.push(i),
                "slit" => slit_nodes.push(i),
                "tip" => {
                    slit_nodes.push(i);
                    tip_nodes.push(i);
                }
                other => return Err(fmt(format!("unknown marker {other:?} on vertex {i}"))),
            }
        }
        let mut triangles = Vec::with_capacity(nt);
        for i in 0..nt {
            let line = lines.next().ok_or_else(|| fmt(format!("missing triangle line {i}")))?;
            let f: Vec<usize> = line
                .split_whitespace()
                .map(|x| x.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| fmt(format!("bad triangle line {i}: {line:?}")))?;
            if f.len() != 3 || f.iter().any(|&v| v >= nv) {
                return Err(fmt(format!("bad triangle line {i}: {line:?}")));
            }
            triangles.push([f[0], f[1], f[2]]);
        }
        if !(tip_nodes.is_empty() || tip_nodes.len() == 2) {
            return Err(fmt(format!("expected 0 or 2 tip nodes, found {}", tip_nodes.len())));
        }
        if !tip_nodes.is_empty() {
            tip_nodes.sort_by(|&i, &j| lex_cmp(vertices[i], vertices[j]));
            let a = vertices[tip_nodes[0]];
            slit_nodes.sort_by(|&i, &j| dist(vertices[i], a).total_cmp(&dist(vertices[j], a)));
        }
        let mut mesh = Mesh {
            vertices,
            triangles,
            boundary_nodes,
            slit_nodes,
            tip_nodes,
            h_max: 0.0,
            h_tip: 0.0,
        };
        mesh.h_max = mesh.longest_edge();
        mesh.h_tip = mesh.slit_edge_lengths().into_iter().fold(0.0, |acc, l| {
            if acc == 0.0 {
                l
            } else {
                acc.min(l)
            }
        });
        Ok(mesh)
    }

    fn longest_edge(&self) -> f64 {
        self.triangles
            .iter()
            .flat_map(|&[a, b, c]| [(a, b), (b, c), (c, a)])
            .map(|(a, b)| dist(self.vertices[a], self.vertices[b]))
            .fold(0.0, f64::max)
    }
}

/// Triangulates `domain`, with `slit` embedded as an edge chain when present.
pub fn generate_mesh(
    domain: &DomainSpec,
    slit: Option<&SlitSpec>,
    params: &MeshParams,
) -> Result<Mesh, GeometryError> {
    domain.validate()?;
    params.validate()?;
    if let Some(s) = slit {
        s.check_margin(domain)?;
    }

    let mut last_err = None;
    for attempt in 0..3 {
        let angle = (params.min_angle + 1.0 + 2.0 * attempt as f64).min(33.0);
        match mesh_attempt(domain, slit, params, angle) {
            Ok(mesh) => {
                if mesh.min_angle_deg() >= params.min_angle - 1e-9 {
                    return Ok(mesh);
                }
                last_err = Some(GeometryError::MeshQualityFailure(format!(
                    "minimum angle {:.3} deg below {:.3} deg",
                    mesh.min_angle_deg(),
                    params.min_angle
                )));
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Slit node offsets along the axis, from `-eps` to `eps`, graded toward both tips.
fn slit_offsets(eps: f64, params: &MeshParams) -> (Vec<f64>, f64) {
    let h_mid = params.h_max.min(2.0 * eps / params.slit_divisions as f64);
    // Graded edge lengths from the tip inward: h_mid r^L, ..., h_mid r.
    let graded: Vec<f64> =
        (1..=params.tip_levels).rev().map(|i| h_mid * params.tip_ratio.powi(i as i32)).collect();
    let graded_len: f64 = graded.iter().sum();
    let middle = (2.0 * eps - 2.0 * graded_len).max(0.0);
    let n_mid = ((middle / h_mid).round() as usize).max(1);
    let h = middle / n_mid as f64;

    let mut lengths = graded.clone();
    lengths.extend(std::iter::repeat_n(h, n_mid));
    lengths.extend(graded.iter().rev());
    let total: f64 = lengths.iter().sum();
    let scale = 2.0 * eps / total;

    let mut out = Vec::with_capacity(lengths.len() + 1);
    let mut x = -eps;
    out.push(-eps);
    for l in &lengths[..lengths.len() - 1] {
        x += l * scale;
        out.push(x);
    }
    out.push(eps);
    let h_tip = graded.first().copied().unwrap_or(h) * scale;
    (out, h_tip)
}

struct Sizing {
    h_max: f64,
    h_mid: f64,
    h_tip: f64,
    grading: f64,
    slit: SlitSpec,
}

impl Sizing {
    fn at(&self, p: Point) -> f64 {
        let (a, b) = self.slit.endpoints();
        let dt = dist(p, a).min(dist(p, b));
        let ds = self.slit.distance(p);
        self.h_max.min(self.h_tip + self.grading * dt).min(self.h_mid + self.grading * ds)
    }
}

fn mesh_attempt(
    domain: &DomainSpec,
    slit: Option<&SlitSpec>,
    params: &MeshParams,
    angle_limit_deg: f64,
) -> Result<Mesh, GeometryError> {
    let boundary = domain.boundary_polyline(params.h_max);
    let nb = boundary.len();
    let mut points: Vec<Point> = boundary.clone();
    let mut edges: Vec<[usize; 2]> = (0..nb).map(|i| [i, (i + 1) % nb]).collect();

    let mut h_tip = 0.0;
    if let Some(s) = slit {
        let (offsets, ht) = slit_offsets(s.half_length, params);
        h_tip = ht;
        let first = points.len();
        for &x in &offsets {
            points.push(s.point_at(x));
        }
        for i in 0..offsets.len() - 1 {
            edges.push([first + i, first + i + 1]);
        }
        let sizing = Sizing {
            h_max: params.h_max,
            h_mid: params.h_max.min(2.0 * s.half_length / params.slit_divisions as f64),
            h_tip,
            grading: params.grading,
            slit: *s,
        };
        seed_graded_layers(domain, &sizing, &mut points);
    }

    let verts: Vec<Point2<f64>> = points.iter().map(|p| Point2::new(p[0], p[1])).collect();
    let mut cdt: ConstrainedDelaunayTriangulation<Point2<f64>> =
        ConstrainedDelaunayTriangulation::bulk_load_cdt(verts, edges)
            .map_err(|e| GeometryError::MeshQualityFailure(format!("triangulation failed: {e:?}")))?;
    if cdt.num_vertices() != points.len() {
        return Err(GeometryError::MeshQualityFailure("duplicate input points".into()));
    }

    let max_area = 0.25 * 3f64.sqrt() * params.h_max * params.h_max;
    let refinement = RefinementParameters::<f64>::new()
        .with_angle_limit(AngleLimit::from_deg(angle_limit_deg))
        .with_max_allowed_area(max_area)
        .with_max_additional_vertices(20 * points.len() + 4_000_000);
    let result = cdt.refine(refinement);
    if !result.refinement_complete {
        return Err(GeometryError::MeshQualityFailure("refinement ran out of vertices".into()));
    }

    let all: Vec<Point> = cdt.vertices().map(|v| [v.position().x, v.position().y]).collect();
    let mut used = vec![usize::MAX; all.len()];
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for face in cdt.inner_faces() {
        let vs = face.vertices().map(|v| v.fix().index());
        let centroid = [
            (all[vs[0]][0] + all[vs[1]][0] + all[vs[2]][0]) / 3.0,
            (all[vs[0]][1] + all[vs[1]][1] + all[vs[2]][1]) / 3.0,
        ];
        // Faces of the convex hull outside a non-convex polygon are dropped.
        if matches!(domain, DomainSpec::Polygon { .. }) && !domain.contains(centroid) {
            continue;
        }
        let mut tri = [0usize; 3];
        for (k, &old) in vs.iter().enumerate() {
            if used[old] == usize::MAX {
                used[old] = vertices.len();
                vertices.push(all[old]);
            }
            tri[k] = used[old];
        }
        triangles.push(tri);
    }

    // Boundary nodes are endpoints of non-slit constraint edges.
    let mut is_boundary = vec![false; vertices.len()];
    for e in cdt.undirected_edges() {
        if !e.is_constraint_edge() {
            continue;
        }
        let [a, b] = e.vertices().map(|v| v.fix().index());
        let (pa, pb) = (all[a], all[b]);
        let on_slit = slit.is_some_and(|s| {
            s.distance(pa) <= ON_SET_TOL && s.distance(pb) <= ON_SET_TOL
        });
        if !on_slit {
            for v in [a, b] {
                if used[v] != usize::MAX {
                    is_boundary[used[v]] = true;
                }
            }
        }
    }
    if let DomainSpec::Disk { radius, center } = domain {
        for (i, p) in vertices.iter_mut().enumerate() {
            if is_boundary[i] {
                let r = dist(*p, *center);
                p[0] = center[0] + (p[0] - center[0]) * radius / r;
                p[1] = center[1] + (p[1] - center[1]) * radius / r;
            }
        }
    }
    let boundary_nodes: Vec<usize> = (0..vertices.len()).filter(|&i| is_boundary[i]).collect();

    let (slit_nodes, tip_nodes) = match slit {
        Some(s) => {
            let mut nodes: Vec<usize> = (0..vertices.len())
                .filter(|&i| !is_boundary[i] && s.distance(vertices[i]) <= ON_SET_TOL)
                .collect();
            nodes.sort_by(|&i, &j| s.to_local(vertices[i])[0].total_cmp(&s.to_local(vertices[j])[0]));
            let (a, b) = s.endpoints();
            let tips = match (nodes.first(), nodes.last()) {
                (Some(&f), Some(&l)) if dist(vertices[f], a) <= ON_SET_TOL && dist(vertices[l], b) <= ON_SET_TOL => {
                    vec![f, l]
                }
                _ => return Err(GeometryError::MeshQualityFailure("slit tips missing".into())),
            };
            if lex_cmp(vertices[tips[0]], vertices[tips[1]]).is_gt() {
                nodes.reverse();
                (nodes, vec![tips[1], tips[0]])
            } else {
                (nodes, tips)
            }
        }
        None => (Vec::new(), Vec::new()),
    };

    for t in &mut triangles {
        let area = triangle_signed_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]);
        if area < 0.0 {
            t.swap(1, 2);
        }
    }
    let mesh = Mesh {
        vertices,
        triangles,
        boundary_nodes,
        slit_nodes,
        tip_nodes,
        h_max: params.h_max,
        h_tip,
    };
    if (0..mesh.triangles.len()).any(|t| mesh.signed_area(t) <= 0.0) {
        return Err(GeometryError::MeshQualityFailure("degenerate triangle".into()));
    }
    if slit.is_some() {
        for w in mesh.slit_nodes.windows(2) {
            if !mesh.has_edge(w[0], w[1]) {
                return Err(GeometryError::MeshQualityFailure(
                    "slit is not a chain of mesh edges".into(),
                ));
            }
        }
    }
    Ok(mesh)
}

/// Seeds offset layers around the slit whose spacing follows the sizing field.
fn seed_graded_layers(domain: &DomainSpec, sizing: &Sizing, points: &mut Vec<Point>) {
    let mut index: DelaunayTriangulation<Point2<f64>> = DelaunayTriangulation::new();
    for p in points.iter() {
        let _ = index.insert(Point2::new(p[0], p[1]));
    }
    let s = &sizing.slit;
    let eps = s.half_length;
    let stop = (sizing.h_max - sizing.h_tip) / sizing.grading;
    let mut d = 0.0;
    loop {
        d += 0.85 * sizing.h_max.min(sizing.h_tip + sizing.grading * d);
        if d > stop {
            break;
        }
        // Stadium of offset d: top edge, right cap, bottom edge, left cap.
        let perimeter = 4.0 * eps + 2.0 * PI * d;
        let mut t = 0.0;
        while t < perimeter {
            let local = stadium_point(eps, d, t);
            let p = s.point_at(0.0);
            let dir = s.direction();
            let q = [
                p[0] + local[0] * dir[0] - local[1] * dir[1],
                p[1] + local[0] * dir[1] + local[1] * dir[0],
            ];
            let h = sizing.at(q);
            t += h;
            if !domain.contains(q) || domain.boundary_distance(q) < 0.6 * h {
                continue;
            }
            let near = index.nearest_neighbor(Point2::new(q[0], q[1]));
            let ok = near.is_none_or(|v| {
                let np = v.position();
                dist([np.x, np.y], q) >= 0.6 * h
            });
            if ok {
                let _ = index.insert(Point2::new(q[0], q[1]));
                points.push(q);
            }
        }
    }
}

fn stadium_point(eps: f64, d: f64, t: f64) -> Point {
    let straight = 2.0 * eps;
    let cap = PI * d;
    if t < straight {
        [eps - t, d]
    } else if t < straight + cap {
        let a = PI / 2.0 + (t - straight) / d;
        [-eps + d * a.cos(), d * a.sin()]
    } else if t < 2.0 * straight + cap {
        [-eps + (t - straight - cap), -d]
    } else {
        let a = -PI / 2.0 + (t - 2.0 * straight - cap) / d;
        [eps + d * a.cos(), d * a.sin()]
    }
}

/// Rigid motion taking the slit to the horizontal frame centered at the origin.
pub fn rotate_frame(domain: &DomainSpec, slit: &SlitSpec) -> (DomainSpec, SlitSpec) {
    let shift = [-slit.center[0], -slit.center[1]];
    let d = domain.transformed(slit.center, -slit.angle, shift);
    (d, SlitSpec { center: [0.0, 0.0], half_length: slit.half_length, angle: 0.0 })
}

fn lex_cmp(a: Point, b: Point) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1]))
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn lerp(a: Point, b: Point, t: f64) -> Point {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

pub fn rotate_about(p: Point, pivot: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    let v = [p[0] - pivot[0], p[1] - pivot[1]];
    [pivot[0] + c * v[0] - s * v[1], pivot[1] + s * v[0] + c * v[1]]
}

pub fn triangle_signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn triangle_min_angle(a: Point, b: Point, c: Point) -> f64 {
    let ang = |p: Point, q: Point, r: Point| {
        let u = [q[0] - p[0], q[1] - p[1]];
        let v = [r[0] - p[0], r[1] - p[1]];
        let cross = u[0] * v[1] - u[1] * v[0];
        let dot = u[0] * v[0] + u[1] * v[1];
        cross.abs().atan2(dot)
    };
    ang(a, b, c).min(ang(b, c, a)).min(ang(c, a, b))
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
    dist(p, lerp(a, b, t))
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
        return true;
    }
    let on = |p: Point, q: Point, r: Point, o: f64| o == 0.0 && point_segment_distance(r, p, q) == 0.0;
    on(a, b, c, o1) || on(a, b, d, o2) || on(c, d, a, o3) || on(c, d, b, o4)
}

fn segment_segment_distance(a: Point, b: Point, c: Point, d: Point) -> f64 {
    if segments_intersect(a, b, c, d) {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

fn polygon_signed_area(v: &[Point]) -> f64 {
    let n = v.len();
    0.5 * (0..n)
        .map(|i| {
            let (p, q) = (v[i], v[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
}

fn polygon_is_simple(v: &[Point]) -> bool {
    let n = v.len();
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_intersect(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

fn point_in_polygon(p: Point, v: &[Point]) -> bool {
    let n = v.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        if point_segment_distance(p, a, b) == 0.0 {
            return false;
        }
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if x > p[0] {
                inside = !inside;
            }
        }
    }
    inside
}

fn bounding_box(v: &[Point]) -> (Point, Point) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in v {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> DomainSpec {
        DomainSpec::rectangle(PI, PI)
    }

    #[test]
    fn no_slit_square_mesh() {
        let mesh = generate_mesh(&square(), None, &MeshParams::new(0.1)).unwrap();
        assert!(mesh.slit_nodes.is_empty() && mesh.tip_nodes.is_empty());
        assert!(mesh.min_angle_deg() >= 20.0);
        assert!((mesh.total_area() - PI * PI).abs() < 1e-10);
        for &b in &mesh.boundary_nodes {
            assert!(square().boundary_distance(mesh.vertices[b]) <= ON_SET_TOL);
        }
        for t in 0..mesh.triangles.len() {
            assert!(mesh.signed_area(t) > 0.0);
        }
    }

    #[test]
    fn slit_chain_and_tip_grading() {
        let mut params = MeshParams::new(0.1);
        params.tip_levels = 5;
        params.tip_ratio = 0.7;
        let slit = SlitSpec::new([PI / 2.0, PI / 2.0], 0.1, 0.0);
        let mesh = generate_mesh(&square(), Some(&slit), &params).unwrap();
        let lengths = mesh.slit_edge_lengths();
        let total: f64 = lengths.iter().sum();
        assert!((total - 0.2).abs() < 1e-12, "slit length {total}");
        let smallest = lengths.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(smallest <= 0.7f64.powi(5) * params.h_max);
        assert_eq!(mesh.tip_nodes.len(), 2);
        for w in mesh.slit_nodes.windows(2) {
            assert!(mesh.has_edge(w[0], w[1]));
        }
        for &i in &mesh.slit_nodes {
            assert!(slit.distance(mesh.vertices[i]) <= ON_SET_TOL);
        }
        assert!(mesh.min_angle_deg() >= 20.0);
    }

    #[test]
    fn slit_near_boundary_rejected() {
        let slit = SlitSpec::new([0.0, 0.999], 0.05, 0.0);
        let err = generate_mesh(&DomainSpec::disk(1.0), Some(&slit), &MeshParams::new(0.1));
        assert!(matches!(err, Err(GeometryError::SlitTooCloseToBoundary { .. })));
    }

    #[test]
    fn zero_length_slit_rejected() {
        let slit = SlitSpec::new([0.0, 0.0], 0.0, 0.0);
        let err = generate_mesh(&DomainSpec::disk(1.0), Some(&slit), &MeshParams::new(0.1));
        assert!(matches!(err, Err(GeometryError::InvalidSlit(_))));
    }

    #[test]
    fn disk_boundary_on_circle() {
        let slit = SlitSpec::new([0.1, -0.2], 0.05, 0.3);
        let mesh = generate_mesh(&DomainSpec::disk(1.0), Some(&slit), &MeshParams::new(0.1)).unwrap();
        for &b in &mesh.boundary_nodes {
            assert!((dist(mesh.vertices[b], [0.0, 0.0]) - 1.0).abs() <= ON_SET_TOL);
        }
        for &i in &mesh.slit_nodes {
            assert!(slit.distance(mesh.vertices[i]) <= ON_SET_TOL);
        }
        assert!(mesh.min_angle_deg() >= 20.0);
    }

    #[test]
    fn rotate_frame_identity() {
        let slit = SlitSpec::new([0.0, 0.0], 0.1, 0.0);
        let d = DomainSpec::disk(1.0);
        let (d2, s2) = rotate_frame(&d, &slit);
        assert_eq!(d2, d);
        assert_eq!(s2, slit);
    }

    #[test]
    fn rotate_frame_quarter_turn() {
        let d = DomainSpec::rectangle(2.0, 2.0);
        let slit = SlitSpec::new([1.0, 0.5], 0.1, PI / 2.0);
        let (d2, s2) = rotate_frame(&d, &slit);
        assert_eq!(s2.center, [0.0, 0.0]);
        assert_eq!(s2.angle, 0.0);
        let DomainSpec::Polygon { vertices } = d2 else { panic!("expected polygon") };
        // Rotation by -pi/2 about (1, 0.5), then translation by (-1, -0.5): (x, y) -> (y - 0.5, 1 - x).
        let expected = [[-0.5, 1.0], [-0.5, -1.0], [1.5, -1.0], [1.5, 1.0]];
        for (v, e) in vertices.iter().zip(expected) {
            assert!(dist(*v, e) < 1e-14, "{v:?} vs {e:?}");
        }
    }

    #[test]
    fn polygon_validation() {
        let cw = DomainSpec::polygon(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]);
        assert!(cw.validate().is_err());
        let bow = DomainSpec::polygon(vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        assert!(bow.validate().is_err());
        let l_shape = DomainSpec::polygon(vec![
            [0.0, 0.0],
            [2.0, 0.0],
            [2.0, 1.0],
            [1.0, 1.0],
            [1.0, 2.0],
            [0.0, 2.0],
        ]);
        l_shape.validate().unwrap();
        let mesh = generate_mesh(&l_shape, None, &MeshParams::new(0.2)).unwrap();
        assert!((mesh.total_area() - 3.0).abs() < 1e-10);
    }

    #[test]
    fn text_round_trip() {
        let slit = SlitSpec::new([PI / 2.0, PI / 2.0], 0.2, 0.0);
        let mesh = generate_mesh(&square(), Some(&slit), &MeshParams::new(0.3)).unwrap();
        let back = Mesh::from_text(&mesh.to_text()).unwrap();
        assert_eq!(back.vertices, mesh.vertices);
        assert_eq!(back.triangles, mesh.triangles);
        assert_eq!(back.slit_nodes, mesh.slit_nodes);
        assert_eq!(back.boundary_nodes, mesh.boundary_nodes);
        assert!(Mesh::from_text("vertices 1 triangles 0\n0 0 bogus\n").is_err());
    }
}
