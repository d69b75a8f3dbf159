//! Convex polygonal domains with labeled boundary segments and conforming
//! triangulations graded toward designated singular vertices.
//!
//! Boundary bookkeeping convention: arclength starts at polygon vertex 0
//! and runs counterclockwise. The inaccessible arc always starts at
//! arclength 0 (builders rotate the polygon so this holds), so the
//! coefficient's local coordinate coincides with global arclength.
//!
//! Sizing rule: for every triangle T with distance d_T from its vertices to
//! the nearest singular vertex, diam(T) <= C * d_T^{1-r} * h when
//! d_T > h_*, and diam(T) <= C * h_* otherwise, with h_* = h^{1/r} and
//! C = 4 (loose enough that uniform meshes with r = 1 pass untouched).

use crate::{Error, Result};
use std::collections::{BTreeMap, HashMap};
use std::fmt;

/// Sizing-rule constant; uniform meshes with r = 1 satisfy the rule as is.
pub const SIZING_CONSTANT: f64 = 4.0;

/// Boundary segment classification. `GammaAPrime` marks the observation
/// sub-arc; it is still part of the accessible boundary, so "all of
/// Gamma_a" means the union of `GammaA` and `GammaAPrime` edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SegmentLabel {
    /// Inaccessible arc, by piece id.
    GammaI(u32),
    /// Accessible boundary outside the observation arc.
    GammaA,
    /// Observation sub-arc of the accessible boundary.
    GammaAPrime,
}

impl fmt::Display for SegmentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentLabel::GammaI(k) => write!(f, "GI{k}"),
            SegmentLabel::GammaA => write!(f, "GA"),
            SegmentLabel::GammaAPrime => write!(f, "GAP"),
        }
    }
}

impl SegmentLabel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "GA" => Ok(SegmentLabel::GammaA),
            "GAP" => Ok(SegmentLabel::GammaAPrime),
            _ => {
                if let Some(rest) = s.strip_prefix("GI") {
                    rest.parse::<u32>()
                        .map(SegmentLabel::GammaI)
                        .map_err(|_| Error::validation(format!("bad segment label {s:?}")))
                } else {
                    Err(Error::validation(format!("bad segment label {s:?}")))
                }
            }
        }
    }

    pub fn is_gamma_i(&self) -> bool {
        matches!(self, SegmentLabel::GammaI(_))
    }
    /// Part of the accessible boundary (flux side).
    pub fn is_gamma_a(&self) -> bool {
        matches!(self, SegmentLabel::GammaA | SegmentLabel::GammaAPrime)
    }
}

/// One labeled arc `[start, end]` of the boundary, in global arclength.
#[derive(Clone, Copy, Debug)]
pub struct BoundarySegment {
    pub start: f64,
    pub end: f64,
    pub label: SegmentLabel,
}

/// Convex polygon with a labeled partition of its boundary and the list of
/// vertices toward which meshes are graded.
#[derive(Clone, Debug)]
pub struct DomainSpec {
    /// Counterclockwise polygon vertices.
    pub polygon: Vec<[f64; 2]>,
    /// Labeled partition of the boundary, sorted by start arclength,
    /// covering [0, perimeter] with no gaps or overlaps.
    pub segments: Vec<BoundarySegment>,
    /// Points where the boundary-condition type changes; meshes shrink
    /// toward these.
    pub singular_vertices: Vec<[f64; 2]>,
}

/// Edge of the square (-1,1)^2, named in standard orientation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeId {
    Right,
    Top,
    Left,
    Bottom,
}

impl EdgeId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "right" => Ok(EdgeId::Right),
            "top" => Ok(EdgeId::Top),
            "left" => Ok(EdgeId::Left),
            "bottom" => Ok(EdgeId::Bottom),
            _ => Err(Error::validation(format!("unknown edge {s:?}"))),
        }
    }
    /// Index of the edge in counterclockwise order starting from Right.
    fn ccw_index(self) -> usize {
        match self {
            EdgeId::Right => 0,
            EdgeId::Top => 1,
            EdgeId::Left => 2,
            EdgeId::Bottom => 3,
        }
    }
}

/// Observation-arc request for [`build_square_domain`].
#[derive(Clone, Copy, Debug)]
pub enum GammaAPrimeSpec {
    /// The whole accessible boundary.
    All,
    /// One full edge of the square (must differ from the inaccessible one).
    Edge(EdgeId),
    /// Connected sub-arc in global arclength (inaccessible edge first).
    Arc { start: f64, end: f64 },
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl DomainSpec {
    pub fn perimeter(&self) -> f64 {
        let n = self.polygon.len();
        (0..n)
            .map(|i| dist(self.polygon[i], self.polygon[(i + 1) % n]))
            .sum()
    }

    pub fn area(&self) -> f64 {
        let n = self.polygon.len();
        let mut a = 0.0;
        for i in 0..n {
            let p = self.polygon[i];
            let q = self.polygon[(i + 1) % n];
            a += p[0] * q[1] - q[0] * p[1];
        }
        0.5 * a
    }

    /// Arclength of polygon vertex `i` (vertex 0 is 0).
    pub fn vertex_arclength(&self, i: usize) -> f64 {
        (0..i)
            .map(|k| dist(self.polygon[k], self.polygon[k + 1]))
            .sum()
    }

    /// Point at arclength `s` in [0, perimeter] (endpoints identified).
    pub fn point_at_arclength(&self, s: f64) -> [f64; 2] {
        let per = self.perimeter();
        let mut s = s.rem_euclid(per);
        let n = self.polygon.len();
        for i in 0..n {
            let a = self.polygon[i];
            let b = self.polygon[(i + 1) % n];
            let len = dist(a, b);
            if s <= len {
                let t = if len > 0.0 { s / len } else { 0.0 };
                return [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            }
            s -= len;
        }
        self.polygon[0]
    }

    /// Arclength of a point lying on the boundary polyline, within `tol`.
    pub fn arclength_of_point(&self, p: [f64; 2], tol: f64) -> Option<f64> {
        let n = self.polygon.len();
        let mut acc = 0.0;
        for i in 0..n {
            let a = self.polygon[i];
            let b = self.polygon[(i + 1) % n];
            let len = dist(a, b);
            if len > 0.0 {
                let t = ((p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1]))
                    / (len * len);
                if (-tol / len..=1.0 + tol / len).contains(&t) {
                    let proj = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                    if dist(p, proj) <= tol {
                        let s = acc + t.clamp(0.0, 1.0) * len;
                        return Some(if s >= self.perimeter() { 0.0 } else { s });
                    }
                }
            }
            acc += len;
        }
        None
    }

    /// Label of the segment containing arclength `s` (half-open pieces,
    /// the last segment closed at the perimeter).
    pub fn label_at(&self, s: f64) -> Option<SegmentLabel> {
        let per = self.perimeter();
        let s = s.rem_euclid(per);
        self.segments
            .iter()
            .find(|seg| s >= seg.start && (s < seg.end || (s <= seg.end && seg.end >= per)))
            .map(|seg| seg.label)
    }

    /// Total arclength of the inaccessible boundary.
    pub fn gamma_i_length(&self) -> f64 {
        self.segments
            .iter()
            .filter(|s| s.label.is_gamma_i())
            .map(|s| s.end - s.start)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.polygon.len();
        if n < 3 {
            return Err(Error::validation("polygon needs at least 3 vertices"));
        }
        // Convexity and counterclockwise orientation via cross products.
        for i in 0..n {
            let a = self.polygon[i];
            let b = self.polygon[(i + 1) % n];
            let c = self.polygon[(i + 2) % n];
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross <= 0.0 {
                return Err(Error::validation(
                    "polygon must be convex and counterclockwise",
                ));
            }
        }
        let per = self.perimeter();
        let tol = 1e-12 * per;
        // Segments partition [0, perimeter].
        let mut cursor = 0.0;
        for seg in &self.segments {
            if (seg.start - cursor).abs() > tol {
                return Err(Error::validation(format!(
                    "boundary segments leave a gap or overlap near arclength {cursor}"
                )));
            }
            if seg.end <= seg.start {
                return Err(Error::validation("empty boundary segment"));
            }
            cursor = seg.end;
        }
        if (cursor - per).abs() > tol {
            return Err(Error::validation("boundary segments do not close up"));
        }
        let has_gi = self.segments.iter().any(|s| s.label.is_gamma_i());
        let has_ga = self.segments.iter().any(|s| s.label.is_gamma_a());
        if !has_gi || !has_ga {
            return Err(Error::validation(
                "boundary needs both an inaccessible and an accessible part",
            ));
        }
        // The observation arc must be connected.
        let gap: Vec<&BoundarySegment> = self
            .segments
            .iter()
            .filter(|s| s.label == SegmentLabel::GammaAPrime)
            .collect();
        for w in gap.windows(2) {
            if (w[0].end - w[1].start).abs() > tol {
                return Err(Error::validation("observation arc is disconnected"));
            }
        }
        for sv in &self.singular_vertices {
            if self.arclength_of_point(*sv, 1e-9 * per.max(1.0)).is_none() {
                return Err(Error::validation(
                    "singular vertex does not lie on the boundary",
                ));
            }
        }
        Ok(())
    }
}

/// The square (-1,1)^2 with one edge inaccessible and an observation
/// sub-arc of the remaining three edges. Polygon vertices are rotated so
/// the inaccessible edge starts at arclength 0.
pub fn build_square_domain(
    gamma_i: EdgeId,
    gamma_a_prime: GammaAPrimeSpec,
) -> Result<DomainSpec> {
    // Square corners counterclockwise, starting at the start vertex of the
    // Right edge.
    let base = [[1.0, -1.0], [1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0]];
    let rot = gamma_i.ccw_index();
    let polygon: Vec<[f64; 2]> = (0..4).map(|k| base[(k + rot) % 4]).collect();
    let per = 8.0;

    // Observation arc in global arclength [2, 8].
    let (gs, ge) = match gamma_a_prime {
        GammaAPrimeSpec::All => (2.0, 8.0),
        GammaAPrimeSpec::Edge(e) => {
            if e == gamma_i {
                return Err(Error::validation(
                    "observation edge collides with the inaccessible edge",
                ));
            }
            // Edge k (in rotated order) spans [2k, 2k+2].
            let k = (e.ccw_index() + 4 - rot) % 4;
            (2.0 * k as f64, 2.0 * k as f64 + 2.0)
        }
        GammaAPrimeSpec::Arc { start, end } => (start, end),
    };
    if !(gs < ge) {
        return Err(Error::validation("observation arc is empty"));
    }
    if gs < 2.0 - 1e-12 || ge > per + 1e-12 {
        return Err(Error::validation(
            "observation arc must lie inside the accessible boundary [2, 8]",
        ));
    }
    let gs = gs.max(2.0);
    let ge = ge.min(per);

    let mut segments = vec![BoundarySegment {
        start: 0.0,
        end: 2.0,
        label: SegmentLabel::GammaI(0),
    }];
    if gs > 2.0 + 1e-12 {
        segments.push(BoundarySegment {
            start: 2.0,
            end: gs,
            label: SegmentLabel::GammaA,
        });
    }
    segments.push(BoundarySegment {
        start: gs,
        end: ge,
        label: SegmentLabel::GammaAPrime,
    });
    if ge < per - 1e-12 {
        segments.push(BoundarySegment {
            start: ge,
            end: per,
            label: SegmentLabel::GammaA,
        });
    }

    let domain_probe = DomainSpec {
        polygon: polygon.clone(),
        segments: segments.clone(),
        singular_vertices: vec![],
    };
    // Transition vertices: the two inaccessible/accessible corners, plus
    // the observation-arc endpoints when interior to the accessible part.
    let mut singular = vec![polygon[0], polygon[1]];
    for s in [gs, ge] {
        if s > 2.0 + 1e-12 && s < per - 1e-12 {
            singular.push(domain_probe.point_at_arclength(s));
        }
    }

    let domain = DomainSpec {
        polygon,
        segments,
        singular_vertices: singular,
    };
    domain.validate()?;
    Ok(domain)
}

/// Mesh sizing request.
#[derive(Clone, Copy, Debug)]
pub struct MeshSpec {
    /// Target global mesh size (edge length away from singular vertices).
    pub h: f64,
    /// Grading exponent in (0, 1]; r = 1 means uniform sizing.
    pub r: f64,
    /// Innermost element size; defaults to h^{1/r}.
    pub h_star: Option<f64>,
    /// Refinement budget for the grading loop.
    pub max_elements: usize,
}

impl MeshSpec {
    pub fn new(h: f64, r: f64) -> Self {
        MeshSpec {
            h,
            r,
            h_star: None,
            max_elements: 4_000_000,
        }
    }
    pub fn h_star(&self) -> f64 {
        self.h_star.unwrap_or_else(|| self.h.powf(1.0 / self.r))
    }
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h <= 1.0) {
            return Err(Error::validation("mesh size h must lie in (0, 1]"));
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::validation("grading exponent r must lie in (0, 1]"));
        }
        if self.h_star() > self.h * (1.0 + 1e-12) {
            return Err(Error::validation("h_star must not exceed h"));
        }
        Ok(())
    }
}

/// Boundary edge with its segment label. Vertex order is not significant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub v: [usize; 2],
    pub label: SegmentLabel,
}

/// Conforming triangulation with positively oriented triangles and labeled
/// boundary edges.
#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_edges: Vec<BoundaryEdge>,
    /// Per-vertex segment label for boundary vertices (None in the
    /// interior). A vertex shared by two segments takes the observation
    /// label first, then the inaccessible one, so constrained-dof sets
    /// cover closed arcs. Derived from `boundary_edges`.
    pub vertex_labels: Vec<Option<SegmentLabel>>,
}

fn tri_area(v: &[[f64; 2]], t: &[usize; 3]) -> f64 {
    let [a, b, c] = [v[t[0]], v[t[1]], v[t[2]]];
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
}

fn tri_diam(v: &[[f64; 2]], t: &[usize; 3]) -> f64 {
    dist(v[t[0]], v[t[1]])
        .max(dist(v[t[1]], v[t[2]]))
        .max(dist(v[t[2]], v[t[0]]))
}

impl TriMesh {
    pub fn triangle_area(&self, t: usize) -> f64 {
        tri_area(&self.vertices, &self.triangles[t])
    }
    pub fn triangle_diameter(&self, t: usize) -> f64 {
        tri_diam(&self.vertices, &self.triangles[t])
    }
    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Derive per-vertex labels from the boundary edges (GammaAPrime wins,
    /// then GammaI, then GammaA).
    pub fn derive_vertex_labels(&mut self) {
        let mut labels: Vec<Option<SegmentLabel>> = vec![None; self.vertices.len()];
        let rank = |l: SegmentLabel| match l {
            SegmentLabel::GammaAPrime => 2,
            SegmentLabel::GammaI(_) => 1,
            SegmentLabel::GammaA => 0,
        };
        for be in &self.boundary_edges {
            for &vi in &be.v {
                labels[vi] = match labels[vi] {
                    None => Some(be.label),
                    Some(old) if rank(be.label) > rank(old) => Some(be.label),
                    keep => keep,
                };
            }
        }
        self.vertex_labels = labels;
    }

    /// Plain-text serialization, 17 significant digits per coordinate.
    pub fn write_text(&self) -> String {
        let mut out = String::from("trimesh v1\n");
        out.push_str(&format!("{}\n", self.vertices.len()));
        for v in &self.vertices {
            out.push_str(&format!("{:.16e} {:.16e}\n", v[0], v[1]));
        }
        out.push_str(&format!("{}\n", self.triangles.len()));
        for t in &self.triangles {
            out.push_str(&format!("{} {} {}\n", t[0], t[1], t[2]));
        }
        out.push_str(&format!("{}\n", self.boundary_edges.len()));
        for e in &self.boundary_edges {
            out.push_str(&format!("{} {} {}\n", e.v[0], e.v[1], e.label));
        }
        out
    }

    pub fn read_text(text: &str) -> Result<TriMesh> {
        let mut lines = text.lines();
        let mut next = || {
            lines
                .next()
                .ok_or_else(|| Error::validation("truncated mesh file"))
        };
        let header = next()?;
        if header.trim() != "trimesh v1" {
            return Err(Error::validation("expected header `trimesh v1`"));
        }
        let parse_count = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::validation(format!("bad count line {s:?}")))
        };
        let nv = parse_count(next()?)?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let line = next()?;
            let mut it = line.split_whitespace();
            let x = it
                .next()
                .and_then(|t| t.parse::<f64>().ok())
                .ok_or_else(|| Error::validation(format!("bad vertex line {line:?}")))?;
            let y = it
                .next()
                .and_then(|t| t.parse::<f64>().ok())
                .ok_or_else(|| Error::validation(format!("bad vertex line {line:?}")))?;
            vertices.push([x, y]);
        }
        let nt = parse_count(next()?)?;
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let line = next()?;
            let mut it = line.split_whitespace();
            let mut t = [0usize; 3];
            for slot in &mut t {
                *slot = it
                    .next()
                    .and_then(|x| x.parse::<usize>().ok())
                    .filter(|&i| i < nv)
                    .ok_or_else(|| Error::validation(format!("bad triangle line {line:?}")))?;
            }
            triangles.push(t);
        }
        let ne = parse_count(next()?)?;
        let mut boundary_edges = Vec::with_capacity(ne);
        for _ in 0..ne {
            let line = next()?;
            let mut it = line.split_whitespace();
            let mut v = [0usize; 2];
            for slot in &mut v {
                *slot = it
                    .next()
                    .and_then(|x| x.parse::<usize>().ok())
                    .filter(|&i| i < nv)
                    .ok_or_else(|| Error::validation(format!("bad edge line {line:?}")))?;
            }
            let label = SegmentLabel::parse(
                it.next()
                    .ok_or_else(|| Error::validation(format!("bad edge line {line:?}")))?,
            )?;
            boundary_edges.push(BoundaryEdge { v, label });
        }
        let mut mesh = TriMesh {
            vertices,
            triangles,
            boundary_edges,
            vertex_labels: Vec::new(),
        };
        mesh.derive_vertex_labels();
        Ok(mesh)
    }
}

/// Mutable mesh used during generation: triangles are never edited in
/// place, a split marks the parent dead and appends children, so indices
/// stay stable and the whole construction is deterministic.
struct WorkMesh {
    vertices: Vec<[f64; 2]>,
    tris: Vec<[usize; 3]>,
    dead: Vec<bool>,
    /// Sorted vertex pair -> incident live triangles (1 or 2).
    edge_tris: HashMap<(usize, usize), Vec<usize>>,
    /// Sorted vertex pair -> label, for boundary edges only.
    boundary: BTreeMap<(usize, usize), SegmentLabel>,
    /// Midpoint cache so shared edges split once.
    midpoints: BTreeMap<(usize, usize), usize>,
}

fn key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl WorkMesh {
    fn new(vertices: Vec<[f64; 2]>, tris: Vec<[usize; 3]>) -> Self {
        let mut wm = WorkMesh {
            dead: vec![false; tris.len()],
            edge_tris: HashMap::new(),
            boundary: BTreeMap::new(),
            midpoints: BTreeMap::new(),
            vertices,
            tris,
        };
        for t in 0..wm.tris.len() {
            wm.link(t);
        }
        wm
    }

    fn link(&mut self, t: usize) {
        let tri = self.tris[t];
        for k in 0..3 {
            let e = key(tri[k], tri[(k + 1) % 3]);
            self.edge_tris.entry(e).or_default().push(t);
        }
    }

    fn unlink(&mut self, t: usize) {
        let tri = self.tris[t];
        for k in 0..3 {
            let e = key(tri[k], tri[(k + 1) % 3]);
            if let Some(v) = self.edge_tris.get_mut(&e) {
                v.retain(|&x| x != t);
                if v.is_empty() {
                    self.edge_tris.remove(&e);
                }
            }
        }
    }

    fn neighbor_across(&self, t: usize, e: (usize, usize)) -> Option<usize> {
        self.edge_tris
            .get(&e)?
            .iter()
            .copied()
            .find(|&x| x != t && !self.dead[x])
    }

    fn longest_edge(&self, t: usize) -> (usize, usize) {
        let tri = self.tris[t];
        let mut best = key(tri[0], tri[1]);
        let mut best_len = dist(self.vertices[tri[0]], self.vertices[tri[1]]);
        for k in 1..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            let len = dist(self.vertices[a], self.vertices[b]);
            let cand = key(a, b);
            // Deterministic tie-break on the sorted index pair.
            if len > best_len * (1.0 + 1e-14) || ((len - best_len).abs() <= 1e-14 * best_len && cand < best)
            {
                best = cand;
                best_len = len;
            }
        }
        best
    }

    fn point_on_edge(&mut self, e: (usize, usize), p: [f64; 2]) -> usize {
        if let Some(&m) = self.midpoints.get(&e) {
            return m;
        }
        let m = self.vertices.len();
        self.vertices.push(p);
        self.midpoints.insert(e, m);
        m
    }

    /// Split triangle `t` by inserting vertex `m` on edge `e`. The caller
    /// guarantees m lies on e strictly between its endpoints.
    fn split_one(&mut self, t: usize, e: (usize, usize), m: usize) {
        let tri = self.tris[t];
        // Rotate so tri = (u, v, w) with {u, v} = e, preserving orientation.
        let (u, v, w) = if key(tri[0], tri[1]) == e {
            (tri[0], tri[1], tri[2])
        } else if key(tri[1], tri[2]) == e {
            (tri[1], tri[2], tri[0])
        } else {
            (tri[2], tri[0], tri[1])
        };
        self.unlink(t);
        self.dead[t] = true;
        let c1 = self.tris.len();
        self.tris.push([u, m, w]);
        self.dead.push(false);
        self.link(c1);
        let c2 = self.tris.len();
        self.tris.push([m, v, w]);
        self.dead.push(false);
        self.link(c2);
    }

    /// Split the (1 or 2) triangles sharing edge `e` at point `p`,
    /// updating boundary labels when `e` is a boundary edge.
    fn split_edge_at(&mut self, e: (usize, usize), p: [f64; 2]) -> usize {
        let m = self.point_on_edge(e, p);
        let incident: Vec<usize> = self
            .edge_tris
            .get(&e)
            .map(|v| v.iter().copied().filter(|&t| !self.dead[t]).collect())
            .unwrap_or_default();
        for t in incident {
            self.split_one(t, e, m);
        }
        if let Some(label) = self.boundary.remove(&e) {
            self.boundary.insert(key(e.0, m), label);
            self.boundary.insert(key(m, e.1), label);
        }
        m
    }

    /// One conformal longest-edge bisection of triangle `t0` (recursive
    /// propagation realized with an explicit walk).
    fn bisect_conformal(&mut self, t0: usize) {
        while !self.dead[t0] {
            let mut a = t0;
            loop {
                let e = self.longest_edge(a);
                match self.neighbor_across(a, e) {
                    None => {
                        let p = self.edge_midpoint(e);
                        self.split_edge_at(e, p);
                        break;
                    }
                    Some(b) => {
                        if self.longest_edge(b) == e {
                            let p = self.edge_midpoint(e);
                            self.split_edge_at(e, p);
                            break;
                        }
                        a = b;
                    }
                }
            }
        }
    }

    fn edge_midpoint(&self, e: (usize, usize)) -> [f64; 2] {
        let a = self.vertices[e.0];
        let b = self.vertices[e.1];
        [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
    }

    fn live_count(&self) -> usize {
        self.dead.iter().filter(|d| !**d).count()
    }

    fn into_trimesh(self) -> TriMesh {
        let triangles: Vec<[usize; 3]> = self
            .tris
            .iter()
            .zip(&self.dead)
            .filter(|(_, d)| !**d)
            .map(|(t, _)| *t)
            .collect();
        let boundary_edges: Vec<BoundaryEdge> = self
            .boundary
            .iter()
            .map(|(&(a, b), &label)| BoundaryEdge { v: [a, b], label })
            .collect();
        let mut mesh = TriMesh {
            vertices: self.vertices,
            triangles,
            boundary_edges,
            vertex_labels: Vec::new(),
        };
        mesh.derive_vertex_labels();
        mesh
    }
}

fn is_axis_aligned_rectangle(poly: &[[f64; 2]]) -> bool {
    if poly.len() != 4 {
        return false;
    }
    (0..4).all(|i| {
        let a = poly[i];
        let b = poly[(i + 1) % 4];
        a[0] == b[0] || a[1] == b[1]
    })
}

/// Sizing predicate of the grading rule for one triangle.
fn sizing_ok(v: &[[f64; 2]], t: &[usize; 3], singular: &[[f64; 2]], spec: &MeshSpec) -> bool {
    let diam = tri_diam(v, t);
    let h_star = spec.h_star();
    if singular.is_empty() {
        return diam <= SIZING_CONSTANT * spec.h * (1.0 + 1e-12);
    }
    let d_t = t
        .iter()
        .map(|&vi| {
            singular
                .iter()
                .map(|s| dist(v[vi], *s))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min);
    let bound = if d_t > h_star {
        SIZING_CONSTANT * d_t.powf(1.0 - spec.r) * spec.h
    } else {
        SIZING_CONSTANT * h_star
    };
    diam <= bound * (1.0 + 1e-12)
}

/// Triangulate the domain: structured base mesh (grid for rectangles, fan
/// plus uniform refinement otherwise), boundary vertices inserted at
/// segment transitions, labels assigned, then iterated conformal
/// longest-edge bisection of every triangle violating the sizing rule.
/// Deterministic: identical inputs produce bit-identical meshes.
pub fn generate_graded_mesh(domain: &DomainSpec, spec: &MeshSpec) -> Result<TriMesh> {
    domain.validate()?;
    spec.validate()?;

    let (vertices, tris) = if is_axis_aligned_rectangle(&domain.polygon) {
        structured_rectangle(&domain.polygon, spec.h)
    } else {
        fan_base(&domain.polygon, spec.h)
    };
    let mut wm = WorkMesh::new(vertices, tris);

    // Boundary edges of the base mesh: every edge with exactly one
    // incident triangle; labels assigned after transition insertion.
    let boundary_keys: Vec<(usize, usize)> = {
        let mut keys: Vec<_> = wm
            .edge_tris
            .iter()
            .filter(|(_, ts)| ts.len() == 1)
            .map(|(&e, _)| e)
            .collect();
        keys.sort_unstable();
        keys
    };
    for e in boundary_keys {
        // Placeholder label, rewritten below.
        wm.boundary.insert(e, SegmentLabel::GammaA);
    }

    // Segment transition points must be mesh vertices so every boundary
    // edge carries a single label.
    let per = domain.perimeter();
    let tol = 1e-9 * per;
    let mut transitions: Vec<f64> = domain.segments.iter().map(|s| s.start).collect();
    transitions.push(per);
    for s in transitions {
        let p = domain.point_at_arclength(s);
        let exists = wm.vertices.iter().any(|v| dist(*v, p) <= tol);
        if exists {
            continue;
        }
        let edge = wm
            .boundary
            .keys()
            .copied()
            .find(|&(a, b)| {
                let pa = wm.vertices[a];
                let pb = wm.vertices[b];
                let len = dist(pa, pb);
                (dist(pa, p) + dist(p, pb) - len).abs() <= tol && dist(pa, p) > tol && dist(pb, p) > tol
            })
            .ok_or_else(|| {
                Error::validation(format!(
                    "no boundary edge contains the segment transition at arclength {s}"
                ))
            })?;
        wm.split_edge_at(edge, p);
    }

    // Label boundary edges by midpoint arclength.
    relabel_boundary(&mut wm, domain)?;

    // Grading: bisect violators until the sizing rule holds everywhere.
    loop {
        let violators: Vec<usize> = (0..wm.tris.len())
            .filter(|&t| !wm.dead[t] && !sizing_ok(&wm.vertices, &wm.tris[t], &domain.singular_vertices, spec))
            .collect();
        if violators.is_empty() {
            break;
        }
        if wm.live_count() + 2 * violators.len() > spec.max_elements {
            return Err(Error::validation(format!(
                "grading exceeds the {}-element budget",
                spec.max_elements
            )));
        }
        for t in violators {
            if !wm.dead[t] {
                wm.bisect_conformal(t);
            }
        }
    }
    relabel_boundary(&mut wm, domain)?;

    Ok(wm.into_trimesh())
}

fn relabel_boundary(wm: &mut WorkMesh, domain: &DomainSpec) -> Result<()> {
    let per = domain.perimeter();
    let tol = 1e-9 * per.max(1.0);
    let keys: Vec<(usize, usize)> = wm.boundary.keys().copied().collect();
    for e in keys {
        let mid = wm.edge_midpoint(e);
        let s = domain
            .arclength_of_point(mid, tol)
            .ok_or_else(|| Error::validation("boundary edge midpoint off the boundary"))?;
        let label = domain
            .label_at(s)
            .ok_or_else(|| Error::validation("no segment covers a boundary edge"))?;
        wm.boundary.insert(e, label);
    }
    Ok(())
}

fn structured_rectangle(poly: &[[f64; 2]], h: f64) -> (Vec<[f64; 2]>, Vec<[usize; 3]>) {
    let xs: Vec<f64> = poly.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = poly.iter().map(|p| p[1]).collect();
    let (x0, x1) = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = (ys.iter().cloned().fold(f64::INFINITY, f64::min), ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let nx = (((x1 - x0) / h).round() as usize).max(1);
    let ny = (((y1 - y0) / h).round() as usize).max(1);
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = x0 + (x1 - x0) * (i as f64) / (nx as f64);
            let y = y0 + (y1 - y0) * (j as f64) / (ny as f64);
            vertices.push([x, y]);
        }
    }
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut tris = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            tris.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            tris.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    (vertices, tris)
}

fn fan_base(poly: &[[f64; 2]], h: f64) -> (Vec<[f64; 2]>, Vec<[usize; 3]>) {
    let mut vertices: Vec<[f64; 2]> = poly.to_vec();
    let n = poly.len();
    let cx = poly.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let cy = poly.iter().map(|p| p[1]).sum::<f64>() / n as f64;
    let c = vertices.len();
    vertices.push([cx, cy]);
    let mut tris: Vec<[usize; 3]> = (0..n).map(|k| [c, k, (k + 1) % n]).collect();
    // Uniform refinement until every edge is at most h.
    loop {
        let max_diam = tris
            .iter()
            .map(|t| tri_diam(&vertices, t))
            .fold(0.0f64, f64::max);
        if max_diam <= h {
            break;
        }
        let refined = refine_uniform(&TriMesh {
            vertices: vertices.clone(),
            triangles: tris.clone(),
            boundary_edges: Vec::new(),
            vertex_labels: Vec::new(),
        });
        vertices = refined.vertices;
        tris = refined.triangles;
    }
    (vertices, tris)
}

/// Red refinement: each triangle splits into 4 congruent children through
/// its edge midpoints; boundary labels are inherited by both halves.
pub fn refine_uniform(mesh: &TriMesh) -> TriMesh {
    let mut vertices = mesh.vertices.clone();
    let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut mid = |a: usize, b: usize, vertices: &mut Vec<[f64; 2]>| -> usize {
        let e = key(a, b);
        if let Some(&m) = midpoint.get(&e) {
            return m;
        }
        let pa = vertices[a];
        let pb = vertices[b];
        let m = vertices.len();
        vertices.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
        midpoint.insert(e, m);
        m
    };
    let mut triangles = Vec::with_capacity(4 * mesh.triangles.len());
    for t in &mesh.triangles {
        let [a, b, c] = *t;
        let mab = mid(a, b, &mut vertices);
        let mbc = mid(b, c, &mut vertices);
        let mca = mid(c, a, &mut vertices);
        triangles.push([a, mab, mca]);
        triangles.push([b, mbc, mab]);
        triangles.push([c, mca, mbc]);
        triangles.push([mab, mbc, mca]);
    }
    let mut boundary_edges = Vec::with_capacity(2 * mesh.boundary_edges.len());
    for be in &mesh.boundary_edges {
        let [a, b] = be.v;
        let m = mid(a, b, &mut vertices);
        boundary_edges.push(BoundaryEdge { v: [a, m], label: be.label });
        boundary_edges.push(BoundaryEdge { v: [m, b], label: be.label });
    }
    let mut out = TriMesh {
        vertices,
        triangles,
        boundary_edges,
        vertex_labels: Vec::new(),
    };
    out.derive_vertex_labels();
    out
}

/// Diagnostic report of [`validate_mesh`]; empty iff every invariant holds.
#[derive(Clone, Debug, Default)]
pub struct MeshReport {
    pub violations: Vec<String>,
}

impl MeshReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check every mesh invariant: positive orientation, edge-manifoldness,
/// boundary reproduction and labeling, area conservation, vertex flags,
/// and the grading sizing rule.
pub fn validate_mesh(mesh: &TriMesh, domain: &DomainSpec, spec: &MeshSpec) -> MeshReport {
    let mut rep = MeshReport::default();
    let per = domain.perimeter();
    let tol = 1e-9 * per.max(1.0);

    for (i, t) in mesh.triangles.iter().enumerate() {
        if tri_area(&mesh.vertices, t) <= 0.0 {
            rep.violations
                .push(format!("triangle {i} is degenerate or negatively oriented"));
        }
    }

    // Edge usage counts.
    let mut usage: HashMap<(usize, usize), usize> = HashMap::new();
    for t in &mesh.triangles {
        for k in 0..3 {
            *usage.entry(key(t[k], t[(k + 1) % 3])).or_insert(0) += 1;
        }
    }
    let boundary_set: HashMap<(usize, usize), SegmentLabel> = mesh
        .boundary_edges
        .iter()
        .map(|be| (key(be.v[0], be.v[1]), be.label))
        .collect();
    let mut sorted_edges: Vec<(&(usize, usize), &usize)> = usage.iter().collect();
    sorted_edges.sort_unstable();
    for (&e, &count) in sorted_edges {
        match count {
            1 => {
                if !boundary_set.contains_key(&e) {
                    rep.violations
                        .push(format!("edge {e:?} is used once but carries no boundary label"));
                }
            }
            2 => {
                if boundary_set.contains_key(&e) {
                    rep.violations
                        .push(format!("interior edge {e:?} is labeled as boundary"));
                }
            }
            n => rep
                .violations
                .push(format!("edge {e:?} is shared by {n} triangles")),
        }
    }
    for be in &mesh.boundary_edges {
        if usage.get(&key(be.v[0], be.v[1])).copied() != Some(1) {
            rep.violations
                .push(format!("boundary edge {:?} is not a mesh boundary edge", be.v));
        }
    }

    // Boundary edges reproduce the polygon boundary: each edge lies on it,
    // its label covers its midpoint, and the lengths sum to the perimeter.
    let mut blen = 0.0;
    for be in &mesh.boundary_edges {
        let a = mesh.vertices[be.v[0]];
        let b = mesh.vertices[be.v[1]];
        blen += dist(a, b);
        let mid = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
        match domain.arclength_of_point(mid, tol) {
            None => rep
                .violations
                .push(format!("boundary edge {:?} lies off the domain boundary", be.v)),
            Some(s) => {
                if domain.label_at(s) != Some(be.label) {
                    rep.violations.push(format!(
                        "boundary edge {:?} labeled {} but lies on {:?}",
                        be.v,
                        be.label,
                        domain.label_at(s)
                    ));
                }
            }
        }
    }
    if (blen - per).abs() > 1e-9 * per {
        rep.violations.push(format!(
            "boundary edges cover arclength {blen} of the {per} perimeter"
        ));
    }

    let area = mesh.total_area();
    if (area - domain.area()).abs() > 1e-12 * domain.area() {
        rep.violations.push(format!(
            "triangle areas sum to {area}, polygon area is {}",
            domain.area()
        ));
    }

    // Vertex labels match the derivation rule.
    let mut expect = mesh.clone();
    expect.derive_vertex_labels();
    if expect.vertex_labels != mesh.vertex_labels {
        rep.violations.push("vertex labels are inconsistent".into());
    }

    for (i, t) in mesh.triangles.iter().enumerate() {
        if !sizing_ok(&mesh.vertices, t, &domain.singular_vertices, spec) {
            rep.violations.push(format!(
                "triangle {i} violates the sizing rule (diam {})",
                tri_diam(&mesh.vertices, t)
            ));
        }
    }

    rep
}
