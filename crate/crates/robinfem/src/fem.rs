//! P1 Lagrange finite-element space on a labeled triangulation: boundary
//! arc bookkeeping in arclength, exact element assembly, constrained SPD
//! solves, interpolation and projection operators, and the quadrature
//! helpers shared by the forward solvers and the objective.
//!
//! Domain integrals of element-polynomial integrands use closed forms;
//! smooth integrands use a degree-4 triangle rule. Boundary integrals use
//! Gauss rules per edge, with edges split at coefficient breakpoints
//! first, so piecewise-constant weights are integrated exactly.

use crate::coeff::PiecewiseConstantBoundaryCoefficient;
use crate::mesh::{DomainSpec, SegmentLabel, TriMesh};
use crate::sparse::{CholeskyFactor, SparseOperator, SpdSolver};
use crate::{Error, Result};

/// Finite-element coefficient vector, one value per mesh vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct NodalFunction {
    pub values: Vec<f64>,
}

impl NodalFunction {
    pub fn zeros(n: usize) -> Self {
        NodalFunction { values: vec![0.0; n] }
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    /// self - other, componentwise.
    pub fn minus(&self, other: &NodalFunction) -> NodalFunction {
        debug_assert_eq!(self.len(), other.len());
        NodalFunction {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

impl From<Vec<f64>> for NodalFunction {
    fn from(values: Vec<f64>) -> Self {
        NodalFunction { values }
    }
}

/// Piecewise-linear function of boundary arclength, given by sorted node
/// arclengths and nodal values. Evaluation clamps outside the range.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryFunction {
    pub arclengths: Vec<f64>,
    pub values: Vec<f64>,
}

impl BoundaryFunction {
    pub fn new(arclengths: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if arclengths.len() != values.len() || arclengths.len() < 2 {
            return Err(Error::validation(
                "boundary function needs matching arclengths and values, at least two nodes",
            ));
        }
        if arclengths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation(
                "boundary function arclengths must be strictly increasing",
            ));
        }
        Ok(BoundaryFunction { arclengths, values })
    }

    pub fn eval(&self, s: f64) -> f64 {
        let k = self
            .arclengths
            .partition_point(|&a| a <= s)
            .clamp(1, self.arclengths.len() - 1);
        let (s0, s1) = (self.arclengths[k - 1], self.arclengths[k]);
        let t = ((s - s0) / (s1 - s0)).clamp(0.0, 1.0);
        self.values[k - 1] * (1.0 - t) + self.values[k] * t
    }

    pub fn start(&self) -> f64 {
        self.arclengths[0]
    }
    pub fn end(&self) -> f64 {
        *self.arclengths.last().unwrap()
    }

    /// Max-norm over the nodes (attained at nodes for piecewise linears).
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Which part of the boundary an operation acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArcSelector {
    /// The inaccessible arc (all GI labels).
    GammaI,
    /// The whole accessible boundary (GA and GAP edges).
    GammaA,
    /// The observation arc only.
    GammaAPrime,
    /// The accessible boundary minus the observation arc.
    GammaARest,
    /// Everything.
    WholeBoundary,
}

impl ArcSelector {
    fn matches(self, label: SegmentLabel) -> bool {
        match self {
            ArcSelector::GammaI => label.is_gamma_i(),
            ArcSelector::GammaA => label.is_gamma_a(),
            ArcSelector::GammaAPrime => label == SegmentLabel::GammaAPrime,
            ArcSelector::GammaARest => label == SegmentLabel::GammaA,
            ArcSelector::WholeBoundary => true,
        }
    }
}

/// Boundary edge with endpoint arclengths, oriented by increasing
/// arclength.
#[derive(Clone, Copy, Debug)]
pub struct ArcEdge {
    pub v: [usize; 2],
    pub s: [f64; 2],
    pub label: SegmentLabel,
}

/// One selectable portion of the boundary: its edges sorted by arclength
/// and its vertices (the closed arc, endpoints included).
#[derive(Clone, Debug, Default)]
pub struct ArcData {
    pub edges: Vec<ArcEdge>,
    /// Vertex dofs sorted by arclength.
    pub nodes: Vec<usize>,
    pub node_arclengths: Vec<f64>,
}

impl ArcData {
    pub fn start(&self) -> f64 {
        self.node_arclengths.first().copied().unwrap_or(0.0)
    }
    pub fn end(&self) -> f64 {
        self.node_arclengths.last().copied().unwrap_or(0.0)
    }
    pub fn length(&self) -> f64 {
        self.edges.iter().map(|e| e.s[1] - e.s[0]).sum()
    }
    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// P1 space on a labeled mesh. Vertex = dof. Boundary arc data are
/// recomputed from the geometry, so spaces built from deserialized meshes
/// carry identical arclength bookkeeping.
#[derive(Clone, Debug)]
pub struct FemSpace {
    pub mesh: TriMesh,
    pub domain: DomainSpec,
    gamma_i: ArcData,
    gamma_a: ArcData,
    gamma_a_prime: ArcData,
    gamma_a_rest: ArcData,
    whole: ArcData,
}

impl FemSpace {
    pub fn new(mesh: TriMesh, domain: DomainSpec) -> Result<FemSpace> {
        domain.validate()?;
        let per = domain.perimeter();
        let tol = 1e-9 * per.max(1.0);
        // Arclength of every boundary vertex.
        let mut vertex_s: Vec<Option<f64>> = vec![None; mesh.vertices.len()];
        for be in &mesh.boundary_edges {
            for &vi in &be.v {
                if vertex_s[vi].is_none() {
                    vertex_s[vi] = Some(domain.arclength_of_point(mesh.vertices[vi], tol).ok_or_else(
                        || Error::validation(format!("boundary vertex {vi} is off the boundary")),
                    )?);
                }
            }
        }
        let mut all_edges: Vec<ArcEdge> = Vec::with_capacity(mesh.boundary_edges.len());
        for be in &mesh.boundary_edges {
            let (a, b) = (be.v[0], be.v[1]);
            let mut sa = vertex_s[a].unwrap();
            let mut sb = vertex_s[b].unwrap();
            // The closing edge wraps through arclength 0; unwrap it.
            if (sa - sb).abs() > 0.5 * per {
                if sa < sb {
                    sa += per;
                } else {
                    sb += per;
                }
            }
            let (v, s) = if sa <= sb {
                ([a, b], [sa, sb])
            } else {
                ([b, a], [sb, sa])
            };
            let elen = {
                let pa = mesh.vertices[v[0]];
                let pb = mesh.vertices[v[1]];
                ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
            };
            if ((s[1] - s[0]) - elen).abs() > 10.0 * tol {
                return Err(Error::validation(format!(
                    "boundary edge {:?} spans arclength {} but has length {elen}",
                    v,
                    s[1] - s[0]
                )));
            }
            all_edges.push(ArcEdge { v, s, label: be.label });
        }
        all_edges.sort_by(|x, y| x.s[0].partial_cmp(&y.s[0]).unwrap().then(x.v[0].cmp(&y.v[0])));

        let build_arc = |sel: ArcSelector| -> ArcData {
            let edges: Vec<ArcEdge> = all_edges
                .iter()
                .copied()
                .filter(|e| sel.matches(e.label))
                .collect();
            let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(2 * edges.len());
            for e in &edges {
                pairs.push((e.s[0], e.v[0]));
                pairs.push((e.s[1], e.v[1]));
            }
            pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
            pairs.dedup_by_key(|p| p.1);
            ArcData {
                edges,
                nodes: pairs.iter().map(|p| p.1).collect(),
                node_arclengths: pairs.iter().map(|p| p.0).collect(),
            }
        };

        let space = FemSpace {
            gamma_i: build_arc(ArcSelector::GammaI),
            gamma_a: build_arc(ArcSelector::GammaA),
            gamma_a_prime: build_arc(ArcSelector::GammaAPrime),
            gamma_a_rest: build_arc(ArcSelector::GammaARest),
            whole: build_arc(ArcSelector::WholeBoundary),
            mesh,
            domain,
        };
        if space.gamma_i.is_empty() || space.gamma_a_prime.is_empty() {
            return Err(Error::validation(
                "mesh carries no inaccessible or no observation edges",
            ));
        }
        Ok(space)
    }

    pub fn dof_count(&self) -> usize {
        self.mesh.vertices.len()
    }

    pub fn arc(&self, sel: ArcSelector) -> &ArcData {
        match sel {
            ArcSelector::GammaI => &self.gamma_i,
            ArcSelector::GammaA => &self.gamma_a,
            ArcSelector::GammaAPrime => &self.gamma_a_prime,
            ArcSelector::GammaARest => &self.gamma_a_rest,
            ArcSelector::WholeBoundary => &self.whole,
        }
    }

    /// Dofs carrying Dirichlet data in an observation solve: every vertex
    /// of the closed observation arc, endpoints included.
    pub fn dirichlet_dofs(&self) -> &[usize] {
        &self.gamma_a_prime.nodes
    }

    /// Arclength of the inaccessible arc start; the coefficient's local
    /// coordinate is global arclength minus this.
    pub fn gamma_i_start(&self) -> f64 {
        self.gamma_i.start()
    }

    pub fn gamma_i_length(&self) -> f64 {
        self.gamma_i.length()
    }
}

// Degree-4 triangle rule: 6 points, weights sum to 1 (times area).
const TRI_Q: [([f64; 3], f64); 6] = {
    const A1: f64 = 0.445_948_490_915_965;
    const W1: f64 = 0.223_381_589_678_011;
    const A2: f64 = 0.091_576_213_509_771;
    const W2: f64 = 0.109_951_743_655_322;
    [
        ([1.0 - 2.0 * A1, A1, A1], W1),
        ([A1, 1.0 - 2.0 * A1, A1], W1),
        ([A1, A1, 1.0 - 2.0 * A1], W1),
        ([1.0 - 2.0 * A2, A2, A2], W2),
        ([A2, 1.0 - 2.0 * A2, A2], W2),
        ([A2, A2, 1.0 - 2.0 * A2], W2),
    ]
};

// Gauss rules on [0, 1], weights sum to 1.
const GAUSS2: [(f64, f64); 2] = [
    (0.211_324_865_405_187_1, 0.5),
    (0.788_675_134_594_812_9, 0.5),
];
pub(crate) const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_3, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

/// Triangle geometry used by assembly: area and constant P1 gradients.
fn p1_gradients(v: &[[f64; 2]], t: &[usize; 3]) -> Result<(f64, [[f64; 2]; 3])> {
    let [a, b, c] = [v[t[0]], v[t[1]], v[t[2]]];
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    if det <= 0.0 {
        return Err(Error::validation(
            "degenerate or negatively oriented triangle in assembly",
        ));
    }
    let area = 0.5 * det;
    let g = [
        [(b[1] - c[1]) / det, (c[0] - b[0]) / det],
        [(c[1] - a[1]) / det, (a[0] - c[0]) / det],
        [(a[1] - b[1]) / det, (b[0] - a[0]) / det],
    ];
    Ok((area, g))
}

/// Stiffness matrix: (i, j) entry = integral of grad phi_i . grad phi_j,
/// assembled exactly from the constant element gradients.
pub fn assemble_stiffness(space: &FemSpace) -> Result<SparseOperator> {
    let mut triplets = Vec::with_capacity(9 * space.mesh.triangles.len());
    for t in &space.mesh.triangles {
        let (area, g) = p1_gradients(&space.mesh.vertices, t)?;
        for i in 0..3 {
            for j in 0..3 {
                let kij = area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                triplets.push((t[i], t[j], kij));
            }
        }
    }
    SparseOperator::from_triplets(space.dof_count(), &triplets)
}

/// Domain mass matrix, exact P1 formula: per element area/6 on the
/// diagonal and area/12 off it.
pub fn assemble_domain_mass(space: &FemSpace) -> Result<SparseOperator> {
    let mut triplets = Vec::with_capacity(9 * space.mesh.triangles.len());
    for t in &space.mesh.triangles {
        let (area, _) = p1_gradients(&space.mesh.vertices, t)?;
        for i in 0..3 {
            for j in 0..3 {
                let m = if i == j { area / 6.0 } else { area / 12.0 };
                triplets.push((t[i], t[j], m));
            }
        }
    }
    SparseOperator::from_triplets(space.dof_count(), &triplets)
}

/// Shared kernel for boundary mass assembly: integrates w(s) phi_i phi_j
/// over the selected arc, splitting each edge at the given arclength cuts
/// before applying 2-point Gauss (exact for quadratics times a constant).
fn boundary_mass_with_weight(
    space: &FemSpace,
    sel: ArcSelector,
    cuts: &[f64],
    weight: &dyn Fn(f64) -> f64,
) -> Result<SparseOperator> {
    let arc = space.arc(sel);
    let mut triplets = Vec::with_capacity(4 * arc.edges.len());
    for e in &arc.edges {
        let (s0, s1) = (e.s[0], e.s[1]);
        let mut pieces = vec![s0];
        for &c in cuts {
            if c > s0 + 1e-15 && c < s1 - 1e-15 {
                pieces.push(c);
            }
        }
        pieces.push(s1);
        pieces.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut local = [[0.0f64; 2]; 2];
        for w in pieces.windows(2) {
            let len = w[1] - w[0];
            if len <= 0.0 {
                continue;
            }
            for &(gx, gw) in &GAUSS2 {
                let s = w[0] + gx * len;
                // Hat values on the edge in arclength.
                let l1 = (s - s0) / (s1 - s0);
                let l0 = 1.0 - l1;
                let wq = weight(s) * gw * len;
                local[0][0] += wq * l0 * l0;
                local[0][1] += wq * l0 * l1;
                local[1][0] += wq * l1 * l0;
                local[1][1] += wq * l1 * l1;
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                triplets.push((e.v[i], e.v[j], local[i][j]));
            }
        }
    }
    SparseOperator::from_triplets(space.dof_count(), &triplets)
}

/// Boundary mass matrix weighted by a piecewise-constant coefficient whose
/// local coordinate starts at the arc start. Edges straddling a
/// breakpoint are split there first, so the integration is exact.
pub fn assemble_boundary_mass(
    space: &FemSpace,
    sel: ArcSelector,
    q: &PiecewiseConstantBoundaryCoefficient,
) -> Result<SparseOperator> {
    let arc = space.arc(sel);
    let arc_len = arc.length();
    if (q.length - arc_len).abs() > 1e-9 * arc_len.max(1.0) {
        return Err(Error::validation(format!(
            "coefficient length {} does not match arc length {arc_len}",
            q.length
        )));
    }
    let start = arc.start();
    let cuts: Vec<f64> = q.breakpoints.iter().map(|b| b + start).collect();
    boundary_mass_with_weight(space, sel, &cuts, &|s| q.evaluate(s - start))
}

/// Unweighted boundary mass on an arc (the L2 inner product of traces).
pub fn assemble_arc_mass(space: &FemSpace, sel: ArcSelector) -> Result<SparseOperator> {
    boundary_mass_with_weight(space, sel, &[], &|_| 1.0)
}

/// Boundary load vector: entry i = integral of g phi_i over the selected
/// arc, 2-point Gauss per edge. `g` receives the arclength and the
/// physical point.
pub fn assemble_boundary_load(
    space: &FemSpace,
    sel: ArcSelector,
    g: &dyn Fn(f64, [f64; 2]) -> f64,
) -> Vec<f64> {
    let arc = space.arc(sel);
    let mut load = vec![0.0; space.dof_count()];
    for e in &arc.edges {
        let (s0, s1) = (e.s[0], e.s[1]);
        let len = s1 - s0;
        let p0 = space.mesh.vertices[e.v[0]];
        let p1 = space.mesh.vertices[e.v[1]];
        for &(gx, gw) in &GAUSS2 {
            let s = s0 + gx * len;
            let p = [p0[0] + gx * (p1[0] - p0[0]), p0[1] + gx * (p1[1] - p0[1])];
            let val = g(s, p) * gw * len;
            load[e.v[0]] += val * (1.0 - gx);
            load[e.v[1]] += val * gx;
        }
    }
    load
}

/// Boundary load with the edges split at the given arclength cuts before
/// quadrature, so integrands that are smooth between cuts (piecewise
/// polynomial data) are integrated exactly.
pub fn assemble_boundary_load_with_cuts(
    space: &FemSpace,
    sel: ArcSelector,
    cuts: &[f64],
    g: &dyn Fn(f64, [f64; 2]) -> f64,
) -> Vec<f64> {
    let arc = space.arc(sel);
    let mut load = vec![0.0; space.dof_count()];
    for e in &arc.edges {
        let (s0, s1) = (e.s[0], e.s[1]);
        let mut pieces = vec![s0];
        for &c in cuts {
            if c > s0 + 1e-15 && c < s1 - 1e-15 {
                pieces.push(c);
            }
        }
        pieces.push(s1);
        pieces.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p0 = space.mesh.vertices[e.v[0]];
        let p1 = space.mesh.vertices[e.v[1]];
        for w in pieces.windows(2) {
            let len = w[1] - w[0];
            for &(gx, gw) in &GAUSS2 {
                let s = w[0] + gx * len;
                let t = (s - s0) / (s1 - s0);
                let p = [p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])];
                let val = g(s, p) * gw * len;
                load[e.v[0]] += val * (1.0 - t);
                load[e.v[1]] += val * t;
            }
        }
    }
    load
}

/// Domain load vector: entry i = integral of f phi_i dx, degree-4 rule.
pub fn assemble_domain_load(space: &FemSpace, f: &dyn Fn([f64; 2]) -> f64) -> Result<Vec<f64>> {
    let mut load = vec![0.0; space.dof_count()];
    for t in &space.mesh.triangles {
        let (area, _) = p1_gradients(&space.mesh.vertices, t)?;
        let [a, b, c] = [
            space.mesh.vertices[t[0]],
            space.mesh.vertices[t[1]],
            space.mesh.vertices[t[2]],
        ];
        for &(lam, w) in &TRI_Q {
            let p = [
                lam[0] * a[0] + lam[1] * b[0] + lam[2] * c[0],
                lam[0] * a[1] + lam[1] * b[1] + lam[2] * c[1],
            ];
            let fv = f(p) * w * area;
            for i in 0..3 {
                load[t[i]] += fv * lam[i];
            }
        }
    }
    Ok(load)
}

/// SPD solver with a fixed constrained-dof set, eliminating constraints
/// symmetrically. The reduced operator is factored once and reused.
#[derive(Clone, Debug)]
pub struct ConstrainedSpdSolver {
    op: SparseOperator,
    constrained: Vec<usize>,
    free: Vec<usize>,
    reduced: Option<SpdSolver>,
}

impl ConstrainedSpdSolver {
    pub fn new(op: SparseOperator, constrained_dofs: &[usize]) -> Result<Self> {
        let n = op.n();
        let mut is_constrained = vec![false; n];
        for &d in constrained_dofs {
            if d >= n {
                return Err(Error::validation("constrained dof out of range"));
            }
            is_constrained[d] = true;
        }
        let mut constrained: Vec<usize> = constrained_dofs.to_vec();
        constrained.sort_unstable();
        constrained.dedup();
        let free: Vec<usize> = (0..n).filter(|&i| !is_constrained[i]).collect();
        let reduced = if free.is_empty() {
            None
        } else {
            Some(SpdSolver::new(op.restrict(&free)?)?)
        };
        Ok(ConstrainedSpdSolver { op, constrained, free, reduced })
    }

    pub fn constrained_dofs(&self) -> &[usize] {
        &self.constrained
    }

    /// Solve op x = rhs with x fixed to `values` (aligned with the sorted
    /// constrained-dof list) on the constrained set.
    pub fn solve(&self, rhs: &[f64], values: &[f64]) -> Result<NodalFunction> {
        let n = self.op.n();
        if rhs.len() != n || values.len() != self.constrained.len() {
            return Err(Error::validation("solve dimension mismatch"));
        }
        let mut x = vec![0.0; n];
        for (k, &d) in self.constrained.iter().enumerate() {
            x[d] = values[k];
        }
        match &self.reduced {
            None => Ok(NodalFunction { values: x }),
            Some(solver) => {
                let coupling = self.op.matvec(&x);
                let b: Vec<f64> = self.free.iter().map(|&i| rhs[i] - coupling[i]).collect();
                let y = solver.solve(&b)?;
                for (k, &i) in self.free.iter().enumerate() {
                    x[i] = y[k];
                }
                Ok(NodalFunction { values: x })
            }
        }
    }
}

/// One-shot constrained SPD solve; with `constraints = None` the full
/// system is solved. Constraint values align with the dof list as given.
pub fn solve_spd(
    op: &SparseOperator,
    rhs: &[f64],
    constraints: Option<(&[usize], &[f64])>,
) -> Result<NodalFunction> {
    match constraints {
        None => {
            let solver = SpdSolver::new(op.clone())?;
            Ok(NodalFunction { values: solver.solve(rhs)? })
        }
        Some((dofs, vals)) => {
            if dofs.len() != vals.len() {
                return Err(Error::validation("constraint dof/value length mismatch"));
            }
            // Align values with the solver's sorted dof order.
            let mut pairs: Vec<(usize, f64)> =
                dofs.iter().copied().zip(vals.iter().copied()).collect();
            pairs.sort_unstable_by_key(|p| p.0);
            pairs.dedup_by_key(|p| p.0);
            let solver =
                ConstrainedSpdSolver::new(op.clone(), &pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
            let sorted_vals: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            solver.solve(rhs, &sorted_vals)
        }
    }
}

/// Ritz projection onto the P1 space with respect to the bilinear form
/// (grad u, grad v) + (q u, v) on the inaccessible arc: solves the
/// variational identity with the right side evaluated from the smooth
/// function and its gradient by quadrature.
pub fn ritz_projection(
    space: &FemSpace,
    q: &PiecewiseConstantBoundaryCoefficient,
    v: &dyn Fn([f64; 2]) -> f64,
    grad_v: &dyn Fn([f64; 2]) -> [f64; 2],
) -> Result<NodalFunction> {
    let k = assemble_stiffness(space)?;
    let b = assemble_boundary_mass(space, ArcSelector::GammaI, q)?;
    let a = k.add_scaled(&b, 1.0)?;

    let mut rhs = vec![0.0; space.dof_count()];
    // Domain part: integral of grad v . grad phi_i.
    for t in &space.mesh.triangles {
        let (area, g) = p1_gradients(&space.mesh.vertices, t)?;
        let [pa, pb, pc] = [
            space.mesh.vertices[t[0]],
            space.mesh.vertices[t[1]],
            space.mesh.vertices[t[2]],
        ];
        for &(lam, w) in &TRI_Q {
            let p = [
                lam[0] * pa[0] + lam[1] * pb[0] + lam[2] * pc[0],
                lam[0] * pa[1] + lam[1] * pb[1] + lam[2] * pc[1],
            ];
            let gv = grad_v(p);
            for i in 0..3 {
                rhs[t[i]] += w * area * (gv[0] * g[i][0] + gv[1] * g[i][1]);
            }
        }
    }
    // Boundary part: integral of q v phi_i over the inaccessible arc,
    // edges split at breakpoints, 3-point Gauss per piece.
    let arc = space.arc(ArcSelector::GammaI);
    let start = arc.start();
    for e in &arc.edges {
        let (s0, s1) = (e.s[0], e.s[1]);
        let mut pieces = vec![s0];
        for &bp in &q.breakpoints {
            let c = bp + start;
            if c > s0 + 1e-15 && c < s1 - 1e-15 {
                pieces.push(c);
            }
        }
        pieces.push(s1);
        pieces.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p0 = space.mesh.vertices[e.v[0]];
        let p1 = space.mesh.vertices[e.v[1]];
        for w in pieces.windows(2) {
            let len = w[1] - w[0];
            for &(gx, gw) in &GAUSS3 {
                let s = w[0] + gx * len;
                let t = (s - s0) / (s1 - s0);
                let p = [p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])];
                let val = q.evaluate(s - start) * v(p) * gw * len;
                rhs[e.v[0]] += val * (1.0 - t);
                rhs[e.v[1]] += val * t;
            }
        }
    }
    solve_spd(&a, &rhs, None)
}

/// Nodal interpolation: coefficient i = v(vertex i).
pub fn lagrange_interpolate(space: &FemSpace, v: &dyn Fn([f64; 2]) -> f64) -> NodalFunction {
    NodalFunction {
        values: space.mesh.vertices.iter().map(|&p| v(p)).collect(),
    }
}

/// Values of a nodal function along an arc, as a function of arclength.
pub fn trace_on_segment(space: &FemSpace, u: &NodalFunction, sel: ArcSelector) -> Result<BoundaryFunction> {
    let arc = space.arc(sel);
    if arc.nodes.len() < 2 {
        return Err(Error::validation("arc has no edges to trace over"));
    }
    BoundaryFunction::new(
        arc.node_arclengths.clone(),
        arc.nodes.iter().map(|&d| u.values[d]).collect(),
    )
}

/// L2(arc)-orthogonal projection of a piecewise-linear function on a finer
/// partition of the same arc onto the coarse trace space. The mass matrix
/// and the load are integrated exactly on the merged grid.
pub fn boundary_l2_projection(
    space: &FemSpace,
    sel: ArcSelector,
    fine: &BoundaryFunction,
) -> Result<BoundaryFunction> {
    let arc = space.arc(sel);
    let coarse_s = &arc.node_arclengths;
    let m = coarse_s.len();
    if m < 2 {
        return Err(Error::validation("arc has no edges to project onto"));
    }
    let tol = 1e-9 * (arc.end() - arc.start()).max(1.0);
    if (fine.start() - arc.start()).abs() > tol || (fine.end() - arc.end()).abs() > tol {
        return Err(Error::validation(format!(
            "sample range [{}, {}] does not cover the arc [{}, {}]",
            fine.start(),
            fine.end(),
            arc.start(),
            arc.end()
        )));
    }

    // Tridiagonal mass matrix in arc-local numbering.
    let mut triplets = Vec::with_capacity(4 * (m - 1));
    for k in 0..m - 1 {
        let h = coarse_s[k + 1] - coarse_s[k];
        triplets.push((k, k, h / 3.0));
        triplets.push((k + 1, k + 1, h / 3.0));
        triplets.push((k, k + 1, h / 6.0));
        triplets.push((k + 1, k, h / 6.0));
    }
    let mass = SparseOperator::from_triplets(m, &triplets)?;

    // Load: integral of fine * coarse hat, exact via 2-point Gauss on the
    // merged partition (the integrand is quadratic on each cell).
    let mut grid: Vec<f64> = coarse_s
        .iter()
        .chain(fine.arclengths.iter())
        .copied()
        .collect();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup_by(|a, b| (*a - *b).abs() <= tol);
    let mut rhs = vec![0.0; m];
    for w in grid.windows(2) {
        let len = w[1] - w[0];
        if len <= 0.0 {
            continue;
        }
        // Coarse interval containing this cell.
        let k = coarse_s.partition_point(|&s| s <= w[0] + tol).clamp(1, m - 1) - 1;
        let (c0, c1) = (coarse_s[k], coarse_s[k + 1]);
        for &(gx, gw) in &GAUSS2 {
            let s = w[0] + gx * len;
            let t = (s - c0) / (c1 - c0);
            let f = fine.eval(s) * gw * len;
            rhs[k] += f * (1.0 - t);
            rhs[k + 1] += f * t;
        }
    }

    let identity: Vec<usize> = (0..m).collect();
    let values = CholeskyFactor::new(&mass, identity)?.solve(&rhs);
    BoundaryFunction::new(coarse_s.clone(), values)
}

/// L2(domain) distance between a nodal function and a smooth reference,
/// degree-4 quadrature per triangle.
pub fn l2_error(space: &FemSpace, u: &NodalFunction, v: &dyn Fn([f64; 2]) -> f64) -> Result<f64> {
    let mut acc = 0.0;
    for t in &space.mesh.triangles {
        let (area, _) = p1_gradients(&space.mesh.vertices, t)?;
        let [pa, pb, pc] = [
            space.mesh.vertices[t[0]],
            space.mesh.vertices[t[1]],
            space.mesh.vertices[t[2]],
        ];
        for &(lam, w) in &TRI_Q {
            let p = [
                lam[0] * pa[0] + lam[1] * pb[0] + lam[2] * pc[0],
                lam[0] * pa[1] + lam[1] * pb[1] + lam[2] * pc[1],
            ];
            let uh = lam[0] * u.values[t[0]] + lam[1] * u.values[t[1]] + lam[2] * u.values[t[2]];
            acc += w * area * (uh - v(p)).powi(2);
        }
    }
    Ok(acc.sqrt())
}

/// H1 seminorm distance between a nodal function and a smooth reference.
pub fn h1_seminorm_error(
    space: &FemSpace,
    u: &NodalFunction,
    grad_v: &dyn Fn([f64; 2]) -> [f64; 2],
) -> Result<f64> {
    let mut acc = 0.0;
    for t in &space.mesh.triangles {
        let (area, g) = p1_gradients(&space.mesh.vertices, t)?;
        let [pa, pb, pc] = [
            space.mesh.vertices[t[0]],
            space.mesh.vertices[t[1]],
            space.mesh.vertices[t[2]],
        ];
        let gu = [
            g[0][0] * u.values[t[0]] + g[1][0] * u.values[t[1]] + g[2][0] * u.values[t[2]],
            g[0][1] * u.values[t[0]] + g[1][1] * u.values[t[1]] + g[2][1] * u.values[t[2]],
        ];
        for &(lam, w) in &TRI_Q {
            let p = [
                lam[0] * pa[0] + lam[1] * pb[0] + lam[2] * pc[0],
                lam[0] * pa[1] + lam[1] * pb[1] + lam[2] * pc[1],
            ];
            let gv = grad_v(p);
            acc += w * area * ((gu[0] - gv[0]).powi(2) + (gu[1] - gv[1]).powi(2));
        }
    }
    Ok(acc.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::PiecewiseConstantBoundaryCoefficient as Coefficient;
    use crate::mesh::{build_square_domain, generate_graded_mesh, EdgeId, GammaAPrimeSpec, MeshSpec};

    fn square_space(h: f64) -> FemSpace {
        let domain = build_square_domain(EdgeId::Right, GammaAPrimeSpec::All).unwrap();
        let mesh = generate_graded_mesh(&domain, &MeshSpec::new(h, 1.0)).unwrap();
        FemSpace::new(mesh, domain).unwrap()
    }

    /// Single unit right triangle with the bottom edge inaccessible.
    fn unit_triangle_space() -> FemSpace {
        use crate::mesh::{BoundaryEdge, BoundarySegment, SegmentLabel, TriMesh};
        let polygon = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let hyp = 2.0f64.sqrt();
        let domain = DomainSpec {
            polygon: polygon.clone(),
            segments: vec![
                BoundarySegment { start: 0.0, end: 1.0, label: SegmentLabel::GammaI(0) },
                BoundarySegment {
                    start: 1.0,
                    end: 1.0 + hyp + 1.0,
                    label: SegmentLabel::GammaAPrime,
                },
            ],
            singular_vertices: vec![],
        };
        let mut mesh = TriMesh {
            vertices: polygon,
            triangles: vec![[0, 1, 2]],
            boundary_edges: vec![
                BoundaryEdge { v: [0, 1], label: SegmentLabel::GammaI(0) },
                BoundaryEdge { v: [1, 2], label: SegmentLabel::GammaAPrime },
                BoundaryEdge { v: [2, 0], label: SegmentLabel::GammaAPrime },
            ],
            vertex_labels: Vec::new(),
        };
        mesh.derive_vertex_labels();
        FemSpace::new(mesh, domain).unwrap()
    }

    #[test]
    fn stiffness_matches_hand_integration_on_unit_triangle() {
        let space = unit_triangle_space();
        let k = assemble_stiffness(&space).unwrap();
        let expect = [
            [1.0, -0.5, -0.5],
            [-0.5, 0.5, 0.0],
            [-0.5, 0.0, 0.5],
        ];
        for i in 0..3 {
            let mut row = [0.0; 3];
            for (j, v) in k.row(i) {
                row[j] += v;
            }
            for j in 0..3 {
                assert!((row[j] - expect[i][j]).abs() < 1e-15, "({i},{j})");
            }
        }
    }

    #[test]
    fn stiffness_rows_sum_to_zero_and_symmetric() {
        let space = square_space(0.25);
        let k = assemble_stiffness(&space).unwrap();
        let n = space.dof_count();
        let ones = vec![1.0; n];
        for (i, ri) in k.matvec(&ones).iter().enumerate() {
            assert!(ri.abs() < 1e-12, "row {i} sums to {ri}");
        }
        let x: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..n).map(|i| ((i * 5 + 1) % 13) as f64 - 6.0).collect();
        assert!((k.quadratic_form(&x, &y) - k.quadratic_form(&y, &x)).abs() < 1e-10);
    }

    #[test]
    fn domain_mass_matches_area_and_local_block() {
        let space = square_space(0.25);
        let m = assemble_domain_mass(&space).unwrap();
        let ones = vec![1.0; space.dof_count()];
        assert!((m.quadratic_form(&ones, &ones) - 4.0).abs() < 1e-12);

        let tri = unit_triangle_space();
        let mt = assemble_domain_mass(&tri).unwrap();
        for i in 0..3 {
            for (j, v) in mt.row(i) {
                let expect = if i == j { 1.0 / 12.0 } else { 1.0 / 24.0 };
                assert!((v - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn boundary_mass_integrates_piecewise_weight_exactly() {
        // Unit-length inaccessible edge, breakpoint at its midpoint.
        let space = unit_triangle_space();
        let q = Coefficient::new(vec![0.5], vec![1.0, 2.0], 1.0).unwrap();
        let b = assemble_boundary_mass(&space, ArcSelector::GammaI, &q).unwrap();
        // Hand integration over the two halves (hats 1-s and s):
        // B00 = 7/24 + 2/24, B01 = 1/12 + 2/12, B11 = 1/24 + 14/24.
        let expect = [[9.0 / 24.0, 3.0 / 12.0], [3.0 / 12.0, 15.0 / 24.0]];
        for i in 0..2 {
            let mut row = [0.0; 3];
            for (j, v) in b.row(i) {
                row[j] += v;
            }
            for j in 0..2 {
                assert!((row[j] - expect[i][j]).abs() < 1e-15, "({i},{j}): {}", row[j]);
            }
        }
        let ones = vec![1.0; 3];
        assert!((b.quadratic_form(&ones, &ones) - 1.5).abs() < 1e-15);

        // Uniform weight on the square: total = arc length.
        let sq = square_space(0.5);
        let qc = Coefficient::constant(1.0, 2.0);
        let bq = assemble_boundary_mass(&sq, ArcSelector::GammaI, &qc).unwrap();
        let ones = vec![1.0; sq.dof_count()];
        assert!((bq.quadratic_form(&ones, &ones) - 2.0).abs() < 1e-13);
    }

    #[test]
    fn single_edge_mass_block_is_classical() {
        let space = unit_triangle_space();
        let q = Coefficient::constant(1.0, 1.0);
        let b = assemble_boundary_mass(&space, ArcSelector::GammaI, &q).unwrap();
        let mut b00 = 0.0;
        let mut b01 = 0.0;
        for (j, v) in b.row(0) {
            if j == 0 {
                b00 = v;
            }
            if j == 1 {
                b01 = v;
            }
        }
        assert!((b00 - 1.0 / 3.0).abs() < 1e-15);
        assert!((b01 - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn boundary_load_integrates_polynomial_flux() {
        // Observation arc = top edge; g = 1 - x1^2 integrates to 4/3.
        let domain = build_square_domain(EdgeId::Right, GammaAPrimeSpec::Edge(EdgeId::Top)).unwrap();
        let mesh = generate_graded_mesh(&domain, &MeshSpec::new(0.25, 1.0)).unwrap();
        let space = FemSpace::new(mesh, domain).unwrap();
        let g = |_s: f64, p: [f64; 2]| 1.0 - p[0] * p[0];
        let top: f64 = assemble_boundary_load(&space, ArcSelector::GammaAPrime, &g)
            .iter()
            .sum();
        assert!((top - 4.0 / 3.0).abs() < 1e-12, "{top}");
        let zero: f64 = assemble_boundary_load(&space, ArcSelector::GammaA, &|_, _| 0.0)
            .iter()
            .sum();
        assert_eq!(zero, 0.0);
        // Accessible boundary: left edge gives 0, bottom gives 4/3.
        let all: f64 = assemble_boundary_load(&space, ArcSelector::GammaA, &g).iter().sum();
        assert!((all - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn solve_spd_hand_cases() {
        let op = SparseOperator::from_triplets(
            2,
            &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)],
        )
        .unwrap();
        let x = solve_spd(&op, &[3.0, 3.0], None).unwrap();
        assert!((x.values[0] - 1.0).abs() < 1e-12);
        assert!((x.values[1] - 1.0).abs() < 1e-12);
        // All dofs constrained: boundary values verbatim.
        let y = solve_spd(&op, &[0.0, 0.0], Some((&[1, 0], &[7.0, 5.0]))).unwrap();
        assert_eq!(y.values, vec![5.0, 7.0]);
    }

    #[test]
    fn constrained_laplace_reproduces_linears() {
        let space = square_space(0.25);
        let k = assemble_stiffness(&space).unwrap();
        let exact = |p: [f64; 2]| 1.5 + p[0] - 2.0 * p[1];
        let bnd = space.arc(ArcSelector::WholeBoundary);
        let vals: Vec<f64> = bnd
            .nodes
            .iter()
            .map(|&d| exact(space.mesh.vertices[d]))
            .collect();
        let rhs = vec![0.0; space.dof_count()];
        let u = solve_spd(&k, &rhs, Some((&bnd.nodes, &vals))).unwrap();
        let want = lagrange_interpolate(&space, &exact);
        for i in 0..space.dof_count() {
            assert!((u.values[i] - want.values[i]).abs() < 1e-10, "dof {i}");
        }
    }

    #[test]
    fn ritz_projection_fixes_the_discrete_space() {
        let space = square_space(0.5);
        let q = Coefficient::new(vec![0.7], vec![1.0, 3.0], 2.0).unwrap();
        let v = |p: [f64; 2]| 0.25 - 0.5 * p[0] + p[1];
        let gv = |_p: [f64; 2]| [-0.5, 1.0];
        let r = ritz_projection(&space, &q, &v, &gv).unwrap();
        let want = lagrange_interpolate(&space, &v);
        for i in 0..space.dof_count() {
            assert!((r.values[i] - want.values[i]).abs() < 1e-10, "dof {i}");
        }
    }

    #[test]
    fn interpolation_is_idempotent_and_nodal() {
        let space = square_space(0.5);
        let v = |p: [f64; 2]| (p[0] * 1.3).sin() + p[1] * p[1];
        let u = lagrange_interpolate(&space, &v);
        for (i, p) in space.mesh.vertices.iter().enumerate() {
            assert_eq!(u.values[i], v(*p));
        }
    }

    #[test]
    fn boundary_projection_reproduces_coarse_functions() {
        let space = square_space(0.5);
        let arc = space.arc(ArcSelector::GammaAPrime);
        // A coarse-representable piecewise-linear function.
        let coarse = BoundaryFunction::new(
            arc.node_arclengths.clone(),
            arc.node_arclengths.iter().map(|s| 2.0 * s - 1.0).collect(),
        )
        .unwrap();
        let p = boundary_l2_projection(&space, ArcSelector::GammaAPrime, &coarse).unwrap();
        for (a, b) in p.values.iter().zip(&coarse.values) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn boundary_projection_residual_is_orthogonal() {
        let space = square_space(0.5);
        let arc = space.arc(ArcSelector::GammaAPrime);
        // Fine sawtooth not representable on the coarse grid.
        let m = 4 * (arc.node_arclengths.len() - 1) + 1;
        let (s0, s1) = (arc.start(), arc.end());
        let fine_s: Vec<f64> = (0..m)
            .map(|k| s0 + (s1 - s0) * (k as f64) / ((m - 1) as f64))
            .collect();
        let fine_v: Vec<f64> = fine_s
            .iter()
            .map(|&s| (3.1 * s).sin() + 0.2 * ((13.0 * s).cos()))
            .collect();
        let fine = BoundaryFunction::new(fine_s, fine_v).unwrap();
        let proj = boundary_l2_projection(&space, ArcSelector::GammaAPrime, &fine).unwrap();

        // Residual inner product with every coarse hat, integrated on the
        // merged grid with 3-point Gauss (exact: integrands quadratic).
        let coarse_s = &arc.node_arclengths;
        let tol = 1e-12;
        let mut grid: Vec<f64> = coarse_s
            .iter()
            .chain(fine.arclengths.iter())
            .copied()
            .collect();
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        grid.dedup_by(|a, b| (*a - *b).abs() <= tol);
        let mut inner = vec![0.0; coarse_s.len()];
        for w in grid.windows(2) {
            let len = w[1] - w[0];
            let k = coarse_s
                .partition_point(|&s| s <= w[0] + tol)
                .clamp(1, coarse_s.len() - 1)
                - 1;
            let (c0, c1) = (coarse_s[k], coarse_s[k + 1]);
            for &(gx, gw) in &GAUSS3 {
                let s = w[0] + gx * len;
                let t = (s - c0) / (c1 - c0);
                let resid = fine.eval(s) - proj.eval(s);
                inner[k] += gw * len * resid * (1.0 - t);
                inner[k + 1] += gw * len * resid * t;
            }
        }
        for (k, v) in inner.iter().enumerate() {
            assert!(v.abs() < 1e-10, "hat {k}: {v}");
        }
    }

    #[test]
    fn robin_operator_is_positive_definite() {
        let space = square_space(0.5);
        let k = assemble_stiffness(&space).unwrap();
        let b = assemble_boundary_mass(
            &space,
            ArcSelector::GammaI,
            &Coefficient::new(vec![0.9], vec![0.1, 10.0], 2.0).unwrap(),
        )
        .unwrap();
        let a = k.add_scaled(&b, 1.0).unwrap();
        let n = space.dof_count();
        // Deterministic pseudo-random probe vectors.
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for probe in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| next()).collect();
            let norm2: f64 = x.iter().map(|v| v * v).sum();
            assert!(norm2 > 0.0);
            let rayleigh = a.quadratic_form(&x, &x) / norm2;
            assert!(rayleigh > 0.0, "probe {probe}: {rayleigh}");
        }
    }

    #[test]
    fn trace_interpolation_inequality_holds() {
        // ||v||_{L2(boundary)}^2 <= ||v||_{L2} * ||v||_{H1} on 50 random
        // nodal functions, all norms from assembled operators.
        let space = square_space(0.5);
        let k = assemble_stiffness(&space).unwrap();
        let m = assemble_domain_mass(&space).unwrap();
        let bnd = assemble_arc_mass(&space, ArcSelector::WholeBoundary).unwrap();
        let n = space.dof_count();
        let mut state = 42u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..50 {
            let x: Vec<f64> = (0..n).map(|_| next()).collect();
            let l2b = bnd.quadratic_form(&x, &x);
            let l2 = m.quadratic_form(&x, &x).sqrt();
            let h1 = (m.quadratic_form(&x, &x) + k.quadratic_form(&x, &x)).sqrt();
            assert!(l2b <= l2 * h1 * (1.0 + 1e-12), "{l2b} vs {}", l2 * h1);
        }
    }

    #[test]
    fn arc_bookkeeping_covers_the_square() {
        let space = square_space(0.5);
        assert!((space.gamma_i_length() - 2.0).abs() < 1e-12);
        assert!((space.arc(ArcSelector::GammaA).length() - 6.0).abs() < 1e-12);
        assert!((space.arc(ArcSelector::WholeBoundary).length() - 8.0).abs() < 1e-12);
        assert_eq!(space.gamma_i_start(), 0.0);
        // The observation arc is all of the accessible boundary here.
        assert_eq!(space.arc(ArcSelector::GammaARest).edges.len(), 0);
        assert_eq!(
            space.dirichlet_dofs().len(),
            space.arc(ArcSelector::GammaAPrime).nodes.len()
        );
        // Nodes are sorted by arclength and arclengths are consistent.
        let arc = space.arc(ArcSelector::GammaI);
        assert!(arc.node_arclengths.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(arc.start(), 0.0);
        assert!((arc.end() - 2.0).abs() < 1e-12);
    }
}
