//! Synthetic data generation on a finer mesh, Gaussian noise injection,
//! and transfer to the coarse observation space.
//!
//! The data mesh is the inversion mesh refined uniformly at least twice
//! (with the time step refined by the same factor in transient mode), so
//! reconstructions never invert the discretization that produced their
//! data. Randomness comes from SplitMix64, fixed forever for
//! reproducibility; normals use the cosine Box-Muller branch.

use crate::coeff::PiecewiseConstantBoundaryCoefficient;
use crate::elliptic::{solve_neumann_robin, trace_on_segment, EllipticProblemData};
use crate::fem::{boundary_l2_projection, ArcSelector, BoundaryFunction, FemSpace};
use crate::mesh::{generate_graded_mesh, refine_uniform, DomainSpec, MeshSpec};
use crate::parabolic::{build_initial_data, step_backward_euler, TimeGrid};
use crate::{Error, Result};

/// SplitMix64: 64-bit state, one additive constant, two xor-multiply
/// finalizer rounds. Stream for seed 0 starts e220a8397b1dcdaf,
/// 6e789e6aa1b965f4, 06c45d188009454f.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in (0, 1): the top 53 bits, offset half a ulp from zero.
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * 2f64.powi(-53)
    }

    /// Standard normal via Box-Muller (cosine branch; two uniforms per
    /// sample, no state carried between samples).
    pub fn next_standard_normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Relative noise level and generator seed.
#[derive(Clone, Copy, Debug)]
pub struct NoiseSpec {
    pub delta: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.delta.is_finite() || self.delta < 0.0 {
            return Err(Error::validation("noise level must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Forward model producing the exact observation trace.
pub enum DataModel<'a> {
    Elliptic,
    Parabolic {
        grid: TimeGrid,
        u0_source: &'a dyn Fn([f64; 2]) -> f64,
    },
}

impl DataModel<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            DataModel::Elliptic => "elliptic",
            DataModel::Parabolic { .. } => "parabolic",
        }
    }
}

/// Where a data bundle came from.
#[derive(Clone, Debug)]
pub struct DataProvenance {
    pub model: String,
    pub refinement_depth: usize,
    pub seed: u64,
    pub delta: f64,
}

/// Exact fine trace, its noisy projection onto the coarse observation
/// space, and the provenance needed to reproduce both.
#[derive(Clone, Debug)]
pub struct ObservedData {
    pub fine_trace: BoundaryFunction,
    pub coarse_projection: BoundaryFunction,
    pub provenance: DataProvenance,
}

/// Solves the forward model for the true coefficient on the base mesh
/// refined `refinement_depth` times (time step refined by the same
/// factor) and returns the observation-arc trace. Depth below 2 is
/// refused: data generated too close to the inversion mesh would let the
/// reconstruction invert its own discretization.
pub fn generate_exact_data(
    domain: &DomainSpec,
    base: &MeshSpec,
    q_dag: &PiecewiseConstantBoundaryCoefficient,
    flux: &dyn Fn(f64, [f64; 2]) -> f64,
    model: &DataModel,
    refinement_depth: usize,
) -> Result<BoundaryFunction> {
    if refinement_depth < 2 {
        return Err(Error::validation("data mesh must refine the inversion mesh at least twice"));
    }
    let mut mesh = generate_graded_mesh(domain, base)?;
    for _ in 0..refinement_depth {
        mesh = refine_uniform(&mesh);
    }
    let space = FemSpace::new(mesh, domain.clone())?;
    match model {
        DataModel::Elliptic => {
            let u = solve_neumann_robin(&space, q_dag, &EllipticProblemData::with_flux(flux))?;
            trace_on_segment(&space, &u, ArcSelector::GammaAPrime)
        }
        DataModel::Parabolic { grid, u0_source } => {
            let fine_grid = TimeGrid::new(grid.t_final, grid.steps << refinement_depth)?;
            let u0 = build_initial_data(&space, q_dag, u0_source, flux)?;
            let sol = step_backward_euler(&space, q_dag, flux, &u0, &fine_grid, false)?;
            trace_on_segment(&space, &sol.final_state, ArcSelector::GammaAPrime)
        }
    }
}

/// Perturbs each fine node value by delta times the max-norm of the trace
/// times an independent standard normal, drawn in increasing arclength
/// order. Zero delta returns the input bit for bit.
pub fn add_noise(f: &BoundaryFunction, spec: &NoiseSpec) -> Result<BoundaryFunction> {
    spec.validate()?;
    if spec.delta == 0.0 {
        return Ok(f.clone());
    }
    let amplitude = spec.delta * f.max_abs();
    let mut rng = SplitMix64::new(spec.seed);
    let values = f
        .values
        .iter()
        .map(|v| v + amplitude * rng.next_standard_normal())
        .collect();
    BoundaryFunction::new(f.arclengths.clone(), values)
}

/// Projects a fine observation-arc trace onto the coarse observation
/// space in the boundary L2 sense. The fine grid must contain every
/// coarse node (nested refinement).
pub fn transfer_to_coarse(z: &BoundaryFunction, space: &FemSpace) -> Result<BoundaryFunction> {
    let arc = space.arc(ArcSelector::GammaAPrime);
    let tol = 1e-9 * space.domain.perimeter().max(1.0);
    for &s in &arc.node_arclengths {
        let i = z.arclengths.partition_point(|&a| a < s - tol);
        let hit = z.arclengths.get(i).map_or(false, |&a| (a - s).abs() <= tol);
        if !hit {
            return Err(Error::validation(format!(
                "fine data grid is not nested: no fine node at arclength {s}"
            )));
        }
    }
    boundary_l2_projection(space, ArcSelector::GammaAPrime, z)
}

/// Full pipeline: exact fine trace, noise, and coarse projection.
pub fn observe(
    domain: &DomainSpec,
    base: &MeshSpec,
    q_dag: &PiecewiseConstantBoundaryCoefficient,
    flux: &dyn Fn(f64, [f64; 2]) -> f64,
    model: &DataModel,
    refinement_depth: usize,
    spec: &NoiseSpec,
    coarse_space: &FemSpace,
) -> Result<ObservedData> {
    let fine_trace = generate_exact_data(domain, base, q_dag, flux, model, refinement_depth)?;
    let noisy = add_noise(&fine_trace, spec)?;
    let coarse_projection = transfer_to_coarse(&noisy, coarse_space)?;
    Ok(ObservedData {
        fine_trace,
        coarse_projection,
        provenance: DataProvenance {
            model: model.name().to_string(),
            refinement_depth,
            seed: spec.seed,
            delta: spec.delta,
        },
    })
}

/// Exact L2 distance between two piecewise-linear boundary functions over
/// the intersection of their ranges, by Simpson's rule on the merged
/// grid (exact for the piecewise-quadratic integrand).
pub fn boundary_l2_distance(a: &BoundaryFunction, b: &BoundaryFunction) -> f64 {
    let lo = a.start().max(b.start());
    let hi = a.end().min(b.end());
    if hi <= lo {
        return 0.0;
    }
    let mut grid: Vec<f64> = a
        .arclengths
        .iter()
        .chain(b.arclengths.iter())
        .copied()
        .filter(|s| *s >= lo && *s <= hi)
        .collect();
    grid.push(lo);
    grid.push(hi);
    grid.sort_by(|x, y| x.partial_cmp(y).unwrap());
    grid.dedup_by(|x, y| (*x - *y).abs() <= f64::EPSILON * hi.abs().max(1.0));
    let mut acc = 0.0;
    for w in grid.windows(2) {
        let h = w[1] - w[0];
        if h <= 0.0 {
            continue;
        }
        let mid = 0.5 * (w[0] + w[1]);
        let d0 = a.eval(w[0]) - b.eval(w[0]);
        let dm = a.eval(mid) - b.eval(mid);
        let d1 = a.eval(w[1]) - b.eval(w[1]);
        acc += h / 6.0 * (d0 * d0 + 4.0 * dm * dm + d1 * d1);
    }
    acc.sqrt()
}

/// Serializes a data bundle in the `obsdata v1` format: a provenance
/// line, then arclength/value pairs for the exact fine trace and the
/// coarse projection.
pub fn write_text(data: &ObservedData) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "obsdata v1 model={} depth={} seed={} delta={:.16e}\n",
        data.provenance.model,
        data.provenance.refinement_depth,
        data.provenance.seed,
        data.provenance.delta
    ));
    for (name, f) in [("fine", &data.fine_trace), ("coarse", &data.coarse_projection)] {
        out.push_str(&format!("{name} {}\n", f.arclengths.len()));
        for (s, v) in f.arclengths.iter().zip(&f.values) {
            out.push_str(&format!("{s:.16e} {v:.16e}\n"));
        }
    }
    out
}

/// Parses the `obsdata v1` format written by `write_text`.
pub fn read_text(text: &str) -> Result<ObservedData> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::validation("empty observation file"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("obsdata") || parts.next() != Some("v1") {
        return Err(Error::validation("expected an obsdata v1 header"));
    }
    let mut model = String::new();
    let mut depth = 0usize;
    let mut seed = 0u64;
    let mut delta = 0.0f64;
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::validation(format!("malformed header field `{kv}`")))?;
        match k {
            "model" => model = v.to_string(),
            "depth" => {
                depth = v.parse().map_err(|_| Error::validation("bad depth"))?;
            }
            "seed" => seed = v.parse().map_err(|_| Error::validation("bad seed"))?,
            "delta" => delta = v.parse().map_err(|_| Error::validation("bad delta"))?,
            other => return Err(Error::validation(format!("unknown header field `{other}`"))),
        }
    }
    let mut read_block = |name: &str| -> Result<BoundaryFunction> {
        let head = lines
            .next()
            .ok_or_else(|| Error::validation(format!("missing `{name}` block")))?;
        let (tag, count) = head
            .split_once(' ')
            .ok_or_else(|| Error::validation("malformed block header"))?;
        if tag != name {
            return Err(Error::validation(format!("expected `{name}` block, found `{tag}`")));
        }
        let count: usize = count.parse().map_err(|_| Error::validation("bad node count"))?;
        let mut arclengths = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.next().ok_or_else(|| Error::validation("truncated block"))?;
            let mut it = line.split_whitespace();
            let s: f64 = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::validation("bad arclength"))?;
            let v: f64 = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::validation("bad value"))?;
            arclengths.push(s);
            values.push(v);
        }
        BoundaryFunction::new(arclengths, values)
    };
    let fine_trace = read_block("fine")?;
    let coarse_projection = read_block("coarse")?;
    Ok(ObservedData {
        fine_trace,
        coarse_projection,
        provenance: DataProvenance { model, refinement_depth: depth, seed, delta },
    })
}
