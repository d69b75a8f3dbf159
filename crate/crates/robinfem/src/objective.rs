//! Kohn-Vogelius misfit between the Neumann-Robin and Dirichlet-Robin
//! states, together with exact adjoint gradients of the fully discrete
//! functional with respect to piece values and breakpoint positions.
//!
//! Gradients differentiate the assembled discrete map, not the continuous
//! formulas: each forward solve contributes the transpose of its own
//! system, so central finite differences on the discrete functional must
//! agree to near machine precision. That match is the load-bearing test
//! of this module.

use crate::coeff::PiecewiseConstantBoundaryCoefficient;
use crate::elliptic::dirichlet_values_sorted;
use crate::fem::{
    assemble_boundary_load, assemble_boundary_mass, assemble_domain_mass, assemble_stiffness,
    ArcSelector, BoundaryFunction, ConstrainedSpdSolver, FemSpace, NodalFunction, GAUSS3,
};
use crate::parabolic::TimeGrid;
use crate::sparse::{SparseOperator, SpdSolver};
use crate::{Error, Result};

/// Which forward model the functional compares against the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FunctionalMode {
    Elliptic,
    Parabolic,
}

/// Penalty weight and model selector for the misfit functional.
#[derive(Clone, Copy, Debug)]
pub struct FunctionalConfig {
    pub alpha: f64,
    pub mode: FunctionalMode,
}

impl FunctionalConfig {
    pub fn elliptic(alpha: f64) -> Self {
        FunctionalConfig { alpha, mode: FunctionalMode::Elliptic }
    }
    pub fn parabolic(alpha: f64) -> Self {
        FunctionalConfig { alpha, mode: FunctionalMode::Parabolic }
    }
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::validation("penalty weight must be finite and >= 0"));
        }
        Ok(())
    }
}

/// The three quadratic forms making up the functional value.
#[derive(Clone, Copy, Debug, Default)]
pub struct ObjectiveComponents {
    /// |u_N - u_D|^2 in the H1 seminorm.
    pub energy_misfit: f64,
    /// Boundary misfit weighted by the coefficient on the inaccessible arc.
    pub robin_boundary_misfit: f64,
    /// alpha times the squared domain L2 misfit.
    pub l2_penalty: f64,
}

/// Mean value of the gradient density over one boundary sub-interval of
/// the inaccessible arc (edges split at coefficient breakpoints).
/// Arclengths are measured from the start of the arc.
#[derive(Clone, Copy, Debug)]
pub struct DensityInterval {
    pub s_start: f64,
    pub s_end: f64,
    pub value: f64,
}

/// Functional value plus the states, the adjoints, and the gradient data
/// when requested. The gradient of a piece value is the density
/// integrated over that piece; a breakpoint moves with the value jump
/// times the density at the breakpoint.
#[derive(Clone, Debug)]
pub struct ObjectiveEvaluation {
    pub total: f64,
    pub components: ObjectiveComponents,
    /// Neumann-Robin state (terminal state in parabolic mode).
    pub u_n: NodalFunction,
    /// Dirichlet-Robin state carrying the observed data.
    pub u_d: NodalFunction,
    pub v_n: Option<NodalFunction>,
    pub v_d: Option<NodalFunction>,
    /// Parabolic gradients only: terminal state of the backward correction
    /// transporting the Dirichlet-solve coupling through time.
    pub w: Option<NodalFunction>,
    pub gradient_density: Option<Vec<DensityInterval>>,
    pub piece_gradients: Option<Vec<f64>>,
    pub breakpoint_gradients: Option<Vec<f64>>,
}

/// Stationary observation: flux on the accessible arc and the observed
/// Dirichlet trace on the observation sub-arc.
#[derive(Clone, Copy)]
pub struct CauchyData<'a> {
    pub flux: &'a dyn Fn(f64, [f64; 2]) -> f64,
    pub observed: &'a BoundaryFunction,
}

/// Terminal-time observation: flux, observed terminal trace, and the
/// known initial state on the inversion space.
#[derive(Clone, Copy)]
pub struct TerminalData<'a> {
    pub flux: &'a dyn Fn(f64, [f64; 2]) -> f64,
    pub observed: &'a BoundaryFunction,
    pub initial: &'a NodalFunction,
}

/// Common interface the optimizers drive: value-only evaluation for line
/// searches, full gradient evaluation once per iteration.
pub trait ObjectiveProblem {
    fn space(&self) -> &FemSpace;
    fn config(&self) -> &FunctionalConfig;
    fn evaluate(&self, q: &PiecewiseConstantBoundaryCoefficient) -> Result<ObjectiveEvaluation>;
    fn gradient(&self, q: &PiecewiseConstantBoundaryCoefficient) -> Result<ObjectiveEvaluation>;
}

// Gradient density on the inaccessible arc, accumulated per boundary
// sub-interval as a quadratic in the parent edge coordinate. Products of
// P1 traces are exactly quadratic, so 3-point Gauss integrates them
// exactly and point evaluation at breakpoints is exact.
struct SubInterval {
    dofs: [usize; 2],
    parent_s: [f64; 2],
    lam: [f64; 2],
    s: [f64; 2],
    piece: usize,
    c: [f64; 3],
}

struct GradientDensity {
    intervals: Vec<SubInterval>,
    arc_start: f64,
    piece_count: usize,
    breakpoints: Vec<f64>,
}

impl GradientDensity {
    fn new(space: &FemSpace, q: &PiecewiseConstantBoundaryCoefficient) -> Self {
        let arc = space.arc(ArcSelector::GammaI);
        let start = arc.start();
        let global_bks: Vec<f64> = q.breakpoints.iter().map(|b| b + start).collect();
        let mut intervals = Vec::new();
        for e in &arc.edges {
            let mut cuts = vec![e.s[0]];
            for &b in &global_bks {
                if b > e.s[0] && b < e.s[1] {
                    cuts.push(b);
                }
            }
            cuts.push(e.s[1]);
            let plen = e.s[1] - e.s[0];
            for w in cuts.windows(2) {
                let mid_local = 0.5 * (w[0] + w[1]) - start;
                intervals.push(SubInterval {
                    dofs: e.v,
                    parent_s: e.s,
                    lam: [(w[0] - e.s[0]) / plen, (w[1] - e.s[0]) / plen],
                    s: [w[0], w[1]],
                    piece: q.piece_index(mid_local),
                    c: [0.0; 3],
                });
            }
        }
        GradientDensity {
            intervals,
            arc_start: start,
            piece_count: q.values.len(),
            breakpoints: global_bks,
        }
    }

    // Adds scale * a(s) * b(s) for nodal functions a and b.
    fn add_term(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        for iv in &mut self.intervals {
            let (a0, a1) = (a[iv.dofs[0]], a[iv.dofs[1]]);
            let (b0, b1) = (b[iv.dofs[0]], b[iv.dofs[1]]);
            let (da, db) = (a1 - a0, b1 - b0);
            iv.c[0] += scale * a0 * b0;
            iv.c[1] += scale * (a0 * db + b0 * da);
            iv.c[2] += scale * da * db;
        }
    }

    fn eval_at(&self, s_global: f64) -> f64 {
        let idx = self
            .intervals
            .partition_point(|iv| iv.s[1] < s_global)
            .min(self.intervals.len() - 1);
        let iv = &self.intervals[idx];
        let lam = (s_global - iv.parent_s[0]) / (iv.parent_s[1] - iv.parent_s[0]);
        iv.c[0] + lam * (iv.c[1] + lam * iv.c[2])
    }

    fn finish(
        &self,
        q: &PiecewiseConstantBoundaryCoefficient,
    ) -> (Vec<DensityInterval>, Vec<f64>, Vec<f64>) {
        let mut piece = vec![0.0; self.piece_count];
        let mut density = Vec::with_capacity(self.intervals.len());
        for iv in &self.intervals {
            let plen = iv.parent_s[1] - iv.parent_s[0];
            let width = iv.lam[1] - iv.lam[0];
            let mut integral = 0.0;
            for (g, wgt) in GAUSS3 {
                let lam = iv.lam[0] + width * g;
                integral += wgt * (iv.c[0] + lam * (iv.c[1] + lam * iv.c[2]));
            }
            integral *= plen * width;
            piece[iv.piece] += integral;
            let len = iv.s[1] - iv.s[0];
            density.push(DensityInterval {
                s_start: iv.s[0] - self.arc_start,
                s_end: iv.s[1] - self.arc_start,
                value: if len > 0.0 { integral / len } else { 0.0 },
            });
        }
        let bks = self
            .breakpoints
            .iter()
            .enumerate()
            .map(|(j, &s)| (q.values[j] - q.values[j + 1]) * self.eval_at(s))
            .collect();
        (density, piece, bks)
    }
}

// Assembly shared by both modes: fixed matrices, flux loads, and the
// observed values at the constrained dofs.
struct FixedParts {
    stiffness: SparseOperator,
    mass: SparseOperator,
    load_all: Vec<f64>,
    load_rest: Vec<f64>,
    dir_dofs: Vec<usize>,
    dir_vals: Vec<f64>,
}

impl FixedParts {
    fn new(
        space: &FemSpace,
        flux: &dyn Fn(f64, [f64; 2]) -> f64,
        observed: &BoundaryFunction,
    ) -> Result<Self> {
        let (dir_dofs, dir_vals) = dirichlet_values_sorted(space, observed);
        Ok(FixedParts {
            stiffness: assemble_stiffness(space)?,
            mass: assemble_domain_mass(space)?,
            load_all: assemble_boundary_load(space, ArcSelector::GammaA, flux),
            load_rest: assemble_boundary_load(space, ArcSelector::GammaARest, flux),
            dir_dofs,
            dir_vals,
        })
    }

    fn check_coefficient(
        &self,
        space: &FemSpace,
        q: &PiecewiseConstantBoundaryCoefficient,
    ) -> Result<SparseOperator> {
        q.validate()?;
        assemble_boundary_mass(space, ArcSelector::GammaI, q)
    }

    fn components(
        &self,
        robin: &SparseOperator,
        alpha: f64,
        e: &[f64],
    ) -> (f64, ObjectiveComponents) {
        let components = ObjectiveComponents {
            energy_misfit: self.stiffness.quadratic_form(e, e),
            robin_boundary_misfit: robin.quadratic_form(e, e),
            l2_penalty: alpha * self.mass.quadratic_form(e, e),
        };
        let total =
            components.energy_misfit + components.robin_boundary_misfit + components.l2_penalty;
        (total, components)
    }

    // r = (K + B + alpha M) e, the source shared by all adjoint solves.
    fn misfit_source(&self, a: &SparseOperator, alpha: f64, e: &[f64]) -> Vec<f64> {
        let mut r = a.matvec(e);
        if alpha != 0.0 {
            let me = self.mass.matvec(e);
            for (ri, mi) in r.iter_mut().zip(&me) {
                *ri += alpha * mi;
            }
        }
        r
    }
}

fn value_only(
    total: f64,
    components: ObjectiveComponents,
    u_n: Vec<f64>,
    u_d: Vec<f64>,
) -> ObjectiveEvaluation {
    ObjectiveEvaluation {
        total,
        components,
        u_n: NodalFunction { values: u_n },
        u_d: NodalFunction { values: u_d },
        v_n: None,
        v_d: None,
        w: None,
        gradient_density: None,
        piece_gradients: None,
        breakpoint_gradients: None,
    }
}

/// Stationary-model objective bound to one space and one data set;
/// assembles the coefficient-independent parts once.
pub struct EllipticObjective<'a> {
    space: &'a FemSpace,
    config: FunctionalConfig,
    fixed: FixedParts,
}

impl<'a> EllipticObjective<'a> {
    pub fn new(space: &'a FemSpace, data: CauchyData<'a>, config: FunctionalConfig) -> Result<Self> {
        config.validate()?;
        if config.mode != FunctionalMode::Elliptic {
            return Err(Error::validation("config mode does not match the elliptic objective"));
        }
        Ok(EllipticObjective {
            space,
            config,
            fixed: FixedParts::new(space, data.flux, data.observed)?,
        })
    }

    // Both states plus the solvers so the adjoint pass reuses the
    // factorizations.
    fn states(
        &self,
        q: &PiecewiseConstantBoundaryCoefficient,
    ) -> Result<(SparseOperator, SpdSolver, ConstrainedSpdSolver, Vec<f64>, Vec<f64>)> {
        let robin = self.fixed.check_coefficient(self.space, q)?;
        let a = self.fixed.stiffness.add_scaled(&robin, 1.0)?;
        let neumann = SpdSolver::new(a.clone())?;
        let u_n = neumann.solve(&self.fixed.load_all)?;
        let dirichlet = ConstrainedSpdSolver::new(a, &self.fixed.dir_dofs)?;
        let u_d = dirichlet.solve(&self.fixed.load_rest, &self.fixed.dir_vals)?.values;
        Ok((robin, neumann, dirichlet, u_n, u_d))
    }
}

impl ObjectiveProblem for EllipticObjective<'_> {
    fn space(&self) -> &FemSpace {
        self.space
    }
    fn config(&self) -> &FunctionalConfig {
        &self.config
    }

    fn evaluate(&self, q: &PiecewiseConstantBoundaryCoefficient) -> Result<ObjectiveEvaluation> {
        let (robin, _, _, u_n, u_d) = self.states(q)?;
        let e: Vec<f64> = u_n.iter().zip(&u_d).map(|(a, b)| a - b).collect();
        let (total, components) = self.fixed.components(&robin, self.config.alpha, &e);
        Ok(value_only(total, components, u_n, u_d))
    }

    fn gradient(&self, q: &PiecewiseConstantBoundaryCoefficient) -> Result<ObjectiveEvaluation> {
        let (robin, neumann, dirichlet, u_n, u_d) = self.states(q)?;
        let e: Vec<f64> = u_n.iter().zip(&u_d).map(|(a, b)| a - b).collect();
        let (total, components) = self.fixed.components(&robin, self.config.alpha, &e);
        let r = self.fixed.misfit_source(neumann.operator(), self.config.alpha, &e);
        let v_n = neumann.solve(&r)?;
        let zeros = vec![0.0; self.fixed.dir_dofs.len()];
        let v_d = dirichlet.solve(&r, &zeros)?.values;

        let mut density = GradientDensity::new(self.space, q);
        density.add_term(1.0, &e, &e);
        density.add_term(-2.0, &u_n, &v_n);
        density.add_term(2.0, &u_d, &v_d);
        let (intervals, piece, bks) = density.finish(q);
        Ok(ObjectiveEvaluation {
            total,
            components,
            u_n: NodalFunction { values: u_n },
            u_d: NodalFunction { values: u_d },
            v_n: Some(NodalFunction { values: v_n }),
            v_d: Some(NodalFunction { values: v_d }),
            w: None,
            gradient_density: Some(intervals),
            piece_gradients: Some(piece),
            breakpoint_gradients: Some(bks),
        })
    }
}

/// Terminal-observation objective: backward-Euler forward sweep, one
/// constrained terminal solve, and the exact backward-in-time adjoint.
pub struct ParabolicObjective<'a> {
    space: &'a FemSpace,
    config: FunctionalConfig,
    grid: TimeGrid,
    initial: &'a NodalFunction,
    fixed: FixedParts,
}

impl<'a> ParabolicObjective<'a> {
    pub fn new(
        space: &'a FemSpace,
        data: TerminalData<'a>,
        grid: TimeGrid,
        config: FunctionalConfig,
    ) -> Result<Self> {
        config.validate()?;
        if config.mode != FunctionalMode::Parabolic {
            return Err(Error::validation("config mode does not match the parabolic objective"));
        }
        if data.initial.len() != space.dof_count() {
            return Err(Error::validation("initial state has wrong dof count"));
        }
        TimeGrid::new(grid.t_final, grid.steps)?;
        Ok(ParabolicObjective {
            space,
            config,
            grid,
            initial: data.initial,
            fixed: FixedParts::new(space, data.flux, data.observed)?,
        })
    }

    // Forward sweep; returns the operators, the factored time-step solver,
    // the last two states, and optionally the whole trajectory u^0..u^M.
    #[allow(clippy::type_complexity)]
    fn sweep(
        &self,
        q: &PiecewiseConstantBoundaryCoefficient,
        store: bool,
    ) -> Result<(SparseOperator, SparseOperator, SpdSolver, Vec<f64>, Vec<f64>, Option<Vec<Vec<f64>>>)>
    {
        let robin = self.fixed.check_coefficient(self.space, q)?;
        let a = self.fixed.stiffness.add_scaled(&robin, 1.0)?;
        let tau = self.grid.tau();
        let a_tau = a.add_scaled(&self.fixed.mass, 1.0 / tau)?;
        let stepper = SpdSolver::new(a_tau)?;
        let n = self.space.dof_count();
        let mut trajectory = store.then(|| vec![self.initial.values.clone()]);
        let mut prev = self.initial.values.clone();
        let mut before_last = prev.clone();
        let mut rhs = vec![0.0; n];
        for m in 1..=self.grid.steps {
            self.fixed.mass.matvec_into(&prev, &mut rhs);
            for (r, b) in rhs.iter_mut().zip(&self.fixed.load_all) {
                *r = *r / tau + b;
            }
            let u = stepper.solve_warm(&rhs, Some(&prev))?;
            if m == self.grid.steps {
                before_last = prev.clone();
            }
            prev = u;
            if let Some(t) = trajectory.as_mut() {
                t.push(prev.clone());
            }
        }
        Ok((robin, a, stepper, prev, before_last, trajectory))
    }

    // Terminal constrained solve: data trace on the observation arc,
    // discrete time derivative as a sink.
    fn terminal_dirichlet(
        &self,
        a: &SparseOperator,
        u_last: &[f64],
        before_last: &[f64],
    ) -> Result<(ConstrainedSpdSolver, Vec<f64>, Vec<f64>)> {
        let tau = self.grid.tau();
        let dtu: Vec<f64> = u_last
            .iter()
            .zip(before_last)
            .map(|(a, b)| (a - b) / tau)
            .collect();
        let m_dtu = self.fixed.mass.matvec(&dtu);
        let rhs: Vec<f64> = self
            .fixed
            .load_rest
            .iter()
            .zip(&m_dtu)
            .map(|(l, s)| l - s)
            .collect();
        let dirichlet = ConstrainedSpdSolver::new(a.clone(), &self.fixed.dir_dofs)?;
        let u_d = dirichlet.solve(&rhs, &self.fixed.dir_vals)?.values;
        Ok((dirichlet, u_d, dtu))
    }
}

impl ObjectiveProblem for ParabolicObjective<'_> {
    fn space(&self) -> &FemSpace {
        self.space
    }
    fn config(&self) -> &FunctionalConfig {
        &self.config
    }

    fn evaluate(&self, q: &PiecewiseConstantBoundaryCoefficient) -> Result<ObjectiveEvaluation> {
        let (robin, a, _, u_last, before_last, _) = self.sweep(q, false)?;
        let (_, u_d, _) = self.terminal_dirichlet(&a, &u_last, &before_last)?;
        let e: Vec<f64> = u_last.iter().zip(&u_d).map(|(a, b)| a - b).collect();
        let (total, components) = self.fixed.components(&robin, self.config.alpha, &e);
        Ok(value_only(total, components, u_last, u_d))
    }

    fn gradient(&self, q: &PiecewiseConstantBoundaryCoefficient) -> Result<ObjectiveEvaluation> {
        let (robin, a, stepper, u_last, before_last, trajectory) = self.sweep(q, true)?;
        let trajectory = trajectory.expect("trajectory stored for gradient");
        let (dirichlet, u_d, _) = self.terminal_dirichlet(&a, &u_last, &before_last)?;
        let e: Vec<f64> = u_last.iter().zip(&u_d).map(|(a, b)| a - b).collect();
        let (total, components) = self.fixed.components(&robin, self.config.alpha, &e);

        let r = self.fixed.misfit_source(&a, self.config.alpha, &e);
        let zeros = vec![0.0; self.fixed.dir_dofs.len()];
        let v_d = dirichlet.solve(&r, &zeros)?.values;

        let mut density = GradientDensity::new(self.space, q);
        density.add_term(1.0, &e, &e);
        density.add_term(2.0, &u_d, &v_d);

        // Backward sweep. The terminal misfit acts as the terminal
        // condition; the Dirichlet coupling through the discrete time
        // derivative injects +(1/tau) M v_D at step M and -(1/tau) M v_D
        // at step M-1; earlier steps transport the adjoint homogeneously.
        let tau = self.grid.tau();
        let steps = self.grid.steps;
        let m_vd = self.fixed.mass.matvec(&v_d);
        let rhs: Vec<f64> = r.iter().zip(&m_vd).map(|(a, b)| a + b / tau).collect();
        let mut nu = stepper.solve(&rhs)?;
        density.add_term(-2.0, &trajectory[steps], &nu);
        let v_n = stepper.solve(&r)?;
        let w: Vec<f64> = nu.iter().zip(&v_n).map(|(a, b)| a - b).collect();
        if steps >= 2 {
            let m_nu = self.fixed.mass.matvec(&nu);
            let rhs: Vec<f64> = m_nu.iter().zip(&m_vd).map(|(a, b)| (a - b) / tau).collect();
            nu = stepper.solve_warm(&rhs, Some(&nu))?;
            density.add_term(-2.0, &trajectory[steps - 1], &nu);
            for m in (1..=steps - 2).rev() {
                let m_nu = self.fixed.mass.matvec(&nu);
                let rhs: Vec<f64> = m_nu.iter().map(|a| a / tau).collect();
                nu = stepper.solve_warm(&rhs, Some(&nu))?;
                density.add_term(-2.0, &trajectory[m], &nu);
            }
        }

        let (intervals, piece, bks) = density.finish(q);
        Ok(ObjectiveEvaluation {
            total,
            components,
            u_n: NodalFunction { values: u_last },
            u_d: NodalFunction { values: u_d },
            v_n: Some(NodalFunction { values: v_n }),
            v_d: Some(NodalFunction { values: v_d }),
            w: Some(NodalFunction { values: w }),
            gradient_density: Some(intervals),
            piece_gradients: Some(piece),
            breakpoint_gradients: Some(bks),
        })
    }
}

/// One-shot stationary functional value.
pub fn evaluate_elliptic(
    space: &FemSpace,
    q: &PiecewiseConstantBoundaryCoefficient,
    data: CauchyData,
    config: FunctionalConfig,
) -> Result<ObjectiveEvaluation> {
    EllipticObjective::new(space, data, config)?.evaluate(q)
}

/// One-shot stationary functional value with gradients.
pub fn gradient_elliptic(
    space: &FemSpace,
    q: &PiecewiseConstantBoundaryCoefficient,
    data: CauchyData,
    config: FunctionalConfig,
) -> Result<ObjectiveEvaluation> {
    EllipticObjective::new(space, data, config)?.gradient(q)
}

/// One-shot terminal-observation functional value.
pub fn evaluate_parabolic(
    space: &FemSpace,
    q: &PiecewiseConstantBoundaryCoefficient,
    data: TerminalData,
    grid: TimeGrid,
    config: FunctionalConfig,
) -> Result<ObjectiveEvaluation> {
    ParabolicObjective::new(space, data, grid, config)?.evaluate(q)
}

/// One-shot terminal-observation functional value with gradients.
pub fn gradient_parabolic(
    space: &FemSpace,
    q: &PiecewiseConstantBoundaryCoefficient,
    data: TerminalData,
    grid: TimeGrid,
    config: FunctionalConfig,
) -> Result<ObjectiveEvaluation> {
    ParabolicObjective::new(space, data, grid, config)?.gradient(q)
}
