//! Config-driven experiment runner: single reconstructions, noise sweeps
//! with power-law parameter schedules, and log-log rate fits.
//!
//! A sweep runs one reconstruction per (noise level, seed) cell, with the
//! mesh size, time step, and penalty weight tied to the noise level by
//! power laws anchored at a reference level delta0. Accuracy per level is
//! the median over seeds; the convergence rate is the least-squares slope
//! of log e_q against log delta.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::coeff::{
    relative_error_eq, AdmissibleSetA, AdmissibleSetB, PiecewiseConstantBoundaryCoefficient,
    ValueBounds,
};
use crate::fem::{ArcSelector, BoundaryFunction, FemSpace, NodalFunction};
use crate::inversion::{
    history_csv, solve_known_partition, solve_unknown_partition, InversionResult, OptimizerConfig,
};
use crate::mesh::{build_square_domain, generate_graded_mesh, EdgeId, GammaAPrimeSpec, MeshSpec};
use crate::noise::{add_noise, generate_exact_data, transfer_to_coarse, DataModel, NoiseSpec};
use crate::objective::{
    CauchyData, EllipticObjective, FunctionalConfig, ObjectiveProblem, ParabolicObjective,
    TerminalData,
};
use crate::parabolic::{build_initial_data, TimeGrid};
use crate::{Error, Result};

/// Stationary or terminal-observation forward model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelKind {
    Elliptic,
    Parabolic { t_final: f64 },
}

/// Named accessible-boundary flux profiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FluxKind {
    /// g(x1, x2) = 1 - x1^2.
    OneMinusX1Sq,
    Zero,
}

impl FluxKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "one_minus_x1_sq" => Ok(FluxKind::OneMinusX1Sq),
            "zero" => Ok(FluxKind::Zero),
            _ => Err(Error::validation(format!("unknown flux `{s}`"))),
        }
    }
    pub fn eval(self, _s: f64, p: [f64; 2]) -> f64 {
        match self {
            FluxKind::OneMinusX1Sq => 1.0 - p[0] * p[0],
            FluxKind::Zero => 0.0,
        }
    }
}

/// Named volume sources defining the stationary initial state of the
/// transient model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitialSourceKind {
    /// f(x1, x2) = cos(pi x1) cos(pi x2) / 4.
    QuarterCosCos,
    Zero,
}

impl InitialSourceKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "quarter_cos_cos" => Ok(InitialSourceKind::QuarterCosCos),
            "zero" => Ok(InitialSourceKind::Zero),
            _ => Err(Error::validation(format!("unknown initial source `{s}`"))),
        }
    }
    pub fn eval(self, p: [f64; 2]) -> f64 {
        match self {
            InitialSourceKind::QuarterCosCos => {
                0.25 * (std::f64::consts::PI * p[0]).cos() * (std::f64::consts::PI * p[1]).cos()
            }
            InitialSourceKind::Zero => 0.0,
        }
    }
}

/// Whether the partition of the unknown coefficient is part of the data
/// or part of the search space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionKind {
    Known,
    Unknown,
}

/// Power-law schedules h(delta), tau(delta), alpha(delta), anchored at
/// delta0 so that h(delta0) = h0 exactly. At delta = 0 (noise-free runs)
/// the anchors are used unchanged.
#[derive(Clone, Copy, Debug)]
pub struct Schedules {
    pub delta0: f64,
    pub h0: f64,
    pub h_exponent: f64,
    pub tau0: Option<f64>,
    pub tau_exponent: f64,
    pub alpha0: f64,
    pub alpha_exponent: f64,
}

impl Schedules {
    pub fn h(&self, delta: f64) -> f64 {
        if delta <= 0.0 {
            return self.h0;
        }
        self.h0 * (delta / self.delta0).powf(self.h_exponent)
    }
    pub fn tau(&self, delta: f64) -> Option<f64> {
        let tau0 = self.tau0?;
        if delta <= 0.0 {
            return Some(tau0);
        }
        Some(tau0 * (delta / self.delta0).powf(self.tau_exponent))
    }
    pub fn alpha(&self, delta: f64) -> f64 {
        if delta <= 0.0 {
            return self.alpha0;
        }
        self.alpha0 * (delta / self.delta0).powf(self.alpha_exponent)
    }
    pub fn validate(&self, model: ModelKind) -> Result<()> {
        if !(self.delta0 > 0.0) {
            return Err(Error::validation("delta0 must be positive"));
        }
        if !(self.h0 > 0.0) {
            return Err(Error::validation("h0 must be positive"));
        }
        if !self.alpha0.is_finite() || self.alpha0 < 0.0 {
            return Err(Error::validation("alpha0 must be finite and >= 0"));
        }
        match (model, self.tau0) {
            (ModelKind::Parabolic { .. }, None) => {
                Err(Error::validation("missing config key `tau0` (parabolic model)"))
            }
            (_, Some(t)) if !(t > 0.0) => Err(Error::validation("tau0 must be positive")),
            _ => Ok(()),
        }
    }
}

/// Complete description of one experiment: geometry, model, ground truth,
/// initial guess, noise and seed lists, schedules, and optimizer knobs.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub gamma_i: EdgeId,
    pub gamma_a_prime: GammaAPrimeSpec,
    pub model: ModelKind,
    pub flux: FluxKind,
    pub u0_source: InitialSourceKind,
    pub q_true_breakpoints: Vec<f64>,
    pub q_true_values: Vec<f64>,
    pub q_init_breakpoints: Vec<f64>,
    pub q_init_values: Vec<f64>,
    pub partition: PartitionKind,
    pub max_pieces: usize,
    pub min_piece: f64,
    pub fix_background: Option<f64>,
    pub bounds: ValueBounds,
    pub deltas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub schedules: Schedules,
    pub grading_r: f64,
    pub data_refinement_depth: usize,
    pub max_iterations: usize,
    pub iterations_exponent: f64,
    pub initial_step: f64,
    pub max_halvings: usize,
    pub cg_restart_period: usize,
    pub step_enlarge_after: Option<usize>,
    pub out_dir: String,
    /// SHA-256 of the config text, carried into output provenance.
    pub config_sha256: String,
}

const CONFIG_KEYS: &[&str] = &[
    "model",
    "t_final",
    "gamma_i",
    "gamma_a_prime",
    "flux",
    "u0_source",
    "q_true_breakpoints",
    "q_true_values",
    "q_init_breakpoints",
    "q_init_values",
    "partition",
    "max_pieces",
    "min_piece",
    "fix_background",
    "bounds_lower",
    "bounds_upper",
    "deltas",
    "seeds",
    "delta0",
    "h0",
    "h_exponent",
    "tau0",
    "tau_exponent",
    "alpha0",
    "alpha_exponent",
    "grading_r",
    "data_refinement_depth",
    "max_iterations",
    "iterations_exponent",
    "initial_step",
    "max_halvings",
    "cg_restart_period",
    "step_enlarge_after",
    "out_dir",
];

fn parse_scalar<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::validation(format!("config key `{key}`: cannot parse `{raw}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split_whitespace().map(|tok| parse_scalar(key, tok)).collect()
}

impl ExperimentConfig {
    /// Parses the key = value format: one pair per line, `#` starts a
    /// comment, lists are whitespace-separated. Unknown and duplicate
    /// keys are rejected by name, as are missing required keys.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::validation(format!("config line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(Error::validation(format!("unknown config key `{key}`")));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::validation(format!("duplicate config key `{key}`")));
            }
        }
        let get = |key: &str| map.get(key).map(|s| s.as_str());
        let req = |key: &str| {
            get(key).ok_or_else(|| Error::validation(format!("missing config key `{key}`")))
        };

        let model = match req("model")? {
            "elliptic" => ModelKind::Elliptic,
            "parabolic" => {
                ModelKind::Parabolic { t_final: parse_scalar("t_final", req("t_final")?)? }
            }
            other => return Err(Error::validation(format!("unknown model `{other}`"))),
        };
        if model == ModelKind::Elliptic && get("t_final").is_some() {
            return Err(Error::validation("config key `t_final` needs the parabolic model"));
        }

        let gamma_i = EdgeId::parse(get("gamma_i").unwrap_or("right"))?;
        let gamma_a_prime = match get("gamma_a_prime").unwrap_or("all") {
            "all" => GammaAPrimeSpec::All,
            spec if spec.starts_with("arc") => {
                let ends: Vec<f64> = parse_list("gamma_a_prime", &spec[3..])?;
                if ends.len() != 2 {
                    return Err(Error::validation(
                        "config key `gamma_a_prime`: arc needs two arclengths",
                    ));
                }
                GammaAPrimeSpec::Arc { start: ends[0], end: ends[1] }
            }
            edge => GammaAPrimeSpec::Edge(EdgeId::parse(edge)?),
        };

        let partition = match get("partition").unwrap_or("known") {
            "known" => PartitionKind::Known,
            "unknown" => PartitionKind::Unknown,
            other => return Err(Error::validation(format!("unknown partition mode `{other}`"))),
        };

        let q_true_values: Vec<f64> = parse_list("q_true_values", req("q_true_values")?)?;
        let q_true_breakpoints: Vec<f64> = match get("q_true_breakpoints") {
            Some(raw) => parse_list("q_true_breakpoints", raw)?,
            None => Vec::new(),
        };
        let q_init_values: Vec<f64> = parse_list("q_init_values", req("q_init_values")?)?;
        let q_init_breakpoints: Vec<f64> = match get("q_init_breakpoints") {
            Some(raw) => parse_list("q_init_breakpoints", raw)?,
            None => Vec::new(),
        };
        if partition == PartitionKind::Known && q_init_breakpoints != q_true_breakpoints {
            return Err(Error::validation(
                "known-partition runs need q_init_breakpoints equal to q_true_breakpoints",
            ));
        }

        let bounds = ValueBounds::new(
            match get("bounds_lower") {
                Some(raw) => parse_scalar("bounds_lower", raw)?,
                None => ValueBounds::standard().lower,
            },
            match get("bounds_upper") {
                Some(raw) => parse_scalar("bounds_upper", raw)?,
                None => ValueBounds::standard().upper,
            },
        )?;

        let deltas: Vec<f64> = parse_list("deltas", req("deltas")?)?;
        let seeds: Vec<u64> = parse_list("seeds", req("seeds")?)?;

        let schedules = Schedules {
            delta0: match get("delta0") {
                Some(raw) => parse_scalar("delta0", raw)?,
                None => 1e-2,
            },
            h0: parse_scalar("h0", req("h0")?)?,
            h_exponent: match get("h_exponent") {
                Some(raw) => parse_scalar("h_exponent", raw)?,
                None => 2.0 / 3.0,
            },
            tau0: match get("tau0") {
                Some(raw) => Some(parse_scalar("tau0", raw)?),
                None => None,
            },
            tau_exponent: match get("tau_exponent") {
                Some(raw) => parse_scalar("tau_exponent", raw)?,
                None => 4.0 / 3.0,
            },
            alpha0: parse_scalar("alpha0", req("alpha0")?)?,
            alpha_exponent: match get("alpha_exponent") {
                Some(raw) => parse_scalar("alpha_exponent", raw)?,
                None => -4.0 / 3.0,
            },
        };
        if model == ModelKind::Elliptic && schedules.tau0.is_some() {
            return Err(Error::validation("config key `tau0` needs the parabolic model"));
        }

        let cfg = ExperimentConfig {
            gamma_i,
            gamma_a_prime,
            model,
            flux: FluxKind::parse(get("flux").unwrap_or("one_minus_x1_sq"))?,
            u0_source: InitialSourceKind::parse(get("u0_source").unwrap_or("quarter_cos_cos"))?,
            q_true_breakpoints,
            q_true_values,
            q_init_breakpoints,
            max_pieces: match get("max_pieces") {
                Some(raw) => parse_scalar("max_pieces", raw)?,
                None => q_init_values.len(),
            },
            q_init_values,
            partition,
            min_piece: match get("min_piece") {
                Some(raw) => parse_scalar("min_piece", raw)?,
                None => 0.1,
            },
            fix_background: match get("fix_background") {
                Some(raw) => Some(parse_scalar("fix_background", raw)?),
                None => None,
            },
            bounds,
            deltas,
            seeds,
            schedules,
            grading_r: match get("grading_r") {
                Some(raw) => parse_scalar("grading_r", raw)?,
                None => 1.0,
            },
            data_refinement_depth: match get("data_refinement_depth") {
                Some(raw) => parse_scalar("data_refinement_depth", raw)?,
                None => 2,
            },
            max_iterations: match get("max_iterations") {
                Some(raw) => parse_scalar("max_iterations", raw)?,
                None => 200,
            },
            iterations_exponent: match get("iterations_exponent") {
                Some(raw) => parse_scalar("iterations_exponent", raw)?,
                None => 0.0,
            },
            initial_step: match get("initial_step") {
                Some(raw) => parse_scalar("initial_step", raw)?,
                None => 1.0,
            },
            max_halvings: match get("max_halvings") {
                Some(raw) => parse_scalar("max_halvings", raw)?,
                None => 30,
            },
            cg_restart_period: match get("cg_restart_period") {
                Some(raw) => parse_scalar("cg_restart_period", raw)?,
                None => 10,
            },
            step_enlarge_after: match get("step_enlarge_after") {
                Some(raw) => Some(parse_scalar("step_enlarge_after", raw)?),
                None => None,
            },
            out_dir: get("out_dir").unwrap_or("out").to_string(),
            config_sha256: hex_sha256(text.as_bytes()),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedules.validate(self.model)?;
        if self.deltas.is_empty() {
            return Err(Error::validation("config key `deltas` must list at least one level"));
        }
        if self.deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::validation("noise levels must be positive"));
        }
        if self.deltas.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::validation("noise levels must be strictly descending"));
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("config key `seeds` must list at least one seed"));
        }
        if self.data_refinement_depth < 2 {
            return Err(Error::validation(
                "config key `data_refinement_depth` must be at least 2",
            ));
        }
        if !(self.grading_r > 0.0 && self.grading_r <= 1.0) {
            return Err(Error::validation("config key `grading_r` must lie in (0, 1]"));
        }
        if !(self.iterations_exponent >= 0.0 && self.iterations_exponent <= 2.0) {
            return Err(Error::validation(
                "config key `iterations_exponent` must lie in [0, 2]",
            ));
        }
        if self.partition == PartitionKind::Unknown && self.max_pieces < self.q_init_values.len()
        {
            return Err(Error::validation(
                "config key `max_pieces` is below the initial guess piece count",
            ));
        }
        Ok(())
    }

    /// Per-level iteration budget. The gradient flow stops at the
    /// semiconvergence dip, whose index grows as the noise shrinks (the
    /// iteration count plays the role of the regularization parameter),
    /// so the budget follows the same power law as the other schedules:
    /// max_iterations * (delta0/delta)^iterations_exponent, rounded. The
    /// default exponent 0 keeps the budget constant across levels.
    pub fn iteration_budget(&self, delta: f64) -> usize {
        if delta <= 0.0 || self.iterations_exponent == 0.0 {
            return self.max_iterations;
        }
        let growth = (self.schedules.delta0 / delta).powf(self.iterations_exponent);
        (self.max_iterations as f64 * growth).round() as usize
    }

    /// The optimizer configuration for one cell at noise level `delta`,
    /// built around an initial guess living on the inaccessible arc of
    /// `length`.
    fn optimizer_config(&self, length: f64, delta: f64) -> Result<OptimizerConfig> {
        let q0 = PiecewiseConstantBoundaryCoefficient::new(
            self.q_init_breakpoints.clone(),
            self.q_init_values.clone(),
            length,
        )?
        .with_bounds(self.bounds);
        let mut opt = OptimizerConfig::new(q0);
        opt.max_iterations = self.iteration_budget(delta);
        opt.line_search.initial_step = self.initial_step;
        opt.line_search.max_halvings = self.max_halvings;
        opt.line_search.step_enlarge_after = self.step_enlarge_after;
        opt.cg_restart_period = self.cg_restart_period;
        opt.fix_background = self.fix_background;
        Ok(opt)
    }

    fn ground_truth(&self, length: f64) -> Result<PiecewiseConstantBoundaryCoefficient> {
        Ok(PiecewiseConstantBoundaryCoefficient::new(
            self.q_true_breakpoints.clone(),
            self.q_true_values.clone(),
            length,
        )?
        .with_bounds(self.bounds))
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

/// One (delta, seed) reconstruction outcome in sweep-table form.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub delta: f64,
    pub h: f64,
    pub tau: Option<f64>,
    pub alpha: f64,
    pub seed: u64,
    pub e_q: f64,
    pub j: f64,
    pub iterations: usize,
    pub seconds: f64,
}

/// A cell whose reconstruction failed; the sweep carries on without it.
#[derive(Clone, Debug)]
pub struct SweepFailure {
    pub delta: f64,
    pub seed: u64,
    pub message: String,
}

/// Least-squares slope of log e against log delta, with a 95% band from
/// the residual variance (zero width for two points).
#[derive(Clone, Copy, Debug)]
pub struct RateEstimate {
    pub slope: f64,
    pub intercept: f64,
    pub half_width_95: f64,
}

/// Everything a sweep produces: per-cell rows, failures, per-level
/// medians, and the fitted rate when at least three levels survived.
#[derive(Clone, Debug)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
    /// (delta, median over seeds of e_q), descending in delta.
    pub medians: Vec<(f64, f64)>,
    pub fitted_rate: Option<RateEstimate>,
}

/// Output of one reconstruction cell.
#[derive(Clone, Debug)]
pub struct SingleRun {
    pub result: InversionResult,
    pub row: SweepRow,
    pub q_dag: PiecewiseConstantBoundaryCoefficient,
}

// Everything that depends on the noise level but not on the seed: the
// inversion mesh, the schedule values, the ground truth on it, the exact
// fine-mesh trace, and (transient model) the time grid and initial state.
struct CellSetup {
    h: f64,
    tau: Option<f64>,
    alpha: f64,
    space: FemSpace,
    q_dag: PiecewiseConstantBoundaryCoefficient,
    grid: Option<TimeGrid>,
    initial: Option<NodalFunction>,
    fine_trace: BoundaryFunction,
}

fn prepare_cell(cfg: &ExperimentConfig, delta: f64) -> Result<CellSetup> {
    let h = cfg.schedules.h(delta);
    let tau = cfg.schedules.tau(delta);
    let alpha = cfg.schedules.alpha(delta);
    let domain = build_square_domain(cfg.gamma_i, cfg.gamma_a_prime)?;
    let base = MeshSpec::new(h, cfg.grading_r);
    let mesh = generate_graded_mesh(&domain, &base)?;
    let space = FemSpace::new(mesh, domain.clone())?;
    let length = {
        let arc = space.arc(ArcSelector::GammaI);
        arc.end() - arc.start()
    };
    let q_dag = cfg.ground_truth(length)?;
    let flux_kind = cfg.flux;
    let flux = move |s: f64, p: [f64; 2]| flux_kind.eval(s, p);
    let source_kind = cfg.u0_source;
    let source = move |p: [f64; 2]| source_kind.eval(p);

    let (grid, initial, model) = match cfg.model {
        ModelKind::Elliptic => (None, None, DataModel::Elliptic),
        ModelKind::Parabolic { t_final } => {
            let tau = tau.expect("validated: parabolic schedules carry tau0");
            let steps = (t_final / tau).round().max(1.0) as usize;
            let grid = TimeGrid::new(t_final, steps)?;
            let initial = build_initial_data(&space, &q_dag, &source, &flux)?;
            (Some(grid), Some(initial), DataModel::Parabolic { grid, u0_source: &source })
        }
    };
    let fine_trace = generate_exact_data(
        &domain,
        &base,
        &q_dag,
        &flux,
        &model,
        cfg.data_refinement_depth,
    )?;
    Ok(CellSetup { h, tau, alpha, space, q_dag, grid, initial, fine_trace })
}

fn run_prepared(
    cfg: &ExperimentConfig,
    setup: &CellSetup,
    delta: f64,
    seed: u64,
) -> Result<SingleRun> {
    let started = Instant::now();
    let noisy = add_noise(&setup.fine_trace, &NoiseSpec { delta, seed })?;
    let observed = transfer_to_coarse(&noisy, &setup.space)?;
    let flux_kind = cfg.flux;
    let flux = move |s: f64, p: [f64; 2]| flux_kind.eval(s, p);
    let length = setup.q_dag.length;
    let opt = cfg.optimizer_config(length, delta)?;

    let solve = |problem: &dyn ObjectiveProblem| -> Result<InversionResult> {
        match cfg.partition {
            PartitionKind::Known => {
                let set = AdmissibleSetA {
                    breakpoints: setup.q_dag.breakpoints.clone(),
                    bounds: cfg.bounds,
                };
                solve_known_partition(problem, &set, &opt, Some(&setup.q_dag))
            }
            PartitionKind::Unknown => {
                let set = AdmissibleSetB {
                    max_pieces: cfg.max_pieces,
                    min_measure: cfg.min_piece,
                    bounds: cfg.bounds,
                };
                solve_unknown_partition(problem, &set, &opt, Some(&setup.q_dag))
            }
        }
    };

    let result = match cfg.model {
        ModelKind::Elliptic => {
            let data = CauchyData { flux: &flux, observed: &observed };
            let problem =
                EllipticObjective::new(&setup.space, data, FunctionalConfig::elliptic(setup.alpha))?;
            solve(&problem)?
        }
        ModelKind::Parabolic { .. } => {
            let grid = setup.grid.expect("prepared parabolic cell carries a grid");
            let initial = setup.initial.as_ref().expect("prepared parabolic cell has u0");
            let data = TerminalData { flux: &flux, observed: &observed, initial };
            let problem = ParabolicObjective::new(
                &setup.space,
                data,
                grid,
                FunctionalConfig::parabolic(setup.alpha),
            )?;
            solve(&problem)?
        }
    };

    let e_q = relative_error_eq(&result.q_star, &setup.q_dag)?;
    let last = result
        .iterate_history
        .last()
        .ok_or_else(|| Error::solver("optimizer returned an empty history"))?;
    let row = SweepRow {
        delta,
        h: setup.h,
        tau: setup.tau,
        alpha: setup.alpha,
        seed,
        e_q,
        j: last.j,
        iterations: result.iterate_history.len() - 1,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok(SingleRun { result, row, q_dag: setup.q_dag.clone() })
}

/// Runs one reconstruction at the given noise level and seed, applying
/// the schedules.
pub fn run_single(cfg: &ExperimentConfig, delta: f64, seed: u64) -> Result<SingleRun> {
    let setup = prepare_cell(cfg, delta)?;
    run_prepared(cfg, &setup, delta, seed)
}

/// Runs every (delta, seed) cell. The exact fine trace is generated once
/// per level; cells within a level run in parallel on the rayon pool.
/// Failed cells are recorded and skipped; the rate is fitted on the
/// surviving medians when at least three levels have positive medians.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut medians = Vec::new();
    for &delta in &cfg.deltas {
        let setup = match prepare_cell(cfg, delta) {
            Ok(s) => s,
            Err(e) => {
                let message = format!("data generation failed: {e}");
                for &seed in &cfg.seeds {
                    failures.push(SweepFailure { delta, seed, message: message.clone() });
                }
                continue;
            }
        };
        let mut cell_rows: Vec<(u64, Result<SingleRun>)> = cfg
            .seeds
            .par_iter()
            .map(|&seed| (seed, run_prepared(cfg, &setup, delta, seed)))
            .collect();
        cell_rows.sort_by_key(|(seed, _)| *seed);
        for (seed, outcome) in cell_rows {
            match outcome {
                Ok(run) => rows.push(run.row),
                Err(e) => failures.push(SweepFailure { delta, seed, message: e.to_string() }),
            }
        }
        let mut level: Vec<f64> =
            rows.iter().filter(|r| r.delta == delta).map(|r| r.e_q).collect();
        if !level.is_empty() {
            medians.push((delta, median(&mut level)));
        }
    }
    let positive: Vec<(f64, f64)> =
        medians.iter().copied().filter(|(_, e)| *e > 0.0).collect();
    let fitted_rate =
        if positive.len() >= 3 { Some(estimate_rate(&positive)?) } else { None };
    Ok(SweepReport { rows, failures, medians, fitted_rate })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Ordinary least squares of log e against log delta. Needs at least two
/// pairs with distinct positive deltas and positive values; the 95% band
/// comes from the residual variance (zero for exactly two points).
pub fn estimate_rate(pairs: &[(f64, f64)]) -> Result<RateEstimate> {
    if pairs.len() < 2 {
        return Err(Error::validation("rate estimation needs at least two (delta, e) pairs"));
    }
    if pairs.iter().any(|(d, e)| !(*d > 0.0) || !(*e > 0.0)) {
        return Err(Error::validation("rate estimation needs positive deltas and values"));
    }
    let xs: Vec<f64> = pairs.iter().map(|(d, _)| d.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|(_, e)| e.ln()).collect();
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    if sxx <= 0.0 {
        return Err(Error::validation("rate estimation needs at least two distinct deltas"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let half_width_95 = if pairs.len() == 2 {
        0.0
    } else {
        let ss_res: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                let r = y - (intercept + slope * x);
                r * r
            })
            .sum();
        let sigma2 = ss_res / (n - 2.0);
        1.96 * (sigma2 / sxx).sqrt()
    };
    Ok(RateEstimate { slope, intercept, half_width_95 })
}

/// Config-level provenance comment embedded at the top of every output.
pub fn file_provenance(cfg: &ExperimentConfig) -> String {
    let s = &cfg.schedules;
    let tau0 = s.tau0.map(|t| format!("{t:.16e}")).unwrap_or_else(|| "none".to_string());
    format!(
        "# robinfem v{} config_sha256={} model={} delta0={:.16e} h0={:.16e} h_exp={:.16e} tau0={} tau_exp={:.16e} alpha0={:.16e} alpha_exp={:.16e} iters0={} iters_exp={:.16e} depth={}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.config_sha256,
        match cfg.model {
            ModelKind::Elliptic => "elliptic",
            ModelKind::Parabolic { .. } => "parabolic",
        },
        s.delta0,
        s.h0,
        s.h_exponent,
        tau0,
        s.tau_exponent,
        s.alpha0,
        s.alpha_exponent,
        cfg.max_iterations,
        cfg.iterations_exponent,
        cfg.data_refinement_depth,
    )
}

/// Cell-level provenance comment: the level, the seed, and the schedule
/// values the cell actually used.
pub fn cell_provenance(cfg: &ExperimentConfig, row: &SweepRow) -> String {
    let tau = row.tau.map(|t| format!("{t:.16e}")).unwrap_or_else(|| "none".to_string());
    format!(
        "# cell delta={:.16e} seed={} h={:.16e} tau={} alpha={:.16e} config_sha256={}\n",
        row.delta, row.seed, row.h, tau, row.alpha, cfg.config_sha256,
    )
}

/// History CSV for one run, with provenance comments ahead of the header.
pub fn history_file(cfg: &ExperimentConfig, run: &SingleRun) -> String {
    let mut out = file_provenance(cfg);
    out.push_str(&cell_provenance(cfg, &run.row));
    out.push_str(&history_csv(&run.result.iterate_history));
    out
}

/// Reconstruction profile CSV: `s,q_star,q_dag` sampled so each piece
/// contributes its two endpoints (step-plot form).
pub fn reconstruction_file(cfg: &ExperimentConfig, run: &SingleRun) -> String {
    let mut out = file_provenance(cfg);
    out.push_str(&cell_provenance(cfg, &run.row));
    out.push_str("s,q_star,q_dag\n");
    let q_star = &run.result.q_star;
    let q_dag = &run.q_dag;
    let mut cuts: Vec<f64> = Vec::new();
    cuts.push(0.0);
    cuts.extend_from_slice(&q_star.breakpoints);
    cuts.extend_from_slice(&q_dag.breakpoints);
    cuts.push(q_dag.length);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * q_dag.length);
    for w in cuts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let vs = q_star.evaluate(mid);
        let vd = q_dag.evaluate(mid);
        out.push_str(&format!("{:.16e},{vs:.16e},{vd:.16e}\n", w[0]));
        out.push_str(&format!("{:.16e},{vs:.16e},{vd:.16e}\n", w[1]));
    }
    out
}

/// Sweep CSV: provenance, fixed header, one row per surviving cell
/// (descending delta, ascending seed), failures and the fitted rate as
/// trailing comments.
pub fn sweep_file(cfg: &ExperimentConfig, report: &SweepReport) -> String {
    let mut out = file_provenance(cfg);
    out.push_str("delta,h,tau,alpha,seed,e_q,J,iters,seconds\n");
    let mut rows = report.rows.clone();
    rows.sort_by(|a, b| {
        b.delta.partial_cmp(&a.delta).unwrap().then(a.seed.cmp(&b.seed))
    });
    for r in rows {
        let tau = r.tau.map(|t| format!("{t:.16e}")).unwrap_or_default();
        out.push_str(&format!(
            "{:.16e},{:.16e},{},{:.16e},{},{:.16e},{:.16e},{},{:.3}\n",
            r.delta, r.h, tau, r.alpha, r.seed, r.e_q, r.j, r.iterations, r.seconds
        ));
    }
    for f in &report.failures {
        out.push_str(&format!(
            "# failed delta={:.16e} seed={}: {}\n",
            f.delta, f.seed, f.message
        ));
    }
    if let Some(rate) = &report.fitted_rate {
        out.push_str(&format!(
            "# rate slope={:.16e} half_width_95={:.16e} levels={}\n",
            rate.slope,
            rate.half_width_95,
            report.medians.len()
        ));
    }
    out
}

/// Writes through a sibling temp file and renames, so concurrent cells
/// never expose partially written output.
pub fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, content)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
