//! Command-line harness around the robinfem library: mesh and data
//! generation, single reconstructions, noise sweeps with rate fits, and
//! chart regeneration from existing CSV reports.
//!
//! Exit codes: 0 on success, 2 on validation or input errors, 3 on
//! solver failures.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use robinfem::coeff::PiecewiseConstantBoundaryCoefficient;
use robinfem::experiment::{
    estimate_rate, file_provenance, history_file, reconstruction_file, run_single, run_sweep,
    sweep_file, write_atomic, ExperimentConfig, ModelKind,
};
use robinfem::fem::FemSpace;
use robinfem::inversion::HistoryRow;
use robinfem::mesh::{build_square_domain, generate_graded_mesh, MeshSpec};
use robinfem::noise::{observe, DataModel, NoiseSpec};
use robinfem::parabolic::TimeGrid;
use robinfem::plot::{history_svg, reconstruction_svg, sweep_svg};
use robinfem::{Error, Result};

#[derive(Parser)]
#[command(
    name = "robinfem",
    version,
    about = "Recover a piecewise-constant Robin boundary coefficient from noisy Cauchy data"
)]
struct Cli {
    /// Worker threads for sweep cells (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (default: the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Noise seed (default: the first seed listed in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the inversion mesh for one noise level and write it as trimesh v1.
    Mesh {
        #[arg(long)]
        config: PathBuf,
        /// Noise level the mesh schedule is evaluated at (default: the first level).
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Generate synthetic observations for one cell and write them as obsdata v1.
    Forward {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Run one reconstruction and write history and reconstruction reports.
    Invert {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Run every (delta, seed) cell, aggregate medians, and fit the rate.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit a convergence rate to the per-level medians of a sweep CSV.
    Rate {
        #[arg(long)]
        csv: PathBuf,
    },
    /// Re-render the SVG chart for an existing CSV report.
    Plot {
        #[arg(long)]
        csv: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // A second build_global in one process is rejected; the pool then
        // stays at its earlier width, which is harmless for a CLI.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(match e {
            Error::Validation(_) | Error::Io(_) => 2,
            Error::Solver(_) => 3,
        });
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Mesh { config, delta } => mesh_cmd(&config, delta, cli.out.as_deref()),
        Command::Forward { config, delta } => {
            forward_cmd(&config, delta, cli.seed, cli.out.as_deref())
        }
        Command::Invert { config, delta } => {
            invert_cmd(&config, delta, cli.seed, cli.out.as_deref())
        }
        Command::Sweep { config } => sweep_cmd(&config, cli.seed, cli.out.as_deref()),
        Command::Rate { csv } => rate_cmd(&csv),
        Command::Plot { csv } => plot_cmd(&csv, cli.out.as_deref()),
    }
}

fn out_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> Result<PathBuf> {
    let dir = flag.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn pick_delta(cfg: &ExperimentConfig, flag: Option<f64>) -> Result<f64> {
    match flag {
        Some(d) if d.is_finite() && d >= 0.0 => Ok(d),
        Some(_) => Err(Error::validation("--delta must be finite and >= 0")),
        None => Ok(cfg.deltas[0]),
    }
}

fn pick_seed(cfg: &ExperimentConfig, flag: Option<u64>) -> u64 {
    flag.unwrap_or(cfg.seeds[0])
}

fn mesh_cmd(config: &Path, delta: Option<f64>, out: Option<&Path>) -> Result<()> {
    let cfg = ExperimentConfig::from_file(config)?;
    let delta = pick_delta(&cfg, delta)?;
    let h = cfg.schedules.h(delta);
    let domain = build_square_domain(cfg.gamma_i, cfg.gamma_a_prime)?;
    let mesh = generate_graded_mesh(&domain, &MeshSpec::new(h, cfg.grading_r))?;
    let dir = out_dir(&cfg, out)?;
    let path = dir.join("mesh.txt");
    let mut text = file_provenance(&cfg);
    text.push_str(&mesh.write_text());
    write_atomic(&path, &text)?;
    println!(
        "mesh: {} vertices, {} triangles, h = {h:.6e} -> {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        path.display()
    );
    Ok(())
}

fn forward_cmd(
    config: &Path,
    delta: Option<f64>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = ExperimentConfig::from_file(config)?;
    let delta = pick_delta(&cfg, delta)?;
    let seed = pick_seed(&cfg, seed);
    let h = cfg.schedules.h(delta);
    let domain = build_square_domain(cfg.gamma_i, cfg.gamma_a_prime)?;
    let base = MeshSpec::new(h, cfg.grading_r);
    let mesh = generate_graded_mesh(&domain, &base)?;
    let space = FemSpace::new(mesh, domain.clone())?;
    let length = {
        let arc = space.arc(robinfem::fem::ArcSelector::GammaI);
        arc.end() - arc.start()
    };
    let q_dag = PiecewiseConstantBoundaryCoefficient::new(
        cfg.q_true_breakpoints.clone(),
        cfg.q_true_values.clone(),
        length,
    )?;
    let flux_kind = cfg.flux;
    let flux = move |s: f64, p: [f64; 2]| flux_kind.eval(s, p);
    let source_kind = cfg.u0_source;
    let source = move |p: [f64; 2]| source_kind.eval(p);
    let model = match cfg.model {
        ModelKind::Elliptic => DataModel::Elliptic,
        ModelKind::Parabolic { t_final } => {
            let tau = cfg
                .schedules
                .tau(delta)
                .ok_or_else(|| Error::validation("missing config key `tau0` (parabolic model)"))?;
            let steps = (t_final / tau).round().max(1.0) as usize;
            DataModel::Parabolic { grid: TimeGrid::new(t_final, steps)?, u0_source: &source }
        }
    };
    let data = observe(
        &domain,
        &base,
        &q_dag,
        &flux,
        &model,
        cfg.data_refinement_depth,
        &NoiseSpec { delta, seed },
        &space,
    )?;
    let dir = out_dir(&cfg, out)?;
    let path = dir.join("observations.txt");
    let mut text = file_provenance(&cfg);
    text.push_str(&robinfem::noise::write_text(&data));
    write_atomic(&path, &text)?;
    println!(
        "data: {} fine nodes, {} coarse nodes, delta = {delta:.3e}, seed = {seed} -> {}",
        data.fine_trace.arclengths.len(),
        data.coarse_projection.arclengths.len(),
        path.display()
    );
    Ok(())
}

fn invert_cmd(
    config: &Path,
    delta: Option<f64>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = ExperimentConfig::from_file(config)?;
    let delta = pick_delta(&cfg, delta)?;
    let seed = pick_seed(&cfg, seed);
    let run = run_single(&cfg, delta, seed)?;
    let dir = out_dir(&cfg, out)?;
    write_atomic(&dir.join("history.csv"), &history_file(&cfg, &run))?;
    write_atomic(&dir.join("reconstruction.csv"), &reconstruction_file(&cfg, &run))?;
    write_atomic(&dir.join("history.svg"), &history_svg(&run.result.iterate_history))?;
    write_atomic(
        &dir.join("reconstruction.svg"),
        &reconstruction_svg(&run.result.q_star, &run.q_dag),
    )?;
    println!(
        "invert: delta = {delta:.3e}, seed = {seed}, e_q = {:.6e}, J = {:.6e}, iterations = {}, stopped by {} -> {}",
        run.row.e_q,
        run.row.j,
        run.row.iterations,
        run.result.termination_reason,
        dir.display()
    );
    Ok(())
}

fn sweep_cmd(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let mut cfg = ExperimentConfig::from_file(config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    let report = run_sweep(&cfg)?;
    let dir = out_dir(&cfg, out)?;
    write_atomic(&dir.join("sweep.csv"), &sweep_file(&cfg, &report))?;
    write_atomic(&dir.join("sweep.svg"), &sweep_svg(&report.medians, report.fitted_rate.as_ref()))?;
    for (delta, med) in &report.medians {
        println!("sweep: delta = {delta:.3e}, median e_q = {med:.6e}");
    }
    for f in &report.failures {
        eprintln!("sweep: cell delta = {:.3e}, seed = {} failed: {}", f.delta, f.seed, f.message);
    }
    match &report.fitted_rate {
        Some(rate) => println!(
            "sweep: rate = {:.4} +/- {:.4} over {} levels -> {}",
            rate.slope,
            rate.half_width_95,
            report.medians.len(),
            dir.display()
        ),
        None => println!(
            "sweep: no rate (needs at least 3 levels with positive medians) -> {}",
            dir.display()
        ),
    }
    Ok(())
}

// Splits a CSV report into (header, data rows), skipping provenance and
// failure comments.
fn csv_body(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines().filter(|l| !l.trim_start().starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::validation("CSV file has no header line"))?
        .split(',')
        .map(|c| c.trim().to_string())
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(line.split(',').map(|c| c.trim().to_string()).collect());
    }
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::validation(format!("CSV is missing the `{name}` column")))
}

fn parse_field<T: std::str::FromStr>(row: &[String], idx: usize) -> Result<T> {
    row.get(idx)
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| Error::validation(format!("malformed CSV field in column {idx}")))
}

// Per-level medians of the e_q column, descending in delta.
fn sweep_medians(header: &[String], rows: &[Vec<String>]) -> Result<Vec<(f64, f64)>> {
    let d_col = column(header, "delta")?;
    let e_col = column(header, "e_q")?;
    let mut groups: Vec<(f64, Vec<f64>)> = Vec::new();
    for row in rows {
        let delta: f64 = parse_field(row, d_col)?;
        let e: f64 = parse_field(row, e_col)?;
        match groups.iter_mut().find(|(d, _)| *d == delta) {
            Some((_, v)) => v.push(e),
            None => groups.push((delta, vec![e])),
        }
    }
    groups.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    Ok(groups
        .into_iter()
        .map(|(d, mut v)| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = v.len();
            let med = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
            (d, med)
        })
        .collect())
}

fn rate_cmd(csv: &Path) -> Result<()> {
    let text = std::fs::read_to_string(csv)?;
    let (header, rows) = csv_body(&text)?;
    let medians = sweep_medians(&header, &rows)?;
    let rate = estimate_rate(&medians)?;
    println!(
        "rate: slope = {:.4} +/- {:.4} over {} levels",
        rate.slope,
        rate.half_width_95,
        medians.len()
    );
    Ok(())
}

fn plot_cmd(csv: &Path, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(csv)?;
    let (header, rows) = csv_body(&text)?;
    let svg = if header.first().map(String::as_str) == Some("k") {
        let j_col = column(&header, "J")?;
        let e_col = column(&header, "e_q")?;
        let s_col = column(&header, "step")?;
        let mut hist = Vec::with_capacity(rows.len());
        for row in &rows {
            let e_q = match row.get(e_col).map(String::as_str) {
                Some("") | None => None,
                Some(raw) => Some(raw.parse().map_err(|_| {
                    Error::validation("malformed CSV field in column e_q".to_string())
                })?),
            };
            hist.push(HistoryRow {
                k: parse_field(row, 0)?,
                j: parse_field(row, j_col)?,
                j_energy: 0.0,
                j_robin: 0.0,
                j_l2: 0.0,
                e_q,
                step: parse_field(row, s_col)?,
                grad_sq: 0.0,
            });
        }
        history_svg(&hist)
    } else if header.first().map(String::as_str) == Some("s") {
        let star_col = column(&header, "q_star")?;
        let dag_col = column(&header, "q_dag")?;
        if rows.len() < 2 || rows.len() % 2 != 0 {
            return Err(Error::validation(
                "reconstruction CSV must pair interval start and end rows",
            ));
        }
        let mut cuts = vec![0.0f64];
        let mut star_vals = Vec::new();
        let mut dag_vals = Vec::new();
        for pair in rows.chunks(2) {
            let end: f64 = parse_field(&pair[1], 0)?;
            cuts.push(end);
            star_vals.push(parse_field(&pair[0], star_col)?);
            dag_vals.push(parse_field(&pair[0], dag_col)?);
        }
        let length = *cuts.last().unwrap();
        let breakpoints: Vec<f64> = cuts[1..cuts.len() - 1].to_vec();
        let q_star =
            PiecewiseConstantBoundaryCoefficient::new(breakpoints.clone(), star_vals, length)?;
        let q_dag = PiecewiseConstantBoundaryCoefficient::new(breakpoints, dag_vals, length)?;
        reconstruction_svg(&q_star, &q_dag)
    } else if header.first().map(String::as_str) == Some("delta") {
        let medians = sweep_medians(&header, &rows)?;
        let positive: Vec<(f64, f64)> =
            medians.iter().copied().filter(|(_, e)| *e > 0.0).collect();
        let rate = if positive.len() >= 3 { Some(estimate_rate(&positive)?) } else { None };
        sweep_svg(&medians, rate.as_ref())
    } else {
        return Err(Error::validation(format!(
            "unrecognized CSV header `{}` (expected a history, reconstruction, or sweep report)",
            header.join(",")
        )));
    };
    let stem = csv
        .file_stem()
        .ok_or_else(|| Error::validation(format!("not a file path: {}", csv.display())))?;
    let dir = match out {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            d.to_path_buf()
        }
        None => csv.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    let path = dir.join(format!("{}.svg", stem.to_string_lossy()));
    write_atomic(&path, &svg)?;
    println!("plot: -> {}", path.display());
    Ok(())
}
