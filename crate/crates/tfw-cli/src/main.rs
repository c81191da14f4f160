//! `tfw` command line: JSON config in; JSON report, CSV tables, and binary
//! field dumps out.
//!
//! Exit codes: 0 when the run succeeds and every declared threshold check
//! passes; 2 when the run succeeds but at least one threshold fails (the
//! report is still written); 1 on any error. Usage errors print the config
//! schema.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use config::{parse_config, RunConfig};
use tfw::experiments::{
    locality_experiment, neutrality_experiment, screening_experiment, tdl_experiment, Check,
    ExperimentReport,
};
use tfw::fft::SpectralOps;
use tfw::field::ScalarField;
use tfw::ground_state::{solve_ground_state, InitGuess, SolverOptions};
use tfw::io::{force_csv, site_energy_csv, write_report};
use tfw::linear_response::{
    fd_consistency, perturbation_density, solve_linearised, ResponseOptions,
};
use tfw::nuclei::assemble_density;
use tfw::site_energy::{
    build_partition, invariance_suite, site_energies, site_forces, total_force, Flavor,
    ForceMethod, ForceOptions, DEFAULT_GAMMA_TILDE,
};
use tfw::Grid;

const SCHEMA_HELP: &str = "\
Config schema (JSON, unknown keys rejected):
{
  \"grid\":       {\"n\": <even int >= 4>, \"L\": <cell edge length>},
  \"nuclei\":     {\"background\": <uniform level>, \"r0\": <smearing radius>,
               \"coords\": [[x,y,z], ...], \"lattice\": <nuclei per axis>,
               \"jitter\": <amplitude>},
  \"solver\":     {\"tol\": <residual tolerance>, \"max_iter\": <cap>,
               \"init\": \"uniform\" | \"random\"},
  \"experiment\": {\"name\": <subcommand>,
               \"displace_index\": <k>, \"displace_offset\": [dx,dy,dz],
               \"impurity_z\": <charge>, \"impurity_center\": [x,y,z],
               \"radii\": [r, ...], \"observation_radius\": <r>,
               \"fit_window\": [lo,hi], \"floor\": <magnitude>,
               \"shell_width\": <w>, \"flavor\": \"E1\" | \"E2\",
               \"gamma_tilde\": <kernel width>, \"moved\": <k>,
               \"direction\": [vx,vy,vz], \"cd_step\": <h>,
               \"fd_steps\": [h, ...]},
  \"output_dir\": <path>,
  \"seed\":       <int>
}
Output directory precedence: --output flag, then output_dir in the config,
then $TFW_OUTPUT_DIR/<subcommand>, then ./tfw-runs/<subcommand>.";

#[derive(Parser)]
#[command(
    name = "tfw",
    version,
    about = "Periodic-cell electronic ground states, their linear response, and decay experiments",
    after_help = SCHEMA_HELP
)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; overrides the config and TFW_OUTPUT_DIR.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the ground state and dump u, phi, and a state summary.
    Solve(ConfigArg),
    /// Decay of the response to a displaced nucleus.
    Locality(ConfigArg),
    /// Screened potential of a charged impurity in a homogeneous background.
    Screening(ConfigArg),
    /// Far-nuclei deletion errors over growing deletion radii.
    Tdl(ConfigArg),
    /// Charge neutrality of a localized defect.
    Neutrality(ConfigArg),
    /// Partition the cell energy into per-nucleus site energies.
    SiteEnergies(ConfigArg),
    /// Site-force rows, analytic and by central differences.
    Forces(ConfigArg),
    /// Permutation / translation / rotation invariance of site energies.
    Invariance(ConfigArg),
    /// Tangent solve for a nuclear motion plus difference-quotient checks.
    Linearise(ConfigArg),
    /// Check a config file against the schema without running anything.
    ValidateConfig {
        /// JSON config to check.
        config: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Solve(_) => "solve",
            Command::Locality(_) => "locality",
            Command::Screening(_) => "screening",
            Command::Tdl(_) => "tdl",
            Command::Neutrality(_) => "neutrality",
            Command::SiteEnergies(_) => "site-energies",
            Command::Forces(_) => "forces",
            Command::Invariance(_) => "invariance",
            Command::Linearise(_) => "linearise",
            Command::ValidateConfig { .. } => "validate-config",
        }
    }
}

enum Outcome {
    Passed,
    ThresholdFailed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{err}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprintln!("{err}");
                    eprintln!("{SCHEMA_HELP}");
                    ExitCode::from(1)
                }
            };
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(err) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: applying the thread cap: {err}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(Outcome::Passed) => ExitCode::SUCCESS,
        Ok(Outcome::ThresholdFailed) => ExitCode::from(2),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    let config_path = match &cli.command {
        Command::ValidateConfig { config } => return validate_config(config),
        Command::Solve(arg)
        | Command::Locality(arg)
        | Command::Screening(arg)
        | Command::Tdl(arg)
        | Command::Neutrality(arg)
        | Command::SiteEnergies(arg)
        | Command::Forces(arg)
        | Command::Invariance(arg)
        | Command::Linearise(arg) => &arg.config,
    };
    let ctx = Ctx::prepare(cli.command.name(), config_path, cli.output.as_deref())?;
    let report = match &cli.command {
        Command::Solve(_) => cmd_solve(&ctx)?,
        Command::Locality(_) => cmd_locality(&ctx)?,
        Command::Screening(_) => cmd_screening(&ctx)?,
        Command::Tdl(_) => cmd_tdl(&ctx)?,
        Command::Neutrality(_) => cmd_neutrality(&ctx)?,
        Command::SiteEnergies(_) => cmd_site_energies(&ctx)?,
        Command::Forces(_) => cmd_forces(&ctx)?,
        Command::Invariance(_) => cmd_invariance(&ctx)?,
        Command::Linearise(_) => cmd_linearise(&ctx)?,
        Command::ValidateConfig { .. } => unreachable!("handled above"),
    };
    ctx.finish(report)
}

fn validate_config(path: &Path) -> anyhow::Result<Outcome> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let cfg = parse_config(&text).with_context(|| format!("parsing {}", path.display()))?;
    let grid = cfg.grid.build()?;
    cfg.solver.build(cfg.seed)?;
    cfg.nuclei.build(&grid, cfg.seed)?;
    cfg.experiment.flavor()?;
    println!("config ok: {}", path.display());
    Ok(Outcome::Passed)
}

/// Everything a subcommand needs: the parsed config, the spectral toolbox,
/// and the resolved output directory.
struct Ctx {
    cfg: RunConfig,
    raw: serde_json::Value,
    raw_text: String,
    grid: Grid,
    ops: SpectralOps,
    outdir: PathBuf,
}

impl Ctx {
    fn prepare(sub: &str, path: &Path, output_flag: Option<&Path>) -> anyhow::Result<Ctx> {
        let raw_text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let cfg = parse_config(&raw_text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.experiment.check_name(sub)?;
        let grid = cfg.grid.build()?;
        let ops = SpectralOps::new(grid);
        let raw = serde_json::from_str(&raw_text)?;
        let outdir = match (output_flag, &cfg.output_dir) {
            (Some(flag), _) => flag.to_path_buf(),
            (None, Some(dir)) => dir.clone(),
            (None, None) => std::env::var_os("TFW_OUTPUT_DIR")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("tfw-runs"))
                .join(sub),
        };
        Ok(Ctx { cfg, raw, raw_text, grid, ops, outdir })
    }

    fn solver(&self) -> tfw::Result<SolverOptions> {
        self.cfg.solver.build(self.cfg.seed)
    }

    fn nuclei(&self) -> tfw::Result<tfw::nuclei::NuclearConfig> {
        self.cfg.nuclei.build(&self.grid, self.cfg.seed)
    }

    /// Write the report plus artifacts, print one line per check, and map
    /// the outcome to the exit code contract.
    fn finish(&self, mut report: ExperimentReport) -> anyhow::Result<Outcome> {
        report.config.insert("run_config".into(), self.raw.clone());
        report.attachments.insert("config.json".into(), self.raw_text.clone());
        let path = write_report(&self.outdir, &report)?;
        let mut failed = 0usize;
        for (name, check) in &report.checks {
            let status = if check.passed { "pass" } else { "FAIL" };
            println!("{status}  {name}: {} {} {}", check.value, check.op, check.threshold);
            if !check.passed {
                failed += 1;
            }
        }
        println!("report: {}", path.display());
        Ok(if failed == 0 { Outcome::Passed } else { Outcome::ThresholdFailed })
    }
}

fn rel_gap(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs().max(f64::MIN_POSITIVE)
}

fn cmd_solve(ctx: &Ctx) -> anyhow::Result<ExperimentReport> {
    let start = Instant::now();
    let nuclei = ctx.nuclei()?;
    let solver = ctx.solver()?;
    let m = assemble_density(&ctx.grid, &nuclei)?;
    let state = solve_ground_state(&ctx.ops, &m, &solver)?;

    let mut report = ExperimentReport::new("solve");
    report.solver_tol = solver.tol;
    report.metrics.insert("theta".into(), state.theta);
    report.metrics.insert("energy".into(), state.energy);
    report.metrics.insert("iterations".into(), state.iterations as f64);
    report.metrics.insert("residual_u".into(), state.residual_u);
    report.metrics.insert("residual_phi".into(), state.residual_phi);

    let total_charge = m.integrate();
    let charge_gap = (state.u.mapped(|v| v * v).integrate() - total_charge).abs();
    report
        .checks
        .insert("charge_balance".into(), Check::at_most(charge_gap, 1e-8 * total_charge.max(1.0)));
    report.checks.insert(
        "el_residual".into(),
        Check::at_most(state.residual_u.max(state.residual_phi), solver.tol),
    );

    let summary = serde_json::json!({
        "n": ctx.grid.n,
        "L": ctx.grid.l,
        "theta": state.theta,
        "energy": state.energy,
        "iterations": state.iterations,
        "residual_u": state.residual_u,
        "residual_phi": state.residual_phi,
        "potential_gauge":
            "phi has zero cell mean; the constant part of the effective potential lives in theta",
    });
    report
        .attachments
        .insert("state.json".into(), serde_json::to_string_pretty(&summary)? + "\n");
    report.fields.insert("u".into(), state.u);
    report.fields.insert("phi".into(), state.phi);
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn cmd_locality(ctx: &Ctx) -> anyhow::Result<ExperimentReport> {
    let nuclei = ctx.nuclei()?;
    let perturbation = ctx.cfg.experiment.perturbation(&ctx.grid, &nuclei)?;
    let opts = ctx.cfg.experiment.options(ctx.solver()?);
    Ok(locality_experiment(&ctx.ops, &nuclei, &perturbation, &opts)?)
}

fn cmd_screening(ctx: &Ctx) -> anyhow::Result<ExperimentReport> {
    let nc = &ctx.cfg.nuclei;
    if !nc.coords.is_empty() || nc.lattice.is_some() {
        anyhow::bail!("screening runs in a homogeneous background; remove discrete nuclei");
    }
    let m0 = nc.background;
    let z = ctx.cfg.experiment.impurity_z.unwrap_or(0.1);
    let r0 = nc.r0.unwrap_or(1.0);
    let opts = ctx.cfg.experiment.options(ctx.solver()?);
    Ok(screening_experiment(&ctx.ops, m0, z, r0, &opts)?)
}

fn cmd_tdl(ctx: &Ctx) -> anyhow::Result<ExperimentReport> {
    let nuclei = ctx.nuclei()?;
    let radii = ctx
        .cfg
        .experiment
        .radii
        .clone()
        .ok_or_else(|| anyhow::anyhow!("tdl needs experiment.radii (deletion radii)"))?;
    let observation_radius = ctx.cfg.experiment.observation_radius.unwrap_or(2.0);
    let opts = ctx.cfg.experiment.options(ctx.solver()?);
    Ok(tdl_experiment(&ctx.ops, &nuclei, &radii, observation_radius, &opts)?)
}

fn cmd_neutrality(ctx: &Ctx) -> anyhow::Result<ExperimentReport> {
    let nuclei = ctx.nuclei()?;
    let perturbation = ctx.cfg.experiment.perturbation(&ctx.grid, &nuclei)?;
    let radii = match &ctx.cfg.experiment.radii {
        Some(radii) => radii.clone(),
        None => {
            // Six nested balls from twice the smearing radius out to just
            // inside the wrap-around shadow.
            let lo = 2.0 * nuclei.shape.r0;
            let hi = 0.45 * ctx.grid.l;
            anyhow::ensure!(lo < hi, "cell too small for default ball radii; set experiment.radii");
            (0..6).map(|i| lo + (hi - lo) * i as f64 / 5.0).collect()
        }
    };
    let opts = ctx.cfg.experiment.options(ctx.solver()?);
    Ok(neutrality_experiment(&ctx.ops, &nuclei, &perturbation, &radii, &opts)?)
}

fn cmd_site_energies(ctx: &Ctx) -> anyhow::Result<ExperimentReport> {
    let start = Instant::now();
    let nuclei = ctx.nuclei()?;
    let solver = ctx.solver()?;
    let flavor = ctx.cfg.experiment.flavor()?;
    let gamma_tilde = ctx.cfg.experiment.gamma_tilde.unwrap_or(DEFAULT_GAMMA_TILDE);
    let m = assemble_density(&ctx.grid, &nuclei)?;
    let state = solve_ground_state(&ctx.ops, &m, &solver)?;
    let partition = build_partition(&ctx.grid, &nuclei, gamma_tilde)?;

    let mut weight_sum = ScalarField::zeros(ctx.grid);
    for member in &partition.members {
        weight_sum.add_scaled(1.0, member);
    }
    let partition_dev = weight_sum.mapped(|s| s - 1.0).sup_norm();

    let sites = site_energies(&ctx.ops, &state, &m, &partition, flavor)?;
    let other_flavor = match flavor {
        Flavor::E1 => Flavor::E2,
        Flavor::E2 => Flavor::E1,
    };
    let other = site_energies(&ctx.ops, &state, &m, &partition, other_flavor)?;

    let mut report = ExperimentReport::new("site-energies");
    report.solver_tol = solver.tol;
    report.metrics.insert("energy".into(), state.energy);
    report.metrics.insert("theta".into(), state.theta);
    report.metrics.insert(format!("total_{}", flavor.as_str()), sites.total);
    report.metrics.insert(format!("total_{}", other_flavor.as_str()), other.total);
    report
        .checks
        .insert("partition_sum_dev".into(), Check::at_most(partition_dev, 1e-12));
    report.checks.insert(
        "sites_sum_to_energy".into(),
        Check::at_most(rel_gap(sites.total, state.energy), 1e-9),
    );
    report
        .checks
        .insert("flavors_agree".into(), Check::at_most(rel_gap(other.total, sites.total), 1e-9));
    report
        .attachments
        .insert("sites.csv".into(), site_energy_csv(&nuclei.coords, &sites.energies));
    report.notes.push(
        "site energies are reported in the zero-mean potential gauge; a constant gauge shift \
         moves individual values but not their sum or their derivatives"
            .into(),
    );
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn cmd_forces(ctx: &Ctx) -> anyhow::Result<ExperimentReport> {
    let start = Instant::now();
    let nuclei = ctx.nuclei()?;
    let solver = ctx.solver()?;
    let ex = &ctx.cfg.experiment;
    let flavor = ex.flavor()?;
    let gamma_tilde = ex.gamma_tilde.unwrap_or(DEFAULT_GAMMA_TILDE);
    let moved = ex.moved_index(&ctx.grid, &nuclei)?;
    let direction = ex.direction.unwrap_or([1.0, 0.0, 0.0]);

    let m = assemble_density(&ctx.grid, &nuclei)?;
    let state = solve_ground_state(&ctx.ops, &m, &solver)?;
    let partition = build_partition(&ctx.grid, &nuclei, gamma_tilde)?;

    let mut fopts = ForceOptions { solver: solver.clone(), ..ForceOptions::default() };
    if let Some(h) = ex.cd_step {
        fopts.cd_step = h;
    }
    fopts.method = ForceMethod::Linearised;
    let lin = site_forces(&ctx.ops, &state, &m, &nuclei, &partition, moved, direction, flavor, &fopts)?;
    fopts.method = ForceMethod::CentralDifference;
    let cd = site_forces(&ctx.ops, &state, &m, &nuclei, &partition, moved, direction, flavor, &fopts)?;

    let entry_gap = lin
        .entries
        .iter()
        .zip(&cd.entries)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let entry_tol = 1e-6f64.max(10.0 * fopts.cd_step * fopts.cd_step);
    let reference = total_force(&ctx.ops, &state, &nuclei, moved, direction)?;
    let sites = nuclei.coords.len() as f64;

    let mut report = ExperimentReport::new("forces");
    report.solver_tol = solver.tol;
    report.metrics.insert("total_linearised".into(), lin.total());
    report.metrics.insert("total_central_difference".into(), cd.total());
    report.metrics.insert("total_reference".into(), reference);
    report
        .checks
        .insert("entrywise_agreement".into(), Check::at_most(entry_gap, entry_tol));
    report.checks.insert(
        "linearised_total_vs_identity".into(),
        Check::at_most((lin.total() - reference).abs(), 1e-6 * reference.abs().max(1.0)),
    );
    report.checks.insert(
        "cd_total_vs_identity".into(),
        Check::at_most(
            (cd.total() - reference).abs(),
            entry_tol * sites + 1e-6 * reference.abs(),
        ),
    );
    report
        .attachments
        .insert("forces.csv".into(), force_csv(&ctx.grid, &nuclei.coords, &[lin, cd]));
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn cmd_invariance(ctx: &Ctx) -> anyhow::Result<ExperimentReport> {
    let start = Instant::now();
    let nuclei = ctx.nuclei()?;
    let solver = ctx.solver()?;
    let flavor = ctx.cfg.experiment.flavor()?;
    let gamma_tilde = ctx.cfg.experiment.gamma_tilde.unwrap_or(DEFAULT_GAMMA_TILDE);
    let suite = invariance_suite(&ctx.ops, &nuclei, gamma_tilde, flavor, &solver)?;

    let mut report = ExperimentReport::new("invariance");
    report.solver_tol = solver.tol;
    report.metrics.insert("permutation_dev".into(), suite.permutation_dev);
    report.metrics.insert("translation_dev".into(), suite.translation_dev);
    report.metrics.insert("rotation_dev".into(), suite.rotation_dev);
    report
        .checks
        .insert("permutation_exact".into(), Check::at_most(suite.permutation_dev, 0.0));
    report
        .checks
        .insert("translation_invariance".into(), Check::at_most(suite.translation_dev, 1e-8));
    report
        .checks
        .insert("rotation_invariance".into(), Check::at_most(suite.rotation_dev, 1e-8));
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn cmd_linearise(ctx: &Ctx) -> anyhow::Result<ExperimentReport> {
    let start = Instant::now();
    let nuclei = ctx.nuclei()?;
    let solver = ctx.solver()?;
    let ex = &ctx.cfg.experiment;
    let moved = ex.moved_index(&ctx.grid, &nuclei)?;
    let direction = ex.direction.unwrap_or([1.0, 0.0, 0.0]);
    let steps = ex.fd_steps.clone().unwrap_or_else(|| vec![0.2, 0.1, 0.05, 0.025]);

    let m = assemble_density(&ctx.grid, &nuclei)?;
    let state = solve_ground_state(&ctx.ops, &m, &solver)?;
    let m_dot = perturbation_density(&ctx.grid, &nuclei, moved, direction)?;
    let lin = solve_linearised(&ctx.ops, &state, &m_dot, &ResponseOptions::default())?;

    let rows = fd_consistency(&state, &lin, &steps, |h| {
        let moved_cfg = nuclei.perturbed(moved, direction, h, &ctx.grid);
        let m_h = assemble_density(&ctx.grid, &moved_cfg)?;
        let warm = SolverOptions { init: InitGuess::Supplied(state.u.clone()), ..solver.clone() };
        Ok(solve_ground_state(&ctx.ops, &m_h, &warm)?.u)
    })?;

    let mut report = ExperimentReport::new("linearise");
    report.solver_tol = solver.tol;
    report.metrics.insert("theta_dot".into(), lin.theta_dot);
    report.metrics.insert("tangent_residual".into(), lin.residual);
    report.metrics.insert("cg_iterations".into(), lin.cg_iterations as f64);

    let mut csv = String::from("h,error,ratio\n");
    for row in &rows {
        let ratio = row.ratio.map(|r| r.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{ratio}\n", row.h, row.error));
        if let Some(ratio) = row.ratio {
            // Halving the step should roughly halve the one-sided
            // difference-quotient error.
            report
                .checks
                .insert(format!("fd_ratio_h{}_low", row.h), Check::at_least(ratio, 0.35));
            report
                .checks
                .insert(format!("fd_ratio_h{}_high", row.h), Check::at_most(ratio, 0.65));
        }
    }
    report.attachments.insert("fd_consistency.csv".into(), csv);
    report.fields.insert("u_dot".into(), lin.u_dot);
    report.fields.insert("phi_dot".into(), lin.phi_dot);
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
