//! Decay-measurement harnesses.
//!
//! Each experiment runs one or more full nonlinear solves, reduces fields to
//! radial curves around a distinguished site, fits log-linear decay models,
//! and scores the results against declared thresholds. Reports are built on
//! ordered maps and all reductions are sequential, so a report is a
//! deterministic function of its inputs.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use crate::error::{Result, TfwError};
use crate::fft::SpectralOps;
use crate::field::{neumaier_sum, ScalarField};
use crate::grid::Grid;
use crate::ground_state::{solve_ground_state, GroundState, InitGuess, SolverOptions};
use crate::linear_response::screening_constants;
use crate::nuclei::{assemble_density, NuclearConfig};

/// Magnitudes at or below this are treated as numerically zero when fitting.
pub const DEFAULT_FLOOR: f64 = 1e-12;

/// A log-linear fit needs at least this many surviving points.
pub const MIN_FIT_POINTS: usize = 5;

// ---------------------------------------------------------------------------
// Decay fitting
// ---------------------------------------------------------------------------

/// Least-squares fit of `log y = log c - gamma * r` over positive magnitudes.
#[derive(Debug, Clone, Serialize)]
pub struct DecayFit {
    /// Fitted prefactor `c`.
    pub c: f64,
    /// Fitted decay rate; positive means the data shrink with distance.
    pub gamma: f64,
    /// Coefficient of determination in log space, clamped to `[0, 1]`.
    pub r_squared: f64,
    /// Magnitude floor below which points were discarded.
    pub floor: f64,
    /// Number of points that entered the regression.
    pub points_used: usize,
    /// Set when the surviving magnitudes are constant, which leaves the
    /// goodness-of-fit undefined; `r_squared` is reported as zero then.
    pub degenerate: bool,
    /// The `(r, y)` pairs the regression consumed.
    pub points: Vec<[f64; 2]>,
}

/// Fit `log y = log c - gamma * r` by least squares on the points with
/// `y > floor`, requiring at least [`MIN_FIT_POINTS`] survivors.
pub fn decay_fit(points: &[[f64; 2]], floor: f64) -> Result<DecayFit> {
    let kept: Vec<[f64; 2]> = points
        .iter()
        .filter(|p| p[0].is_finite() && p[1].is_finite() && p[1] > floor)
        .copied()
        .collect();
    if kept.len() < MIN_FIT_POINTS {
        return Err(TfwError::TooFewPoints { needed: MIN_FIT_POINTS, got: kept.len() });
    }

    let n = kept.len() as f64;
    let logs: Vec<f64> = kept.iter().map(|p| p[1].ln()).collect();
    let r_mean = neumaier_sum(&kept.iter().map(|p| p[0]).collect::<Vec<_>>()) / n;
    let log_mean = neumaier_sum(&logs) / n;

    let mut srr = 0.0;
    let mut srl = 0.0;
    let mut sll = 0.0;
    for (p, &ly) in kept.iter().zip(&logs) {
        let dr = p[0] - r_mean;
        let dl = ly - log_mean;
        srr += dr * dr;
        srl += dr * dl;
        sll += dl * dl;
    }
    if srr <= 0.0 {
        return Err(TfwError::BadConfig(
            "cannot fit a decay rate: all points share one distance".into(),
        ));
    }

    let slope = srl / srr;
    let intercept = log_mean - slope * r_mean;
    let gamma = -slope;
    let c = intercept.exp();

    let (r_squared, degenerate) = if sll <= 0.0 {
        (0.0, true)
    } else {
        let mut ss_res = 0.0;
        for (p, &ly) in kept.iter().zip(&logs) {
            let e = ly - (intercept + slope * p[0]);
            ss_res += e * e;
        }
        ((1.0 - ss_res / sll).clamp(0.0, 1.0), false)
    };

    if !gamma.is_finite() {
        return Err(TfwError::BadConfig("decay fit produced a non-finite rate".into()));
    }
    Ok(DecayFit { c, gamma, r_squared, floor, points_used: kept.len(), degenerate, points: kept })
}

// ---------------------------------------------------------------------------
// Radial reduction
// ---------------------------------------------------------------------------

/// One spherical shell of a radial reduction.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ShellRow {
    /// Shell mid-radius.
    pub r: f64,
    /// Largest magnitude in the shell.
    pub max_abs: f64,
    /// Signed mean over the shell (sign changes mark oscillation nodes).
    pub mean: f64,
    /// Number of grid points in the shell.
    pub count: usize,
}

/// Shell-binned maxima and means of a field around a center.
#[derive(Debug, Clone, Serialize)]
pub struct RadialProfile {
    pub width: f64,
    pub rows: Vec<ShellRow>,
}

impl RadialProfile {
    /// Render as CSV with the `r,max_abs,mean,count` schema.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("r,max_abs,mean,count\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", row.r, row.max_abs, row.mean, row.count));
        }
        out
    }

    /// `(r, max_abs)` pairs, the fit-ready view of the profile.
    pub fn max_points(&self) -> Vec<[f64; 2]> {
        self.rows.iter().map(|s| [s.r, s.max_abs]).collect()
    }
}

/// Bin a field into spherical shells of the given width around `center`,
/// using minimum-image distances, recording per-shell maxima of `|f|` and
/// signed means. Empty shells are omitted.
pub fn radial_profile(field: &ScalarField, center: [f64; 3], width: f64) -> Result<RadialProfile> {
    let grid = field.grid;
    if !(width > 0.0 && width.is_finite()) {
        return Err(TfwError::BadConfig(format!("shell width must be positive, got {width}")));
    }
    let r_max = 3.0f64.sqrt() * grid.l / 2.0;
    let bins = (r_max / width).ceil() as usize + 1;
    let mut max_abs = vec![0.0f64; bins];
    let mut sums = vec![Vec::<f64>::new(); bins];

    for (idx, &v) in field.data.iter().enumerate() {
        let (i, j, k) = grid.coords_of(idx);
        let p = grid.point(i, j, k);
        let r = grid.min_distance(p, center);
        let b = ((r / width) as usize).min(bins - 1);
        if v.abs() > max_abs[b] {
            max_abs[b] = v.abs();
        }
        sums[b].push(v);
    }

    let rows = (0..bins)
        .filter(|&b| !sums[b].is_empty())
        .map(|b| ShellRow {
            r: (b as f64 + 0.5) * width,
            max_abs: max_abs[b],
            mean: neumaier_sum(&sums[b]) / sums[b].len() as f64,
            count: sums[b].len(),
        })
        .collect();
    Ok(RadialProfile { width, rows })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// A single measured value scored against a declared threshold.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub value: f64,
    pub threshold: f64,
    /// Comparison applied, one of `"<="`, `">="`, `">"`, `"<"`.
    pub op: String,
    pub passed: bool,
}

impl Check {
    pub fn at_most(value: f64, threshold: f64) -> Self {
        Check { value, threshold, op: "<=".into(), passed: value <= threshold }
    }
    pub fn at_least(value: f64, threshold: f64) -> Self {
        Check { value, threshold, op: ">=".into(), passed: value >= threshold }
    }
    pub fn above(value: f64, threshold: f64) -> Self {
        Check { value, threshold, op: ">".into(), passed: value > threshold }
    }
    pub fn below(value: f64, threshold: f64) -> Self {
        Check { value, threshold, op: "<".into(), passed: value < threshold }
    }
}

/// Everything one experiment produced: input echo, curves, fits, threshold
/// checks, free-form metrics, and the fields worth dumping to disk.
///
/// The threshold values are this harness's own choices (recorded per check);
/// the decay statements they score only guarantee that finite constants
/// exist. Map-based fields keep serialization order deterministic.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    /// Echo of the inputs that shaped the run.
    pub config: BTreeMap<String, serde_json::Value>,
    /// CSV payloads keyed by curve name (`r,max_abs,mean,count` schema).
    pub curves: BTreeMap<String, String>,
    pub fits: BTreeMap<String, DecayFit>,
    pub checks: BTreeMap<String, Check>,
    /// Scalar observables that carry no pass/fail semantics.
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    /// `[r_min, r_max]` window fits were restricted to.
    pub fit_window: [f64; 2],
    /// Effective magnitude floor (user floor or solver-noise floor).
    pub floor: f64,
    /// Ground-state residual tolerance the solves ran at.
    pub solver_tol: f64,
    /// Set when the two inputs were identical and the run short-circuited.
    pub trivial: bool,
    pub runtime_seconds: f64,
    /// Fields worth persisting, keyed by artifact name. Not serialized; the
    /// caller dumps them next to the report.
    #[serde(skip)]
    pub fields: BTreeMap<String, ScalarField>,
    /// Pre-rendered companion files (config echoes, tables), keyed by file
    /// name. Not serialized; written next to the report.
    #[serde(skip)]
    pub attachments: BTreeMap<String, String>,
}

impl ExperimentReport {
    /// Empty report carrying only the experiment name.
    pub fn new(name: &str) -> Self {
        ExperimentReport {
            name: name.into(),
            config: BTreeMap::new(),
            curves: BTreeMap::new(),
            fits: BTreeMap::new(),
            checks: BTreeMap::new(),
            metrics: BTreeMap::new(),
            notes: Vec::new(),
            fit_window: [0.0, 0.0],
            floor: DEFAULT_FLOOR,
            solver_tol: 0.0,
            trivial: false,
            runtime_seconds: 0.0,
            fields: BTreeMap::new(),
            attachments: BTreeMap::new(),
        }
    }

    /// True when every threshold check passed.
    pub fn passed(&self) -> bool {
        self.checks.values().all(|c| c.passed)
    }
}

/// Knobs shared by all experiments.
#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub solver: SolverOptions,
    /// Shell width for radial reductions; defaults to the grid spacing.
    pub shell_width: Option<f64>,
    /// Magnitude floor for fits; raised to `10 * solver.tol` if smaller, so
    /// fitted rates never lean on solver noise.
    pub floor: f64,
    /// Fit window `[r_min, r_max]`; defaults to `[2 r0, 0.4 L]`, keeping the
    /// near field and the wrap-around shadow out of the regression.
    pub fit_window: Option<[f64; 2]>,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            solver: SolverOptions::default(),
            shell_width: None,
            floor: DEFAULT_FLOOR,
            fit_window: None,
        }
    }
}

impl ExperimentOptions {
    fn effective_floor(&self) -> f64 {
        self.floor.max(10.0 * self.solver.tol)
    }

    fn window(&self, r0: f64, l: f64) -> [f64; 2] {
        self.fit_window.unwrap_or([2.0 * r0, 0.4 * l])
    }

    fn quiet_solver(&self) -> SolverOptions {
        let mut s = self.solver.clone();
        s.record_trace = false;
        s
    }
}

fn window_points(points: &[[f64; 2]], window: [f64; 2]) -> Vec<[f64; 2]> {
    points.iter().filter(|p| p[0] >= window[0] && p[0] <= window[1]).copied().collect()
}

fn echo_solver(opts: &SolverOptions) -> serde_json::Value {
    json!({
        "tol": opts.tol,
        "max_iter": opts.max_iter,
        "cg_tol": opts.cg_tol,
    })
}

// ---------------------------------------------------------------------------
// Perturbations
// ---------------------------------------------------------------------------

/// How the second configuration of a double-solve experiment differs from
/// the first.
#[derive(Debug, Clone, Serialize)]
pub enum Perturbation {
    /// Move one nucleus by a fixed offset.
    Displace { index: usize, offset: [f64; 3] },
    /// Superpose an extra smeared charge `z` at a point (an impurity).
    AddCharge { center: [f64; 3], z: f64 },
}

/// A realized perturbation: both densities plus bookkeeping.
struct Realized {
    m_base: ScalarField,
    m_pert: ScalarField,
    /// Distinguished site radial curves are centered on: the midpoint of a
    /// displacement, or the impurity center.
    site: [f64; 3],
    /// Magnitude of the perturbation as a charge: `|z|` for an impurity,
    /// half the L1 difference for a displacement.
    charge_scale: f64,
}

impl Perturbation {
    fn realize(&self, grid: &Grid, base: &NuclearConfig) -> Result<Realized> {
        let m_base = assemble_density(grid, base)?;
        match *self {
            Perturbation::Displace { index, offset } => {
                if index >= base.coords.len() {
                    return Err(TfwError::BadConfig(format!(
                        "displaced nucleus index {index} out of range (have {})",
                        base.coords.len()
                    )));
                }
                if !offset.iter().all(|c| c.is_finite()) {
                    return Err(TfwError::BadConfig("displacement must be finite".into()));
                }
                let mut moved = base.clone();
                let y = moved.coords[index];
                moved.coords[index] =
                    grid.wrap_point([y[0] + offset[0], y[1] + offset[1], y[2] + offset[2]]);
                let m_pert = assemble_density(grid, &moved)?;
                let site = grid.wrap_point([
                    y[0] + offset[0] / 2.0,
                    y[1] + offset[1] / 2.0,
                    y[2] + offset[2] / 2.0,
                ]);
                let mut diff = m_base.clone();
                diff.zip_apply(&m_pert, |a, b| (a - b).abs());
                let charge_scale = 0.5 * diff.integrate();
                Ok(Realized { m_base, m_pert, site, charge_scale })
            }
            Perturbation::AddCharge { center, z } => {
                if !(z.is_finite() && center.iter().all(|c| c.is_finite())) {
                    return Err(TfwError::BadConfig("impurity parameters must be finite".into()));
                }
                let mut m_pert = m_base.clone();
                if z != 0.0 {
                    let bump = assemble_density(
                        grid,
                        &NuclearConfig::new(vec![center], base.shape.r0, 0.0),
                    )?;
                    m_pert.add_scaled(z, &bump);
                    if m_pert.min() < 0.0 {
                        return Err(TfwError::BadConfig(format!(
                            "impurity charge {z} drives the density negative"
                        )));
                    }
                }
                Ok(Realized {
                    m_base,
                    m_pert,
                    site: grid.wrap_point(center),
                    charge_scale: z.abs(),
                })
            }
        }
    }
}

/// Solve the base state, then the perturbed one warm-started from it. If the
/// densities are bit-identical the base solution is reused, so "no
/// perturbation" yields exactly zero response.
fn solve_pair(
    ops: &SpectralOps,
    m_base: &ScalarField,
    m_pert: &ScalarField,
    solver: &SolverOptions,
) -> Result<(GroundState, GroundState, bool)> {
    let s1 = solve_ground_state(ops, m_base, solver)?;
    if m_base.data == m_pert.data {
        let s2 = s1.clone();
        return Ok((s1, s2, true));
    }
    let mut warm = solver.clone();
    warm.init = InitGuess::Supplied(s1.u.clone());
    let s2 = solve_ground_state(ops, m_pert, &warm)?;
    Ok((s1, s2, false))
}

/// Gauge-invariant potential response: difference of `phi + theta`, the
/// combination the Euler-Lagrange system actually constrains.
fn potential_response(a: &GroundState, b: &GroundState) -> ScalarField {
    let mut psi = b.phi.mapped(|p| p + b.theta);
    let shifted = a.phi.mapped(|p| p + a.theta);
    psi.zip_apply(&shifted, |x, y| x - y);
    psi
}

/// Record a decay fit plus its rate/goodness checks, or a failed-rate check
/// with a note when too few points survive the floor.
fn fit_into_report(
    report: &mut ExperimentReport,
    name: &str,
    points: &[[f64; 2]],
    r2_threshold: Option<f64>,
) {
    let windowed = window_points(points, report.fit_window);
    match decay_fit(&windowed, report.floor) {
        Ok(fit) => {
            report.checks.insert(format!("{name}_gamma_positive"), Check::above(fit.gamma, 0.0));
            if let Some(r2) = r2_threshold {
                report
                    .checks
                    .insert(format!("{name}_r_squared"), Check::at_least(fit.r_squared, r2));
            }
            report.fits.insert(name.into(), fit);
        }
        Err(err) => {
            report.notes.push(format!("fit '{name}' skipped: {err}"));
            report
                .checks
                .insert(format!("{name}_gamma_positive"), Check::above(f64::NAN, 0.0));
        }
    }
}

// ---------------------------------------------------------------------------
// Locality
// ---------------------------------------------------------------------------

/// Measure how far the ground state feels a compact change of the nuclei.
///
/// Solves the base and perturbed configurations, forms the amplitude response
/// `w = u' - u` and the gauge-invariant potential response `psi`, reduces
/// `|w|`, `|grad w|`, `|lap w|`, `|psi|` to shell maxima around the
/// perturbation site, and fits log-linear decay to each curve.
pub fn locality_experiment(
    ops: &SpectralOps,
    base: &NuclearConfig,
    perturbation: &Perturbation,
    opts: &ExperimentOptions,
) -> Result<ExperimentReport> {
    let start = Instant::now();
    let grid = ops.grid;
    let mut report = ExperimentReport::new("locality");
    report.solver_tol = opts.solver.tol;
    report.floor = opts.effective_floor();
    report.fit_window = opts.window(base.shape.r0, grid.l);

    let realized = perturbation.realize(&grid, base)?;
    let (s1, s2, identical) = solve_pair(ops, &realized.m_base, &realized.m_pert, &opts.quiet_solver())?;

    let mut w = s2.u.clone();
    w.zip_apply(&s1.u, |a, b| a - b);
    let psi = potential_response(&s1, &s2);
    let grad_w = ops.gradient(&w).magnitude_sq().mapped(f64::sqrt);
    let lap_w = ops.laplacian(&w);

    let width = opts.shell_width.unwrap_or(grid.h);
    let curves: [(&str, &ScalarField, Option<f64>); 4] = [
        ("w", &w, Some(0.95)),
        ("psi", &psi, Some(0.95)),
        ("grad_w", &grad_w, Some(0.9)),
        ("lap_w", &lap_w, Some(0.9)),
    ];

    for (name, field, r2) in curves {
        let profile = radial_profile(field, realized.site, width)?;
        report.curves.insert(name.into(), profile.to_csv());
        if identical {
            continue;
        }
        fit_into_report(&mut report, name, &profile.max_points(), r2);
    }

    if identical {
        report.trivial = true;
        report.notes.push("configurations are identical; response is exactly zero".into());
        report
            .checks
            .insert("trivial_zero_response".into(), Check::at_most(w.sup_norm() + psi.sup_norm(), 0.0));
    }

    report.metrics.insert("sup_w".into(), w.sup_norm());
    report.metrics.insert("sup_psi".into(), psi.sup_norm());
    report.metrics.insert("energy_base".into(), s1.energy);
    report.metrics.insert("energy_pert".into(), s2.energy);
    report.metrics.insert("theta_base".into(), s1.theta);
    report.metrics.insert("theta_pert".into(), s2.theta);
    report.metrics.insert("charge_scale".into(), realized.charge_scale);

    report.config.insert("n".into(), json!(grid.n));
    report.config.insert("l".into(), json!(grid.l));
    report.config.insert("r0".into(), json!(base.shape.r0));
    report.config.insert("background".into(), json!(base.background));
    report.config.insert("num_nuclei".into(), json!(base.coords.len()));
    report.config.insert("perturbation".into(), json!(perturbation));
    report.config.insert("site".into(), json!(realized.site));
    report.config.insert("shell_width".into(), json!(width));
    report.config.insert("solver".into(), echo_solver(&opts.solver));

    report.fields.insert("u_base".into(), s1.u);
    report.fields.insert("phi_base".into(), s1.phi);
    report.fields.insert("u_pert".into(), s2.u);
    report.fields.insert("phi_pert".into(), s2.phi);
    report.fields.insert("w".into(), w);
    report.fields.insert("psi".into(), psi);

    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Screening
// ---------------------------------------------------------------------------

/// Measure how a uniform gas suppresses an impurity's potential.
///
/// Solves jellium at density `m0` with and without a smeared impurity of
/// charge `z`, reduces the potential response radially, fits the decay of
/// `r * max|psi|` (removing the geometric `1/r` factor and excluding shells
/// adjacent to oscillation nodes), and compares the rate against the
/// closed-form dispersion exponent. When the dispersion roots are complex
/// the harness also counts sign changes of the shell means.
pub fn screening_experiment(
    ops: &SpectralOps,
    m0: f64,
    z: f64,
    r0: f64,
    opts: &ExperimentOptions,
) -> Result<ExperimentReport> {
    let start = Instant::now();
    let grid = ops.grid;
    if !(m0 > 0.0 && m0.is_finite()) {
        return Err(TfwError::BadConfig(format!("background density must be positive, got {m0}")));
    }
    let mut report = ExperimentReport::new("screening");
    report.solver_tol = opts.solver.tol;
    report.floor = opts.effective_floor();
    report.fit_window = opts.window(r0, grid.l);

    let base = NuclearConfig::new(Vec::new(), r0, m0);
    let center = [grid.l / 2.0, grid.l / 2.0, grid.l / 2.0];
    let perturbation = Perturbation::AddCharge { center, z };
    let realized = perturbation.realize(&grid, &base)?;
    let (s1, s2, identical) = solve_pair(ops, &realized.m_base, &realized.m_pert, &opts.quiet_solver())?;

    let psi = potential_response(&s1, &s2);
    let width = opts.shell_width.unwrap_or(grid.h);
    let profile = radial_profile(&psi, realized.site, width)?;
    report.curves.insert("psi".into(), profile.to_csv());

    let constants = screening_constants(m0, 1.0)?;
    report.metrics.insert("alpha".into(), constants.alpha);
    report.metrics.insert("beta".into(), constants.beta);
    report.metrics.insert("sup_psi".into(), psi.sup_norm());

    if identical {
        report.trivial = true;
        report.notes.push("zero impurity charge; response is exactly zero".into());
        report
            .checks
            .insert("trivial_zero_response".into(), Check::at_most(psi.sup_norm(), 0.0));
    } else {
        // Shells inside the window, above the floor.
        let shells: Vec<ShellRow> = profile
            .rows
            .iter()
            .filter(|s| {
                s.r >= report.fit_window[0]
                    && s.r <= report.fit_window[1]
                    && s.max_abs > report.floor
            })
            .copied()
            .collect();

        // Count oscillation nodes (sign changes of the shell means).
        let mut sign_changes = 0usize;
        for pair in shells.windows(2) {
            if pair[0].mean.signum() != pair[1].mean.signum() {
                sign_changes += 1;
            }
        }

        // Envelope fit. The geometric 1/r factor is divided out by fitting
        // r * max|psi|. When the dispersion roots are complex the data also
        // carry a cos(beta*r + delta) modulation whose nodes would wreck a
        // plain log-linear fit, so the known rate beta is demodulated as
        // well. The unknown phase is observable rather than free: the
        // modulation vanishes exactly where the shell means change sign, so
        // each node radius pins delta = pi/2 - beta*r_node (mod pi). Shells
        // where the recovered modulation is well conditioned (|cos| >= 0.5)
        // are kept and the corrected envelope is fitted log-linearly. A free
        // phase scan is not an option here: on a narrow window a wrong phase
        // can leave a small shell subset that happens to sit on a line with
        // a badly biased slope.
        let fit_result = if constants.beta > 0.0 {
            // Node radii by linear interpolation of the shell means, searched
            // up to a quarter modulation period beyond the window so a node
            // that brackets it still contributes.
            let guard = 0.5 * std::f64::consts::PI / constants.beta;
            let mut nodes: Vec<f64> = Vec::new();
            for pair in profile.rows.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                if a.r < report.fit_window[0] - guard || b.r > report.fit_window[1] + guard {
                    continue;
                }
                if a.mean.abs() > report.floor
                    && b.mean.abs() > report.floor
                    && a.mean.signum() != b.mean.signum()
                {
                    nodes.push(a.r + (b.r - a.r) * a.mean.abs() / (a.mean.abs() + b.mean.abs()));
                }
            }
            if nodes.is_empty() {
                report
                    .notes
                    .push("no modulation node observed near the fit window; envelope fitted without phase correction".into());
            }
            let delta = {
                // Circular mean of the per-node estimates with period pi.
                let (s, c) = nodes
                    .iter()
                    .map(|rn| 2.0 * (std::f64::consts::FRAC_PI_2 - constants.beta * rn))
                    .fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
                (f64::atan2(s, c) / 2.0).rem_euclid(std::f64::consts::PI)
            };
            report.metrics.insert("modulation_phase".into(), delta);
            report.metrics.insert("modulation_nodes".into(), nodes.len() as f64);
            let pts: Vec<[f64; 2]> = if nodes.is_empty() {
                shells.iter().map(|s| [s.r, s.max_abs * s.r]).collect()
            } else {
                shells
                    .iter()
                    .filter_map(|s| {
                        let c = (constants.beta * s.r + delta).cos().abs();
                        (c >= 0.5).then(|| [s.r, s.max_abs * s.r / c])
                    })
                    .collect()
            };
            decay_fit(&pts, report.floor)
        } else {
            decay_fit(
                &shells.iter().map(|s| [s.r, s.max_abs * s.r]).collect::<Vec<_>>(),
                report.floor,
            )
        };

        match fit_result {
            Ok(fit) => {
                let rel = (fit.gamma - constants.alpha).abs() / constants.alpha;
                report.metrics.insert("gamma_fit".into(), fit.gamma);
                report.checks.insert("alpha_relative_error".into(), Check::at_most(rel, 0.15));
                report.fits.insert("psi_times_r".into(), fit);
            }
            Err(err) => {
                report.notes.push(format!("screening fit skipped: {err}"));
                report
                    .checks
                    .insert("alpha_relative_error".into(), Check::at_most(f64::NAN, 0.15));
            }
        }

        if constants.beta > 0.0 {
            report
                .checks
                .insert("oscillation_sign_changes".into(), Check::at_least(sign_changes as f64, 1.0));
        }
        report.metrics.insert("sign_changes".into(), sign_changes as f64);

        // Screening, not anti-screening: inside a small ball at the impurity
        // the electron amplitude rises with the potential, i.e. the induced
        // electron *charge* (minus the density change) opposes it.
        let mut i_psi = 0.0;
        let mut i_electron = 0.0;
        grid.for_each_in_ball(realized.site, r0, |idx, _, _| {
            i_psi += psi.data[idx];
            i_electron += s2.u.data[idx] * s2.u.data[idx] - s1.u.data[idx] * s1.u.data[idx];
        });
        i_psi *= grid.dv();
        i_electron *= grid.dv();
        report.metrics.insert("psi_ball_integral".into(), i_psi);
        report.metrics.insert("electron_ball_integral".into(), i_electron);
        report
            .checks
            .insert("screening_sign".into(), Check::above(i_psi * i_electron, 0.0));
        report.notes.push(
            "screening_sign > 0 means the density change follows the potential, so the \
             induced electron charge (its negative) opposes it"
                .into(),
        );
    }

    report.config.insert("n".into(), json!(grid.n));
    report.config.insert("l".into(), json!(grid.l));
    report.config.insert("m0".into(), json!(m0));
    report.config.insert("z".into(), json!(z));
    report.config.insert("r0".into(), json!(r0));
    report.config.insert("shell_width".into(), json!(width));
    report.config.insert("solver".into(), echo_solver(&opts.solver));

    report.fields.insert("psi".into(), psi);
    report.fields.insert("u_base".into(), s1.u);
    report.fields.insert("u_pert".into(), s2.u);
    report.fields.insert("phi_pert".into(), s2.phi);

    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Thermodynamic limit
// ---------------------------------------------------------------------------

/// Measure how fast deleting remote nuclei stops mattering near the center.
///
/// Solves the full configuration, then for each deletion radius re-solves
/// with every nucleus farther than that (minimum-image Euclidean distance
/// from the cell center) removed, and records sup errors of `u` and of
/// `phi + theta` over the observation ball `B_R(center)`. Errors are fitted
/// log-linearly against the margin `R_n - R`. A radius that deletes nothing
/// reuses the full solution, so its error is exactly zero.
pub fn tdl_experiment(
    ops: &SpectralOps,
    config: &NuclearConfig,
    radii: &[f64],
    observation_radius: f64,
    opts: &ExperimentOptions,
) -> Result<ExperimentReport> {
    let start = Instant::now();
    let grid = ops.grid;
    if config.coords.is_empty() {
        return Err(TfwError::EmptyConfiguration);
    }
    if radii.is_empty() {
        return Err(TfwError::BadConfig("need at least one deletion radius".into()));
    }
    let r = observation_radius;
    if !(r > 0.0 && r < grid.l / 2.0) {
        return Err(TfwError::BadConfig(format!(
            "observation radius must lie in (0, L/2), got {r}"
        )));
    }
    let mut sorted: Vec<f64> = radii.to_vec();
    if sorted.iter().any(|x| !(x.is_finite() && *x > r)) {
        return Err(TfwError::BadConfig(
            "every deletion radius must be finite and exceed the observation radius".into(),
        ));
    }
    sorted.sort_by(f64::total_cmp);

    let mut report = ExperimentReport::new("tdl");
    report.solver_tol = opts.solver.tol;
    report.floor = opts.effective_floor();
    report.fit_window = opts.window(config.shape.r0, grid.l);

    let solver = opts.quiet_solver();
    let m_full = assemble_density(&grid, config)?;
    let full = solve_ground_state(ops, &m_full, &solver)?;

    let center = [grid.l / 2.0, grid.l / 2.0, grid.l / 2.0];
    let obs: Vec<usize> = (0..grid.num_points())
        .filter(|&idx| {
            let (i, j, k) = grid.coords_of(idx);
            grid.min_distance(grid.point(i, j, k), center) <= r
        })
        .collect();
    if obs.is_empty() {
        return Err(TfwError::BadConfig("observation ball contains no grid points".into()));
    }

    let full_pot = full.phi.mapped(|p| p + full.theta);
    let mut u_curve = String::from("r,max_abs,mean,count\n");
    let mut phi_curve = String::from("r,max_abs,mean,count\n");
    let mut u_points = Vec::new();
    let mut phi_points = Vec::new();
    let mut u_errors = Vec::new();
    let mut all_trivial = true;

    for &rn in &sorted {
        let kept: Vec<[f64; 3]> = config
            .coords
            .iter()
            .filter(|&&y| grid.min_distance(y, center) <= rn)
            .copied()
            .collect();
        let deleted = config.coords.len() - kept.len();

        let state = if deleted == 0 {
            full.clone()
        } else {
            all_trivial = false;
            let truncated =
                NuclearConfig { coords: kept, shape: config.shape, background: config.background };
            let m_n = assemble_density(&grid, &truncated)?;
            let mut warm = solver.clone();
            warm.init = InitGuess::Supplied(full.u.clone());
            solve_ground_state(ops, &m_n, &warm)?
        };

        let pot_n = state.phi.mapped(|p| p + state.theta);
        let mut u_err = 0.0f64;
        let mut u_abs = Vec::with_capacity(obs.len());
        let mut phi_err = 0.0f64;
        let mut phi_abs = Vec::with_capacity(obs.len());
        for &idx in &obs {
            let du = (full.u.data[idx] - state.u.data[idx]).abs();
            let dp = (full_pot.data[idx] - pot_n.data[idx]).abs();
            u_err = u_err.max(du);
            phi_err = phi_err.max(dp);
            u_abs.push(du);
            phi_abs.push(dp);
        }
        let margin = rn - r;
        u_curve.push_str(&format!(
            "{},{},{},{}\n",
            margin,
            u_err,
            neumaier_sum(&u_abs) / u_abs.len() as f64,
            obs.len()
        ));
        phi_curve.push_str(&format!(
            "{},{},{},{}\n",
            margin,
            phi_err,
            neumaier_sum(&phi_abs) / phi_abs.len() as f64,
            obs.len()
        ));
        u_points.push([margin, u_err]);
        phi_points.push([margin, phi_err]);
        u_errors.push(u_err);
        report.metrics.insert(format!("deleted_at_{rn}"), deleted as f64);
    }

    report.curves.insert("u_error".into(), u_curve);
    report.curves.insert("phi_error".into(), phi_curve);

    // Larger kept regions must not see larger errors (up to solver noise).
    let max_err = u_errors.iter().cloned().fold(0.0f64, f64::max);
    let mut worst_increase = 0.0f64;
    for pair in u_errors.windows(2) {
        worst_increase = worst_increase.max(pair[1] - pair[0]);
    }
    report.checks.insert(
        "u_monotone_nonincreasing".into(),
        Check::at_most(worst_increase, 1e-9 * max_err.max(f64::MIN_POSITIVE)),
    );

    if all_trivial {
        report.trivial = true;
        report.notes.push("no radius deleted anything; every error is exactly zero".into());
        report
            .checks
            .insert("trivial_zero_error".into(), Check::at_most(max_err, 0.0));
    } else {
        fit_into_report(&mut report, "u_error", &u_points, Some(0.9));
        fit_into_report(&mut report, "phi_error", &phi_points, None);
    }

    report.config.insert("n".into(), json!(grid.n));
    report.config.insert("l".into(), json!(grid.l));
    report.config.insert("r0".into(), json!(config.shape.r0));
    report.config.insert("background".into(), json!(config.background));
    report.config.insert("num_nuclei".into(), json!(config.coords.len()));
    report.config.insert("radii".into(), json!(sorted));
    report.config.insert("observation_radius".into(), json!(r));
    report.config.insert("solver".into(), echo_solver(&opts.solver));

    report.fields.insert("u_full".into(), full.u);
    report.fields.insert("phi_full".into(), full.phi);

    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Neutrality
// ---------------------------------------------------------------------------

/// Measure how fast the net induced charge of a compact defect vanishes.
///
/// Solves both configurations, forms the induced charge
/// `rho = (m - u^2) - (m' - u'^2)`, and integrates it over growing
/// minimum-image balls centered at the perturbation site. The whole-cell
/// integral must vanish because both solves enforce their own charge
/// constraint; the partial integrals are fitted for decay and the largest
/// ball is compared against the perturbation's charge scale.
pub fn neutrality_experiment(
    ops: &SpectralOps,
    base: &NuclearConfig,
    perturbation: &Perturbation,
    radii: &[f64],
    opts: &ExperimentOptions,
) -> Result<ExperimentReport> {
    let start = Instant::now();
    let grid = ops.grid;
    if radii.is_empty() {
        return Err(TfwError::BadConfig("need at least one ball radius".into()));
    }
    let r_limit = 3.0f64.sqrt() * grid.l / 2.0;
    if radii.iter().any(|x| !(x.is_finite() && *x > 0.0 && *x <= r_limit)) {
        return Err(TfwError::BadConfig(format!(
            "ball radii must lie in (0, {r_limit:.3}]"
        )));
    }
    let mut sorted: Vec<f64> = radii.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut report = ExperimentReport::new("neutrality");
    report.solver_tol = opts.solver.tol;
    report.floor = opts.effective_floor();
    report.fit_window = opts.window(base.shape.r0, grid.l);

    let realized = perturbation.realize(&grid, base)?;
    let (s1, s2, identical) = solve_pair(ops, &realized.m_base, &realized.m_pert, &opts.quiet_solver())?;

    let mut rho = realized.m_base.clone();
    rho.zip_apply(&s1.u, |m, u| m - u * u);
    let mut rho2 = realized.m_pert.clone();
    rho2.zip_apply(&s2.u, |m, u| m - u * u);
    rho.zip_apply(&rho2, |a, b| a - b);

    let whole_cell = rho.integrate().abs();
    report.checks.insert("whole_cell_integral".into(), Check::at_most(whole_cell, 1e-10));

    // Distance of every grid point from the site, for nested ball sums.
    let mut per_ball: Vec<Vec<f64>> = vec![Vec::new(); sorted.len()];
    let mut counts = vec![0usize; sorted.len()];
    for (idx, &v) in rho.data.iter().enumerate() {
        let (i, j, k) = grid.coords_of(idx);
        let d = grid.min_distance(grid.point(i, j, k), realized.site);
        for (b, &rn) in sorted.iter().enumerate() {
            if d <= rn {
                per_ball[b].push(v);
                counts[b] += 1;
            }
        }
    }

    let mut curve = String::from("r,max_abs,mean,count\n");
    let mut points = Vec::with_capacity(sorted.len());
    let mut final_abs = 0.0;
    for (b, &rn) in sorted.iter().enumerate() {
        let integral = neumaier_sum(&per_ball[b]) * grid.dv();
        curve.push_str(&format!("{},{},{},{}\n", rn, integral.abs(), integral, counts[b]));
        points.push([rn, integral.abs()]);
        final_abs = integral.abs();
    }
    report.curves.insert("partial_charge".into(), curve);

    if identical {
        report.trivial = true;
        report.notes.push("configurations are identical; all partial charges are zero".into());
        report
            .checks
            .insert("trivial_zero_charge".into(), Check::at_most(rho.sup_norm(), 0.0));
    } else {
        fit_into_report(&mut report, "partial_charge", &points, None);
    }
    report.checks.insert(
        "final_ball_residual".into(),
        Check::at_most(final_abs, 1e-6 * realized.charge_scale.max(f64::MIN_POSITIVE)),
    );

    report.metrics.insert("charge_scale".into(), realized.charge_scale);
    report.metrics.insert("whole_cell_integral".into(), whole_cell);
    report.metrics.insert("final_ball_integral".into(), final_abs);

    report.config.insert("n".into(), json!(grid.n));
    report.config.insert("l".into(), json!(grid.l));
    report.config.insert("r0".into(), json!(base.shape.r0));
    report.config.insert("background".into(), json!(base.background));
    report.config.insert("num_nuclei".into(), json!(base.coords.len()));
    report.config.insert("perturbation".into(), json!(perturbation));
    report.config.insert("site".into(), json!(realized.site));
    report.config.insert("radii".into(), json!(sorted));
    report.config.insert("solver".into(), echo_solver(&opts.solver));

    report.fields.insert("rho".into(), rho);

    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

// ---------------------------------------------------------------------------
