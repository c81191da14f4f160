//! Localized decomposition of the cell energy into per-nucleus site
//! energies, and their derivatives with respect to nuclear positions.
//!
//! A smooth partition of unity subordinate to the nuclei splits any energy
//! density `e` into site energies `E_j = integral e w_j`. Two densities with
//! the same integral are provided:
//!
//! ```text
//! e1 = |grad u|^2 + u^{10/3} + (1/2) phi (m - u^2),
//! e2 = |grad u|^2 + u^{10/3} + (1/(8 pi)) |grad phi|^2,
//! ```
//!
//! which differ pointwise but agree exactly under the cell integral (the two
//! Coulomb forms are related by parts). Site forces `dE_j/dY_k . V` combine
//! the tangent solve of `linear_response` with the analytic derivative of
//! the partition; summed over sites they collapse to the total force
//! `integral phi m_dot`, which this module also evaluates independently.
//!
//! Site energies inherit the zero-mean gauge of the potential: individual
//! `E_j` shift if a constant is added to `phi`, while totals and all forces
//! are gauge-independent. Every report states values in the zero-mean gauge.

use crate::error::{Result, TfwError};
use crate::fft::SpectralOps;
use crate::field::ScalarField;
use crate::grid::Grid;
use crate::ground_state::{solve_ground_state, GroundState, InitGuess, SolverOptions};
use crate::linear_response::{
    perturbation_density, solve_linearised, LinearisedSolution, ResponseOptions,
};
use crate::nuclei::{assemble_density, NuclearConfig};
use std::f64::consts::PI;

/// Default width of the Gaussian partition kernel.
pub const DEFAULT_GAMMA_TILDE: f64 = 0.5;

/// Entries with magnitude below this are reported as exact zeros so that
/// log-scale decay fits are not polluted by rounding noise.
pub const FORCE_FLOOR: f64 = 1e-14;

/// Smooth partition of unity subordinate to the nuclei: Gaussian kernels
/// `w(x) = exp(-gamma_tilde |x - Y_j|^2)` in the minimum-image metric,
/// normalized by their pointwise sum.
#[derive(Debug, Clone)]
pub struct Partition {
    pub gamma_tilde: f64,
    /// Kernel centers (wrapped nucleus positions, original order).
    pub centers: Vec<[f64; 3]>,
    /// Normalized members `w_j / sum w`; nonnegative, bounded by one, and
    /// summing to one at every grid point.
    pub members: Vec<ScalarField>,
}

/// Minimum-image displacement `x - y` with components exactly on the cut
/// locus (half-cell distance) zeroed: there the two nearest images
/// contribute symmetrically and the one-sided derivative must be replaced
/// by their average, which vanishes.
fn kernel_displacement(grid: &Grid, x: [f64; 3], y: [f64; 3]) -> [f64; 3] {
    let mut d = grid.min_image_delta(x, y);
    let half = grid.l / 2.0;
    let tol = grid.l * 1e-12;
    for c in d.iter_mut() {
        if (c.abs() - half).abs() <= tol {
            *c = 0.0;
        }
    }
    d
}

/// Build the Gaussian partition of unity for `config` on `grid`.
pub fn build_partition(
    grid: &Grid,
    config: &NuclearConfig,
    gamma_tilde: f64,
) -> Result<Partition> {
    if config.coords.is_empty() {
        return Err(TfwError::EmptyConfiguration);
    }
    if !(gamma_tilde > 0.0 && gamma_tilde.is_finite()) {
        return Err(TfwError::BadConfig(format!(
            "partition kernel width must be positive, got {gamma_tilde}"
        )));
    }
    let centers: Vec<[f64; 3]> = config.coords.iter().map(|&c| grid.wrap_point(c)).collect();

    let mut members: Vec<ScalarField> = centers
        .iter()
        .map(|&c| {
            ScalarField::from_fn(*grid, |x, y, z| {
                let d = grid.min_image_delta([x, y, z], c);
                (-gamma_tilde * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2])).exp()
            })
        })
        .collect();

    // Sum the kernels in canonical coordinate order (the same convention the
    // density assembly uses) so the members are bitwise identical however the
    // caller lists the centers.
    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (centers[a], centers[b]);
        ca[0].total_cmp(&cb[0])
            .then(ca[1].total_cmp(&cb[1]))
            .then(ca[2].total_cmp(&cb[2]))
    });
    let mut total = ScalarField::zeros(*grid);
    for &i in &order {
        total.zip_apply(&members[i], |t, wv| t + wv);
    }
    if !(total.min() > 0.0) {
        return Err(TfwError::BadConfig(format!(
            "partition kernels underflow at distance; reduce gamma_tilde = {gamma_tilde} \
             for cell length {}",
            grid.l
        )));
    }
    for w in members.iter_mut() {
        w.zip_apply(&total, |wv, t| wv / t);
    }
    Ok(Partition { gamma_tilde, centers, members })
}

impl Partition {
    /// Analytic derivative of member `j` when center `k` moves with velocity
    /// `v`. From the quotient rule,
    /// `d w_j / (sum w) = g_k w_k/sum (delta_jk - w_j/sum)` with
    /// `g_k(x) = 2 gamma_tilde (x - Y_k) . v`, so the family stays a
    /// partition of unity along the motion (the derivatives sum to zero
    /// pointwise, exactly).
    pub fn member_derivative(&self, grid: &Grid, j: usize, k: usize, v: [f64; 3]) -> ScalarField {
        let c = self.centers[k];
        let gamma = self.gamma_tilde;
        let mut g = ScalarField::from_fn(*grid, |x, y, z| {
            let d = kernel_displacement(grid, [x, y, z], c);
            2.0 * gamma * (d[0] * v[0] + d[1] * v[1] + d[2] * v[2])
        });
        g.zip_apply(&self.members[k], |gv, wk| gv * wk);
        if j == k {
            let mut one_minus = self.members[j].mapped(|wj| 1.0 - wj);
            one_minus.zip_apply(&g, |om, gv| om * gv);
            one_minus
        } else {
            let mut out = self.members[j].mapped(|wj| -wj);
            out.zip_apply(&g, |mw, gv| mw * gv);
            out
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Which of the two energy densities to use.
///
/// Both integrate to the cell energy; `E1` localizes the Coulomb part as
/// charge times potential, `E2` as field energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    E1,
    E2,
}

impl Flavor {
    pub fn as_str(self) -> &'static str {
        match self {
            Flavor::E1 => "E1",
            Flavor::E2 => "E2",
        }
    }
}

/// Pointwise energy density of a converged state.
pub fn energy_density(
    ops: &SpectralOps,
    state: &GroundState,
    m: &ScalarField,
    flavor: Flavor,
) -> Result<ScalarField> {
    if state.u.grid != ops.grid || m.grid != ops.grid {
        return Err(TfwError::GridMismatch { context: "energy density inputs vs operator".into() });
    }
    let mut e = ops.gradient(&state.u).magnitude_sq();
    e.zip_apply(&state.u, |g2, uv| g2 + (uv * uv).powf(5.0 / 3.0));
    match flavor {
        Flavor::E1 => {
            let mut rho = m.clone();
            rho.zip_apply(&state.u, |mv, uv| mv - uv * uv);
            rho.zip_apply(&state.phi, |r, p| 0.5 * p * r);
            e.zip_apply(&rho, |a, b| a + b);
        }
        Flavor::E2 => {
            let field_sq = ops.gradient(&state.phi).magnitude_sq();
            e.add_scaled(1.0 / (8.0 * PI), &field_sq);
        }
    }
    Ok(e)
}

/// Per-nucleus energies against a partition of unity.
#[derive(Debug, Clone)]
pub struct SiteEnergyReport {
    pub flavor: Flavor,
    /// `E_j = integral e w_j`, in the zero-mean potential gauge.
    pub energies: Vec<f64>,
    /// Sum of the site energies.
    pub total: f64,
    /// Cell energy of the state the sites were computed from.
    pub reference_energy: f64,
}

/// Split the cell energy into site energies `E_j = integral e w_j`.
pub fn site_energies(
    ops: &SpectralOps,
    state: &GroundState,
    m: &ScalarField,
    partition: &Partition,
    flavor: Flavor,
) -> Result<SiteEnergyReport> {
    if partition.is_empty() {
        return Err(TfwError::EmptyConfiguration);
    }
    if partition.members[0].grid != ops.grid {
        return Err(TfwError::GridMismatch { context: "partition grid vs operator".into() });
    }
    let e = energy_density(ops, state, m, flavor)?;
    let energies: Vec<f64> = partition.members.iter().map(|w| e.dot(w)).collect();
    let total = crate::field::neumaier_sum(&energies);
    Ok(SiteEnergyReport { flavor, energies, total, reference_energy: state.energy })
}

/// How a site-force row is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForceMethod {
    /// Tangent solve plus analytic partition derivative.
    Linearised,
    /// Full re-solves at displaced configurations.
    CentralDifference,
}

impl ForceMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ForceMethod::Linearised => "linearised",
            ForceMethod::CentralDifference => "central-difference",
        }
    }
}

/// Options for a site-force row.
#[derive(Debug, Clone)]
pub struct ForceOptions {
    pub method: ForceMethod,
    /// Displacement of the central-difference stencil.
    pub cd_step: f64,
    /// Tangent-solve options for the linearised method.
    pub response: ResponseOptions,
    /// Ground-state options for the central-difference re-solves.
    pub solver: SolverOptions,
    /// Entries with magnitude at or below this are reported as exact zeros.
    pub floor: f64,
}

impl Default for ForceOptions {
    fn default() -> Self {
        ForceOptions {
            method: ForceMethod::Linearised,
            cd_step: 1e-3,
            response: ResponseOptions::default(),
            solver: SolverOptions::default(),
            floor: FORCE_FLOOR,
        }
    }
}

/// One row of site-force derivatives: `dE_j/dY_k . v` for every site `j`.
#[derive(Debug, Clone)]
pub struct ForceMatrixRow {
    /// Index of the moved nucleus.
    pub k: usize,
    /// Direction of the motion.
    pub direction: [f64; 3],
    pub flavor: Flavor,
    pub method: ForceMethod,
    /// `dE_j/dY_k . direction`, one entry per site.
    pub entries: Vec<f64>,
}

impl ForceMatrixRow {
    /// Sum of the row: the total force component along `direction`.
    pub fn total(&self) -> f64 {
        crate::field::neumaier_sum(&self.entries)
    }
}

/// Derivative of the energy density along a tangent solution.
fn density_derivative(
    ops: &SpectralOps,
    state: &GroundState,
    lin: &LinearisedSolution,
    m: &ScalarField,
    flavor: Flavor,
) -> ScalarField {
    // Common part: 2 grad u . grad u_dot + (10/3) u^{7/3} u_dot.
    let gu = ops.gradient(&state.u);
    let gud = ops.gradient(&lin.u_dot);
    let mut d = gu.dot_pointwise(&gud);
    d.scale(2.0);
    let mut barrier = state.u.mapped(|uv| 10.0 / 3.0 * (uv * uv).powf(2.0 / 3.0) * uv);
    barrier.zip_apply(&lin.u_dot, |b, ud| b * ud);
    d.zip_apply(&barrier, |a, b| a + b);

    match flavor {
        Flavor::E1 => {
            // (1/2) [phi_dot (m - u^2) + phi (m_dot - 2 u u_dot)].
            let mut rho = m.clone();
            rho.zip_apply(&state.u, |mv, uv| mv - uv * uv);
            rho.zip_apply(&lin.phi_dot, |r, pd| 0.5 * pd * r);
            d.zip_apply(&rho, |a, b| a + b);

            let mut rho_dot = lin.u_dot.clone();
            rho_dot.zip_apply(&state.u, |ud, uv| -2.0 * uv * ud);
            rho_dot.zip_apply(&lin.m_dot, |x, md| x + md);
            rho_dot.zip_apply(&state.phi, |r, p| 0.5 * p * r);
            d.zip_apply(&rho_dot, |a, b| a + b);
        }
        Flavor::E2 => {
            // (1/(4 pi)) grad phi . grad phi_dot.
            let gp = ops.gradient(&state.phi);
            let gpd = ops.gradient(&lin.phi_dot);
            let cross = gp.dot_pointwise(&gpd);
            d.add_scaled(1.0 / (4.0 * PI), &cross);
        }
    }
    d
}

fn apply_floor(entries: &mut [f64], floor: f64) {
    for e in entries.iter_mut() {
        if e.abs() <= floor {
            *e = 0.0;
        }
    }
}

/// Site-force row `dE_j/dY_k . v` for all sites `j`.
///
/// The linearised method solves the tangent system once and combines the
/// energy-density derivative with the analytic partition derivative; the
/// central-difference method re-solves the ground state at the two displaced
/// configurations and differences the site energies.
pub fn site_forces(
    ops: &SpectralOps,
    state: &GroundState,
    m: &ScalarField,
    config: &NuclearConfig,
    partition: &Partition,
    k: usize,
    v: [f64; 3],
    flavor: Flavor,
    opts: &ForceOptions,
) -> Result<ForceMatrixRow> {
    if config.coords.is_empty() {
        return Err(TfwError::EmptyConfiguration);
    }
    if k >= config.coords.len() {
        return Err(TfwError::BadConfig(format!(
            "nucleus index {k} out of range (have {})",
            config.coords.len()
        )));
    }
    if partition.len() != config.coords.len() {
        return Err(TfwError::BadConfig(format!(
            "partition has {} members for {} nuclei",
            partition.len(),
            config.coords.len()
        )));
    }

    let mut entries = match opts.method {
        ForceMethod::Linearised => {
            let m_dot = perturbation_density(&ops.grid, config, k, v)?;
            let lin = solve_linearised(ops, state, &m_dot, &opts.response)?;
            let e = energy_density(ops, state, m, flavor)?;
            let de = density_derivative(ops, state, &lin, m, flavor);
            (0..partition.len())
                .map(|j| {
                    let dw = partition.member_derivative(&ops.grid, j, k, v);
                    de.dot(&partition.members[j]) + e.dot(&dw)
                })
                .collect::<Vec<f64>>()
        }
        ForceMethod::CentralDifference => {
            let h = opts.cd_step;
            if !(h > 0.0 && h.is_finite()) {
                return Err(TfwError::BadConfig(format!(
                    "central-difference step must be positive, got {h}"
                )));
            }
            let mut solver = opts.solver.clone();
            solver.init = InitGuess::Supplied(state.u.clone());
            solver.record_trace = false;
            let side = |sign: f64| -> Result<Vec<f64>> {
                let moved = config.perturbed(k, v, sign * h, &ops.grid);
                let m_h = assemble_density(&ops.grid, &moved)?;
                let state_h = solve_ground_state(ops, &m_h, &solver)?;
                let partition_h = build_partition(&ops.grid, &moved, partition.gamma_tilde)?;
                let report = site_energies(ops, &state_h, &m_h, &partition_h, flavor)?;
                Ok(report.energies)
            };
            let plus = side(1.0)?;
            let minus = side(-1.0)?;
            plus.iter().zip(&minus).map(|(p, q)| (p - q) / (2.0 * h)).collect()
        }
    };
    apply_floor(&mut entries, opts.floor);
    Ok(ForceMatrixRow { k, direction: v, flavor, method: opts.method, entries })
}

/// Independent evaluation of the total force along `v` when nucleus `k`
/// moves: `integral phi m_dot`, with no partition involved. Site-force rows
/// of either flavor must sum to this.
pub fn total_force(
    ops: &SpectralOps,
    state: &GroundState,
    config: &NuclearConfig,
    k: usize,
    v: [f64; 3],
) -> Result<f64> {
    let m_dot = perturbation_density(&ops.grid, config, k, v)?;
    Ok(state.phi.dot(&m_dot))
}

/// Deviations of site energies under symmetry operations of the cell.
#[derive(Debug, Clone, Copy)]
pub struct InvarianceReport {
    /// Max deviation under a permutation of the coordinate list (the
    /// pipeline is permutation-invariant by construction, so this is exact).
    pub permutation_dev: f64,
    /// Max deviation under translation by one grid spacing.
    pub translation_dev: f64,
    /// Max deviation under a quarter-turn about the z axis.
    pub rotation_dev: f64,
}

fn site_energy_list(
    ops: &SpectralOps,
    config: &NuclearConfig,
    gamma_tilde: f64,
    flavor: Flavor,
    solver: &SolverOptions,
) -> Result<Vec<f64>> {
    let m = assemble_density(&ops.grid, config)?;
    let state = solve_ground_state(ops, &m, solver)?;
    let partition = build_partition(&ops.grid, config, gamma_tilde)?;
    Ok(site_energies(ops, &state, &m, &partition, flavor)?.energies)
}

/// Re-solve the full pipeline under a coordinate permutation, a one-spacing
/// translation, and a quarter-turn, and report the worst site-energy
/// deviations. All three are exact symmetries of the discrete model, so the
/// deviations measure only solver and rounding noise.
pub fn invariance_suite(
    ops: &SpectralOps,
    config: &NuclearConfig,
    gamma_tilde: f64,
    flavor: Flavor,
    solver: &SolverOptions,
) -> Result<InvarianceReport> {
    if config.coords.is_empty() {
        return Err(TfwError::EmptyConfiguration);
    }
    let grid = ops.grid;
    let base = site_energy_list(ops, config, gamma_tilde, flavor, solver)?;
    let j_count = base.len();

    // Reverse is a fixed, nontrivial permutation for two or more nuclei.
    let mut permuted_config = config.clone();
    permuted_config.coords.reverse();
    let permuted = site_energy_list(ops, &permuted_config, gamma_tilde, flavor, solver)?;
    let permutation_dev = (0..j_count)
        .map(|j| (permuted[j_count - 1 - j] - base[j]).abs())
        .fold(0.0f64, f64::max);

    let mut translated_config = config.clone();
    for c in translated_config.coords.iter_mut() {
        *c = grid.wrap_point([c[0] + grid.h, c[1], c[2]]);
    }
    let translated = site_energy_list(ops, &translated_config, gamma_tilde, flavor, solver)?;
    let translation_dev =
        (0..j_count).map(|j| (translated[j] - base[j]).abs()).fold(0.0f64, f64::max);

    // Quarter-turn about the z axis through the origin: (x, y) -> (-y, x),
    // an exact permutation of the periodic grid.
    let mut rotated_config = config.clone();
    for c in rotated_config.coords.iter_mut() {
        *c = grid.wrap_point([-c[1], c[0], c[2]]);
    }
    let rotated = site_energy_list(ops, &rotated_config, gamma_tilde, flavor, solver)?;
    let rotation_dev =
        (0..j_count).map(|j| (rotated[j] - base[j]).abs()).fold(0.0f64, f64::max);

    Ok(InvarianceReport { permutation_dev, translation_dev, rotation_dev })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_nucleus_partition_is_identically_one() {
        let grid = Grid::new(12, 3.0).unwrap();
        let config = NuclearConfig::new(vec![[1.5, 1.5, 1.5]], 1.0, 0.0);
        let p = build_partition(&grid, &config, DEFAULT_GAMMA_TILDE).unwrap();
        assert_eq!(p.members.len(), 1);
        assert!(p.members[0].data.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn mirror_nuclei_have_mirrored_members() {
        let grid = Grid::new(16, 4.0).unwrap();
        // Mirror pair about the x = 2 plane.
        let config = NuclearConfig::new(vec![[1.0, 2.0, 2.0], [3.0, 2.0, 2.0]], 1.0, 0.0);
        let p = build_partition(&grid, &config, DEFAULT_GAMMA_TILDE).unwrap();
        let n = grid.n;
        let mut worst = 0.0f64;
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let a = p.members[0].data[grid.idx(i, j, k)];
                    let b = p.members[1].data[grid.idx((2 * n - i) % n, j, k)];
                    worst = worst.max((a - b).abs());
                }
            }
        }
        assert!(worst <= 1e-12, "mirror asymmetry {worst}");
    }

    #[test]
    fn partition_sums_to_one_and_stays_in_range() {
        let grid = Grid::new(16, 6.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coords: Vec<[f64; 3]> =
            (0..5).map(|_| [rng.gen::<f64>() * 6.0, rng.gen::<f64>() * 6.0, rng.gen::<f64>() * 6.0]).collect();
        let config = NuclearConfig::new(coords, 1.0, 0.0);
        let p = build_partition(&grid, &config, DEFAULT_GAMMA_TILDE).unwrap();

        let mut sum = ScalarField::zeros(grid);
        for w in &p.members {
            assert!(w.min() >= 0.0 && w.max() <= 1.0);
            sum.zip_apply(w, |s, wv| s + wv);
        }
        assert!(sum.data.iter().all(|&s| (s - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn partition_rejects_bad_inputs() {
        let grid = Grid::new(8, 2.0).unwrap();
        let empty = NuclearConfig::new(vec![], 0.5, 0.0);
        assert!(matches!(
            build_partition(&grid, &empty, 0.5),
            Err(TfwError::EmptyConfiguration)
        ));
        let one = NuclearConfig::new(vec![[1.0, 1.0, 1.0]], 0.5, 0.0);
        assert!(build_partition(&grid, &one, 0.0).is_err());
        assert!(build_partition(&grid, &one, -1.0).is_err());
    }

    /// The analytic member derivative must match central differences of the
    /// rebuilt partition, and the derivatives must sum to zero pointwise.
    ///
    /// The comparison skips the cut locus of the moved center (points where
    /// some component of the wrapped displacement sits exactly at plus or
    /// minus half the period): the folded distance has a corner there, so
    /// both signed displacements shrink it and the central difference of the
    /// kernel picks up an O(h) cross term. Off that measure-zero set the
    /// quotient is O(h^2) accurate and must agree tightly.
    #[test]
    fn member_derivative_matches_finite_differences() {
        let grid = Grid::new(16, 8.0).unwrap();
        let config =
            NuclearConfig::new(vec![[2.5, 4.0, 4.0], [5.5, 4.0, 4.0], [4.0, 6.0, 3.0]], 1.0, 0.0);
        let p = build_partition(&grid, &config, DEFAULT_GAMMA_TILDE).unwrap();
        let v = [0.6, -0.8, 0.0];
        let k = 1;
        let h = 1e-5;

        let plus = build_partition(&grid, &config.perturbed(k, v, h, &grid), p.gamma_tilde).unwrap();
        let minus =
            build_partition(&grid, &config.perturbed(k, v, -h, &grid), p.gamma_tilde).unwrap();

        let off_cut = ScalarField::from_fn(grid, |x, y, z| {
            let d = grid.min_image_delta([x, y, z], config.coords[k]);
            let near = d
                .iter()
                .any(|c| (c.abs() - grid.l / 2.0).abs() <= 1e-3);
            if near { 0.0 } else { 1.0 }
        });
        assert!(off_cut.data.iter().sum::<f64>() > 0.75 * off_cut.data.len() as f64);

        let mut dsum = ScalarField::zeros(grid);
        for j in 0..p.len() {
            let analytic = p.member_derivative(&grid, j, k, v);
            let mut fd = plus.members[j].clone();
            fd.zip_apply(&minus.members[j], |a, b| (a - b) / (2.0 * h));
            let mut gap = analytic.clone();
            gap.zip_apply(&fd, |a, b| a - b);
            gap.zip_apply(&off_cut, |g, m| g * m);
            assert!(
                gap.sup_norm() <= 1e-8,
                "member {j}: analytic vs fd differs by {} away from the cut locus",
                gap.sup_norm()
            );
            // On the cut locus the quotient itself is O(h)-biased; the gap
            // must still be no larger than that corner scale.
            assert!(
                analytic.sup_diff(&fd) <= 4.0 * p.gamma_tilde * grid.l * h,
                "member {j}: cut-locus gap {} exceeds the corner scale",
                analytic.sup_diff(&fd)
            );
            dsum.zip_apply(&analytic, |s, d| s + d);
        }
        assert!(dsum.sup_norm() <= 1e-13, "derivatives sum to {}", dsum.sup_norm());
    }

    fn jellium_state(grid: Grid, ops: &SpectralOps, m0: f64) -> (ScalarField, GroundState) {
        let m = ScalarField::constant(grid, m0);
        let state = solve_ground_state(ops, &m, &SolverOptions::default()).unwrap();
        (m, state)
    }

    #[test]
    fn energy_densities_on_the_uniform_gas_are_flat() {
        let grid = Grid::new(12, 3.0).unwrap();
        let ops = SpectralOps::new(grid);
        let (m, state) = jellium_state(grid, &ops, 1.0);
        for flavor in [Flavor::E1, Flavor::E2] {
            let e = energy_density(&ops, &state, &m, flavor).unwrap();
            assert!(e.data.iter().all(|&x| (x - 1.0).abs() <= 1e-12), "flavor {flavor:?}");
        }
    }

    #[test]
    fn energy_densities_vanish_on_the_empty_cell() {
        let grid = Grid::new(12, 3.0).unwrap();
        let ops = SpectralOps::new(grid);
        let m = ScalarField::zeros(grid);
        let state = solve_ground_state(&ops, &m, &SolverOptions::default()).unwrap();
        for flavor in [Flavor::E1, Flavor::E2] {
            let e = energy_density(&ops, &state, &m, flavor).unwrap();
            assert_eq!(e.sup_norm(), 0.0);
        }
    }

    fn nucleus_state(
        coords: Vec<[f64; 3]>,
        n: usize,
        l: f64,
    ) -> (Grid, SpectralOps, NuclearConfig, ScalarField, GroundState) {
        let grid = Grid::new(n, l).unwrap();
        let ops = SpectralOps::new(grid);
        let config = NuclearConfig::new(coords, 1.0, 0.0);
        let m = assemble_density(&grid, &config).unwrap();
        let state = solve_ground_state(&ops, &m, &SolverOptions::default()).unwrap();
        (grid, ops, config, m, state)
    }

    /// The two densities integrate to the same number (and to the energy the
    /// solver reported) while differing pointwise.
    #[test]
    fn flavors_agree_under_the_integral_only() {
        let (_, ops, _, m, state) = nucleus_state(vec![[2.0, 2.0, 2.0]], 16, 4.0);
        let e1 = energy_density(&ops, &state, &m, Flavor::E1).unwrap();
        let e2 = energy_density(&ops, &state, &m, Flavor::E2).unwrap();
        let i1 = e1.integrate();
        let i2 = e2.integrate();
        assert!((i1 - i2).abs() <= 1e-9 * i1.abs().max(1.0), "integrals {i1} vs {i2}");
        assert!((i1 - state.energy).abs() <= 1e-9 * state.energy.abs().max(1.0));
        assert!(e1.sup_diff(&e2) > 1e-3, "densities coincide unexpectedly");
    }

    #[test]
    fn single_site_carries_the_whole_energy() {
        let (grid, ops, config, m, state) = nucleus_state(vec![[2.0, 2.0, 2.0]], 16, 4.0);
        let p = build_partition(&grid, &config, DEFAULT_GAMMA_TILDE).unwrap();
        let report = site_energies(&ops, &state, &m, &p, Flavor::E1).unwrap();
        assert_eq!(report.energies.len(), 1);
        assert!((report.energies[0] - report.total).abs() <= 1e-15 * report.total.abs());
        assert!((report.total - state.energy).abs() <= 1e-9 * state.energy.abs());
    }

    /// Permuting the coordinate list permutes the site energies bitwise: the
    /// assembled density is order-canonical and the partition members are
    /// built per nucleus.
    #[test]
    fn permutation_relabels_site_energies_exactly() {
        let coords = vec![[1.2, 2.0, 2.1], [2.9, 1.8, 2.0], [2.0, 3.1, 1.5]];
        let (grid, ops, config, m, state) = nucleus_state(coords.clone(), 16, 4.0);
        let p = build_partition(&grid, &config, DEFAULT_GAMMA_TILDE).unwrap();
        let base = site_energies(&ops, &state, &m, &p, Flavor::E2).unwrap();

        let perm = [2usize, 0, 1];
        let permuted_coords: Vec<[f64; 3]> = perm.iter().map(|&i| coords[i]).collect();
        let permuted_config = NuclearConfig::new(permuted_coords, 1.0, 0.0);
        let m2 = assemble_density(&grid, &permuted_config).unwrap();
        assert_eq!(m.data, m2.data, "assembly is not order-canonical");
        let p2 = build_partition(&grid, &permuted_config, DEFAULT_GAMMA_TILDE).unwrap();
        let permuted = site_energies(&ops, &state, &m2, &p2, Flavor::E2).unwrap();

        for (slot, &src) in perm.iter().enumerate() {
            assert_eq!(permuted.energies[slot], base.energies[src]);
        }
    }

    /// Every site of a commensurate lattice of identical nuclei carries the
    /// same energy.
    #[test]
    fn lattice_sites_are_equal() {
        let coords = crate::nuclei::cubic_lattice([2, 2, 2], 2.0, [1.0, 1.0, 1.0]);
        let (grid, ops, config, m, state) = nucleus_state(coords, 16, 4.0);
        let p = build_partition(&grid, &config, DEFAULT_GAMMA_TILDE).unwrap();
        for flavor in [Flavor::E1, Flavor::E2] {
            let report = site_energies(&ops, &state, &m, &p, flavor).unwrap();
            let mean = report.total / report.energies.len() as f64;
            for &e in &report.energies {
                assert!(
                    (e - mean).abs() <= 1e-8 * mean.abs().max(1e-12),
                    "site energy {e} deviates from mean {mean} ({flavor:?})"
                );
            }
            assert!((report.total - state.energy).abs() <= 1e-9 * state.energy.abs());
        }
    }

    /// Site forces: the row total must equal the independently computed
    /// total force for both flavors and both methods, and the two methods
    /// must agree entrywise.
    #[test]
    fn force_routes_agree() {
        let (grid, ops, config, m, state) =
            nucleus_state(vec![[2.8, 3.0, 3.0], [4.4, 3.0, 3.0]], 24, 6.0);
        let p = build_partition(&grid, &config, 2.0).unwrap();
        let k = 0;
        let v = [1.0, 0.0, 0.0];
        let reference = total_force(&ops, &state, &config, k, v).unwrap();
        assert!(reference.abs() > 1e-6, "force too small to be a meaningful check");

        let lin_opts = ForceOptions::default();
        let mut cd_opts = ForceOptions::default();
        cd_opts.method = ForceMethod::CentralDifference;
        let h = cd_opts.cd_step;
        let entry_tol = (10.0 * h * h).max(1e-6);

        let mut rows = Vec::new();
        for flavor in [Flavor::E1, Flavor::E2] {
            let lin = site_forces(&ops, &state, &m, &config, &p, k, v, flavor, &lin_opts).unwrap();
            assert!(
                (lin.total() - reference).abs() <= 1e-6 * reference.abs(),
                "{flavor:?} linearised total {} vs reference {reference}",
                lin.total()
            );
            let cd = site_forces(&ops, &state, &m, &config, &p, k, v, flavor, &cd_opts).unwrap();
            assert!(
                (cd.total() - reference).abs()
                    <= entry_tol * cd.entries.len() as f64 + 1e-6 * reference.abs(),
                "{flavor:?} central-difference total {} vs reference {reference}",
                cd.total()
            );
            for (j, (a, b)) in lin.entries.iter().zip(&cd.entries).enumerate() {
                assert!(
                    (a - b).abs() <= entry_tol,
                    "{flavor:?} entry {j}: linearised {a} vs central-difference {b}"
                );
            }
            rows.push(lin);
        }
        // The two flavors assign different site splits but the same total.
        assert!((rows[0].total() - rows[1].total()).abs() <= 1e-6 * reference.abs());
    }

    /// Mirror dimer: pushing either nucleus along the bond gives opposite
    /// diagonal force entries.
    #[test]
    fn mirror_dimer_forces_are_antisymmetric() {
        let (grid, ops, config, m, state) =
            nucleus_state(vec![[2.2, 3.0, 3.0], [3.8, 3.0, 3.0]], 24, 6.0);
        let p = build_partition(&grid, &config, 2.0).unwrap();
        let v = [1.0, 0.0, 0.0];
        let opts = ForceOptions::default();
        let row0 = site_forces(&ops, &state, &m, &config, &p, 0, v, Flavor::E1, &opts).unwrap();
        let row1 = site_forces(&ops, &state, &m, &config, &p, 1, v, Flavor::E1, &opts).unwrap();
        let scale = row0.entries[0].abs().max(1e-12);
        assert!(
            (row0.entries[0] + row1.entries[1]).abs() <= 1e-6 * scale,
            "diagonal entries not antisymmetric: {} vs {}",
            row0.entries[0],
            row1.entries[1]
        );
        assert!(
            (row0.entries[1] + row1.entries[0]).abs() <= 1e-6 * scale,
            "off-diagonal entries not antisymmetric"
        );
    }

    #[test]
    fn forces_reject_background_only_configurations() {
        let grid = Grid::new(12, 3.0).unwrap();
        let ops = SpectralOps::new(grid);
        let config = NuclearConfig::jellium(1.0);
        let m = assemble_density(&grid, &config).unwrap();
        let state = solve_ground_state(&ops, &m, &SolverOptions::default()).unwrap();
        let p = Partition { gamma_tilde: 0.5, centers: vec![], members: vec![] };
        let err = site_forces(
            &ops,
            &state,
            &m,
            &config,
            &p,
            0,
            [1.0, 0.0, 0.0],
            Flavor::E1,
            &ForceOptions::default(),
        );
        assert!(matches!(err, Err(TfwError::EmptyConfiguration)));
    }

    #[test]
    fn invariance_suite_reports_exact_symmetries() {
        let grid = Grid::new(16, 4.0).unwrap();
        let ops = SpectralOps::new(grid);
        let config = NuclearConfig::new(vec![[1.0, 1.0, 1.0], [3.0, 3.0, 3.0]], 1.0, 0.0);
        let report = invariance_suite(
            &ops,
            &config,
            DEFAULT_GAMMA_TILDE,
            Flavor::E1,
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(report.permutation_dev, 0.0);
        assert!(report.translation_dev <= 1e-8, "translation dev {}", report.translation_dev);
        assert!(report.rotation_dev <= 1e-8, "rotation dev {}", report.rotation_dev);
    }
}
