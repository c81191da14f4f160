//! First-order response of a converged state to a perturbation of the
//! nuclear density, plus the closed-form screening constants of the uniform
//! electron gas.
//!
//! Differentiating the stationarity conditions of the constrained energy
//! along a path of nuclear configurations gives the coupled tangent system
//! for the amplitude response `u_dot`, the zero-mean potential response
//! `phi_dot`, and the multiplier response `theta_dot`:
//!
//! ```text
//! -Delta u_dot + ((35/9) u^{4/3} - phi - theta) u_dot
//!     - u phi_dot - theta_dot u = 0,
//! -Delta phi_dot = 4 pi (m_dot - 2 u u_dot),
//! integral 2 u u_dot = integral m_dot = 0.
//! ```
//!
//! Eliminating `phi_dot` through the zero-mean Coulomb inverse collapses the
//! pair into one bordered symmetric-positive problem for `u_dot`, which is
//! solved by preconditioned conjugate gradients (see `operator`); the border
//! multiplier is exactly `theta_dot`.
//!
//! Around the uniform gas the same system diagonalizes in Fourier space, and
//! its radial Green function is a combination of `e^{-mu r}/r` modes with
//! `mu^2 = -t` over the roots `t` of a quadratic dispersion polynomial.
//! [`screening_constants`] computes those roots and the resulting far-field
//! decay rate `alpha` and oscillation frequency `beta` in closed form.

use crate::error::{Result, TfwError};
use crate::fft::SpectralOps;
use crate::field::ScalarField;
use crate::grid::Grid;
use crate::ground_state::GroundState;
use crate::nuclei::NuclearConfig;
use crate::operator::{bordered_solve, LinearisedOperator};
use num_complex::Complex64;
use std::f64::consts::PI;

/// Uniform-gas reference state for background density `m0`: amplitude
/// `u0 = sqrt(m0)`, potential `phi0 = 0` (zero-mean gauge), multiplier
/// `theta0 = (5/3) m0^{2/3}`.
pub fn homogeneous_reference(m0: f64) -> Result<(f64, f64, f64)> {
    if !(m0 >= 0.0 && m0.is_finite()) {
        return Err(TfwError::BadConfig(format!(
            "background density must be nonnegative and finite, got {m0}"
        )));
    }
    Ok((m0.sqrt(), 0.0, 5.0 / 3.0 * m0.powf(2.0 / 3.0)))
}

/// Far-field constants of the linear response around the uniform gas.
///
/// Radial solutions of the source-free tangent system behave like
/// `e^{-mu r}/r` where `mu^2 = -t` and `t` runs over the roots of the
/// dispersion polynomial
///
/// ```text
/// q(t) = t^2 + a t + b,
/// a = (20/9) u0^{4/3} / C_W,   b = 8 pi u0^2 / C_W.
/// ```
///
/// Above the critical coupling (`a^2 < 4b`) the roots form a complex
/// conjugate pair and the response decays at rate `alpha` while oscillating
/// at frequency `beta`; below it both roots are real and negative, the
/// response is monotone (`beta = 0`), and the observable decay rate is the
/// smaller of the two exponents.
#[derive(Debug, Clone, Copy)]
pub struct ScreeningConstants {
    /// Background amplitude `sqrt(m0)`.
    pub u0: f64,
    /// Gradient-term coefficient the constants were derived at.
    pub c_w: f64,
    /// Damping coefficient of the dispersion polynomial.
    pub a: f64,
    /// Constant coefficient of the dispersion polynomial.
    pub b: f64,
    /// The two roots of `q`; complex-conjugate pair or two negative reals.
    pub roots: [Complex64; 2],
    /// Far-field decay rate of the response Green function.
    pub alpha: f64,
    /// Far-field oscillation frequency; zero in the real-root regime.
    pub beta: f64,
}

impl ScreeningConstants {
    /// Evaluate the dispersion polynomial `q(t) = t^2 + a t + b`.
    pub fn dispersion(&self, t: Complex64) -> Complex64 {
        t * t + self.a * t + self.b
    }

    /// Whether both dispersion roots are real (monotone screening).
    pub fn overdamped(&self) -> bool {
        self.beta == 0.0
    }
}

/// Closed-form screening constants for background density `m0 > 0` and
/// gradient coefficient `c_w > 0`.
pub fn screening_constants(m0: f64, c_w: f64) -> Result<ScreeningConstants> {
    if !(m0 > 0.0 && m0.is_finite()) {
        return Err(TfwError::BadConfig(format!(
            "screening constants need a positive background density, got {m0}"
        )));
    }
    if !(c_w > 0.0 && c_w.is_finite()) {
        return Err(TfwError::BadConfig(format!(
            "gradient coefficient must be positive, got {c_w}"
        )));
    }
    let u0 = m0.sqrt();
    let a = 20.0 / 9.0 * u0.powf(4.0 / 3.0) / c_w;
    let b = 8.0 * PI * u0 * u0 / c_w;
    let disc = a * a - 4.0 * b;
    let (roots, alpha, beta) = if disc >= 0.0 {
        // Two real negative roots: take the larger-magnitude one from the
        // numerically stable branch and recover the other from the product.
        let t1 = 0.5 * (-a - disc.sqrt());
        let t2 = b / t1;
        // The far field is dominated by the slower of the two decay modes.
        let alpha = (-t1).sqrt().min((-t2).sqrt());
        ([Complex64::new(t1, 0.0), Complex64::new(t2, 0.0)], alpha, 0.0)
    } else {
        let t = Complex64::new(-0.5 * a, 0.5 * (-disc).sqrt());
        // Decay exponent mu = sqrt(-t) on the branch with positive real part.
        let mu = (-t).sqrt();
        ([t, t.conj()], mu.re, mu.im.abs())
    };
    Ok(ScreeningConstants { u0, c_w, a, b, roots, alpha, beta })
}

/// Solution of the tangent system around a converged state.
#[derive(Debug, Clone)]
pub struct LinearisedSolution {
    /// Amplitude response; L2-orthogonal to `u` (linearised charge
    /// conservation).
    pub u_dot: ScalarField,
    /// Zero-mean potential response.
    pub phi_dot: ScalarField,
    /// Multiplier response (the constant mode of the potential equation).
    pub theta_dot: f64,
    /// The driving density perturbation.
    pub m_dot: ScalarField,
    /// Relative residual of the coupled system at return: the worse of the
    /// two equations, each scaled by the norm of its drive.
    pub residual: f64,
    /// Total conjugate-gradient iterations spent.
    pub cg_iterations: usize,
}

/// Options for the tangent solve.
#[derive(Debug, Clone)]
pub struct ResponseOptions {
    /// Relative tolerance for the inner conjugate-gradient solves.
    pub tol: f64,
    /// Iteration cap per conjugate-gradient solve.
    pub max_iter: usize,
}

impl Default for ResponseOptions {
    fn default() -> Self {
        ResponseOptions { tol: 1e-10, max_iter: 5000 }
    }
}

/// Absolute slack allowed on the zero-total-charge precondition, per unit of
/// total perturbation mass.
const CHARGE_TOL: f64 = 1e-10;

/// Solve the tangent system around `state` for a charge-free density
/// perturbation `m_dot`.
///
/// Fails with [`TfwError::NonNeutralPerturbation`] when `m_dot` carries net
/// charge (the potential equation has no periodic solution then), and with
/// [`TfwError::SingularOperator`] when the inner conjugate-gradient solver
/// stagnates, which signals a base state far from a true minimizer.
pub fn solve_linearised(
    ops: &SpectralOps,
    state: &GroundState,
    m_dot: &ScalarField,
    opts: &ResponseOptions,
) -> Result<LinearisedSolution> {
    if m_dot.grid != ops.grid {
        return Err(TfwError::GridMismatch { context: "perturbation grid vs operator grid".into() });
    }
    if state.u.grid != ops.grid {
        return Err(TfwError::GridMismatch { context: "state grid vs operator grid".into() });
    }
    let integral = m_dot.integrate();
    let mass = m_dot.mapped(f64::abs).integrate();
    if integral.abs() > CHARGE_TOL * mass.max(1.0) {
        return Err(TfwError::NonNeutralPerturbation { integral });
    }

    let op = LinearisedOperator::new(ops, &state.u, &state.phi, state.theta);

    // Eliminating phi_dot = (-Delta)^{-1}_0 [4 pi (m_dot - 2 u u_dot)] from
    // the amplitude equation leaves `A u_dot - theta_dot u = b` with the
    // m_dot part of the potential as the drive.
    let mut b = ops.inv_lap_zero_mean(m_dot);
    b.zip_apply(&state.u, |p, uv| 4.0 * PI * p * uv);
    let b = ops.band_project(&b);
    let b_norm = b.l2_norm();

    let (u_dot, theta_dot, cg_iterations) = if b_norm == 0.0 {
        (ScalarField::zeros(ops.grid), 0.0, 0)
    } else {
        let out = bordered_solve(&op, &b, &state.u, opts.tol, opts.max_iter)?;
        (out.x, out.mu, out.cg_iterations)
    };

    // Potential response from its own equation; zero-mean by construction.
    let mut rho = u_dot.clone();
    rho.zip_apply(&state.u, |ud, uv| -2.0 * uv * ud);
    rho.zip_apply(m_dot, |x, md| x + md);
    let phi_dot = ops.phi_from_rho_spec(ops.forward(&rho));

    // Honest residuals of both equations, measured on the resolved band and
    // scaled by their drives.
    let residual = if b_norm == 0.0 && rho.l2_norm() == 0.0 {
        0.0
    } else {
        let mut r1 = op.apply(&u_dot);
        r1.add_scaled(-theta_dot, &state.u);
        r1.zip_apply(&b, |x, bv| x - bv);
        let r1_rel = ops.band_project(&r1).l2_norm() / b_norm.max(f64::MIN_POSITIVE);

        let mut r2 = ops.neg_lap_from_spec(ops.forward(&phi_dot));
        r2.add_scaled(-4.0 * PI, &rho);
        let rho_scale = 4.0 * PI * ops.band_project(&rho).l2_norm();
        let r2_rel = ops.band_project(&r2).l2_norm() / rho_scale.max(f64::MIN_POSITIVE);
        r1_rel.max(r2_rel)
    };

    Ok(LinearisedSolution {
        u_dot,
        phi_dot,
        theta_dot,
        m_dot: m_dot.clone(),
        residual,
        cg_iterations,
    })
}

/// Analytic density perturbation for nucleus `k` of `config` moving with
/// velocity `v`: the exact directional derivative of the assembled density.
///
/// The assembled nucleus is `eta(x - Y) / Q(Y)` with `Q(Y)` the per-grid
/// quadrature charge of the sampled profile, so the derivative has two
/// parts: the transported profile gradient `-grad eta . v / Q` and the
/// normalization rate `-eta * (dQ/dY . v) / Q^2`. The second part is not
/// negligible at practical resolutions (the sampled charge of a compact
/// bump wobbles at the percent level as the center slides across cells)
/// and is exactly what makes the result chargeless: its integral cancels
/// the first part's, so the discrete net charge vanishes up to rounding.
/// The residual mean is removed as floating-point polish.
pub fn perturbation_density(
    grid: &Grid,
    config: &NuclearConfig,
    k: usize,
    v: [f64; 3],
) -> Result<ScalarField> {
    if k >= config.coords.len() {
        return Err(TfwError::BadConfig(format!(
            "nucleus index {k} out of range (have {})",
            config.coords.len()
        )));
    }
    if !v.iter().all(|c| c.is_finite()) {
        return Err(TfwError::BadConfig("displacement direction must be finite".into()));
    }
    let r0 = config.shape.r0;
    if r0 >= grid.l / 2.0 {
        return Err(TfwError::ShapeTooWide { r0, half_l: grid.l / 2.0 });
    }
    let center = grid.wrap_point(config.coords[k]);

    let mut q = 0.0f64;
    let mut q_rate = 0.0f64;
    grid.for_each_in_ball(center, r0, |_, d, r| {
        q += config.shape.profile(r);
        if r > 0.0 {
            let radial = config.shape.profile_deriv(r) / r;
            q_rate -= radial * (d[0] * v[0] + d[1] * v[1] + d[2] * v[2]);
        }
    });
    let charge = q * grid.dv();
    if charge <= 0.0 {
        return Err(TfwError::ShapeUnresolved { index: k, r0, h: grid.h });
    }
    // Relative rate of change of the per-grid normalization charge.
    let log_q_rate = q_rate / q;

    let mut out = ScalarField::zeros(*grid);
    grid.for_each_in_ball(center, r0, |idx, d, r| {
        let mut val = -config.shape.profile(r) * log_q_rate;
        if r > 0.0 {
            let radial = config.shape.profile_deriv(r) / r;
            val -= radial * (d[0] * v[0] + d[1] * v[1] + d[2] * v[2]);
        }
        out.data[idx] = val / charge;
    });

    let mean = out.mean();
    if mean != 0.0 {
        out.apply(|x| x - mean);
    }
    Ok(out)
}

/// One row of the difference-quotient consistency table.
#[derive(Debug, Clone, Copy)]
pub struct FdRow {
    /// Displacement magnitude.
    pub h: f64,
    /// `max |(u_h - u)/h - u_dot|` over the grid.
    pub error: f64,
    /// `error` of this row divided by `error` of the previous row; `None` on
    /// the first row. Halving `h` should roughly halve the error.
    pub ratio: Option<f64>,
}

/// Compare the tangent field against difference quotients of re-solved
/// states.
///
/// `u_of(h)` must return the converged amplitude for the configuration
/// displaced by `h` along the direction that `lin` was solved for; `state`
/// is the base point. Every `h` must be positive.
pub fn fd_consistency(
    state: &GroundState,
    lin: &LinearisedSolution,
    h_list: &[f64],
    mut u_of: impl FnMut(f64) -> Result<ScalarField>,
) -> Result<Vec<FdRow>> {
    if state.u.grid != lin.u_dot.grid {
        return Err(TfwError::GridMismatch { context: "state grid vs tangent grid".into() });
    }
    let mut rows = Vec::with_capacity(h_list.len());
    let mut prev: Option<f64> = None;
    for &h in h_list {
        if !(h > 0.0 && h.is_finite()) {
            return Err(TfwError::BadConfig(format!(
                "difference-quotient step must be positive, got {h}"
            )));
        }
        let u_h = u_of(h)?;
        if u_h.grid != state.u.grid {
            return Err(TfwError::GridMismatch { context: "re-solved grid vs base grid".into() });
        }
        let mut quotient = u_h;
        quotient.zip_apply(&state.u, |a, b| (a - b) / h);
        let error = quotient.sup_diff(&lin.u_dot);
        rows.push(FdRow { h, error, ratio: prev.map(|p| error / p) });
        prev = Some(error);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ground_state::{solve_ground_state, InitGuess, SolverOptions};
    use crate::nuclei::assemble_density;

    fn uniform_state(grid: Grid, m0: f64) -> GroundState {
        let (u0, _, theta0) = homogeneous_reference(m0).unwrap();
        GroundState {
            u: ScalarField::constant(grid, u0),
            phi: ScalarField::zeros(grid),
            theta: theta0,
            energy: m0.powf(5.0 / 3.0) * grid.cell_volume(),
            residual_u: 0.0,
            residual_phi: 0.0,
            iterations: 0,
            energy_trace: Vec::new(),
        }
    }

    #[test]
    fn homogeneous_reference_closed_forms() {
        let (u0, phi0, theta0) = homogeneous_reference(1.0).unwrap();
        assert_eq!((u0, phi0), (1.0, 0.0));
        assert!((theta0 - 5.0 / 3.0).abs() < 1e-15);

        assert_eq!(homogeneous_reference(0.0).unwrap(), (0.0, 0.0, 0.0));

        let (u0, phi0, theta0) = homogeneous_reference(8.0).unwrap();
        assert!((u0 - 2.0 * 2.0f64.sqrt()).abs() < 1e-15);
        assert_eq!(phi0, 0.0);
        assert!((theta0 - 20.0 / 3.0).abs() < 1e-14);

        assert!(homogeneous_reference(-1.0).is_err());
    }

    /// Independent root oracle at `m0 = 1`, `c_w = 1`: with `a = 20/9` and
    /// `b = 8 pi` the discriminant is negative, and the closed forms
    /// `alpha = sqrt((sqrt(b) + a/2)/2)`, `beta = sqrt((sqrt(b) - a/2)/2)`
    /// follow from `alpha^2 - beta^2 = a/2` and `alpha^2 + beta^2 = sqrt(b)`.
    #[test]
    fn screening_constants_match_the_root_oracle() {
        let sc = screening_constants(1.0, 1.0).unwrap();
        let a = 20.0 / 9.0;
        let b = 8.0 * PI;
        assert!((sc.a - a).abs() < 1e-15);
        assert!((sc.b - b).abs() < 1e-13);

        let alpha_oracle = ((b.sqrt() + 0.5 * a) / 2.0).sqrt();
        let beta_oracle = ((b.sqrt() - 0.5 * a) / 2.0).sqrt();
        assert!((sc.alpha - alpha_oracle).abs() < 1e-13, "alpha = {}", sc.alpha);
        assert!((sc.beta - beta_oracle).abs() < 1e-13, "beta = {}", sc.beta);
        // Digits pinned once from the oracle above.
        assert!((sc.alpha - 1.749909663435960).abs() < 1e-12);
        assert!((sc.beta - 1.396808046610358).abs() < 1e-12);

        for t in sc.roots {
            assert!(sc.dispersion(t).norm() <= 1e-12 * sc.b, "q(t) = {}", sc.dispersion(t));
        }
        // The pair is conjugate and |t|^2 = b.
        assert!((sc.roots[0].conj() - sc.roots[1]).norm() < 1e-13);
        assert!((sc.roots[0].norm_sqr() - b).abs() < 1e-12 * b);
        // Cross-identities between roots and (alpha, beta).
        assert!((sc.alpha * sc.alpha + sc.beta * sc.beta - b.sqrt()).abs() < 1e-12);
        assert!((2.0 * sc.alpha * sc.beta - sc.roots[0].im.abs()).abs() < 1e-12);
        assert!(!sc.overdamped());
    }

    /// Below the critical coupling `c_w = (400/81) u0^{2/3} / (32 pi)` both
    /// roots are real negative and the oscillation frequency vanishes.
    #[test]
    fn screening_constants_overdamped_regime() {
        let critical = (20.0f64 / 9.0).powi(2) / (32.0 * PI);
        assert!((critical - 0.049121896016017).abs() < 1e-13);

        let sc = screening_constants(1.0, 0.04).unwrap();
        assert!(sc.overdamped());
        assert_eq!(sc.beta, 0.0);
        assert!(sc.alpha > 0.0);
        for t in sc.roots {
            assert_eq!(t.im, 0.0);
            assert!(t.re < 0.0);
            assert!(sc.dispersion(t).norm() <= 1e-12 * sc.b);
        }
        // alpha is the slower of the two decay exponents.
        let mu_min = sc.roots.iter().map(|t| (-t.re).sqrt()).fold(f64::INFINITY, f64::min);
        assert!((sc.alpha - mu_min).abs() < 1e-14);

        // Just above the threshold the pair turns complex.
        let sc = screening_constants(1.0, 0.05).unwrap();
        assert!(!sc.overdamped());
        assert!(sc.beta > 0.0);
    }

    /// A stiffer gradient term screens more weakly: alpha decreases
    /// monotonically in `c_w` at fixed background.
    #[test]
    fn screening_rate_decreases_with_gradient_stiffness() {
        let mut last = f64::INFINITY;
        for i in 0..12 {
            let c_w = 0.25 * 2.0f64.powi(i) / 4.0;
            let sc = screening_constants(1.3, c_w).unwrap();
            assert!(sc.alpha > 0.0);
            assert!(sc.alpha < last, "alpha not decreasing at c_w = {c_w}");
            last = sc.alpha;
        }
    }

    /// On the uniform gas the tangent system is diagonal in Fourier space;
    /// for a drive made of two pure modes the solution must match the
    /// hand-inverted 2x2 symbol per mode:
    ///
    /// u_hat = 4 pi u0 m_hat / (k^2 (k^2 + (20/9) u0^{4/3}) + 8 pi u0^2),
    /// phi_hat = 4 pi (k^2 + (20/9) u0^{4/3}) m_hat / (same denominator).
    #[test]
    fn uniform_gas_response_matches_symbol_inverse() {
        let grid = Grid::new(16, 4.0).unwrap();
        let ops = SpectralOps::new(grid);
        let m0 = 0.9;
        let state = uniform_state(grid, m0);
        let u0 = m0.sqrt();
        let c = 20.0 / 9.0 * u0.powf(4.0 / 3.0);

        let k1 = 2.0 * PI / grid.l;
        let k2 = 2.0 * PI / grid.l * 2.0;
        let (e1, e2) = (0.01, 0.004);
        let m_dot = ScalarField::from_fn(grid, |x, y, _| e1 * (k1 * x).cos() + e2 * (k2 * y).sin());

        let sol = solve_linearised(&ops, &state, &m_dot, &ResponseOptions::default()).unwrap();

        let gain_u = |k: f64| 4.0 * PI * u0 / (k * k * (k * k + c) + 8.0 * PI * u0 * u0);
        let gain_phi = |k: f64| 4.0 * PI * (k * k + c) / (k * k * (k * k + c) + 8.0 * PI * u0 * u0);
        let u_exact = ScalarField::from_fn(grid, |x, y, _| {
            e1 * gain_u(k1) * (k1 * x).cos() + e2 * gain_u(k2) * (k2 * y).sin()
        });
        let phi_exact = ScalarField::from_fn(grid, |x, y, _| {
            e1 * gain_phi(k1) * (k1 * x).cos() + e2 * gain_phi(k2) * (k2 * y).sin()
        });

        let scale = u_exact.sup_norm();
        assert!(sol.u_dot.sup_diff(&u_exact) <= 1e-10 * scale, "u_dot off by {}", sol.u_dot.sup_diff(&u_exact) / scale);
        assert!(sol.phi_dot.sup_diff(&phi_exact) <= 1e-10 * phi_exact.sup_norm());
        assert!(sol.theta_dot.abs() <= 1e-12);
        assert!(sol.residual <= 1e-10);
    }

    #[test]
    fn zero_perturbation_yields_zero_response() {
        let grid = Grid::new(12, 3.0).unwrap();
        let ops = SpectralOps::new(grid);
        let state = uniform_state(grid, 1.0);
        let sol =
            solve_linearised(&ops, &state, &ScalarField::zeros(grid), &ResponseOptions::default())
                .unwrap();
        assert_eq!(sol.u_dot.sup_norm(), 0.0);
        assert_eq!(sol.phi_dot.sup_norm(), 0.0);
        assert_eq!(sol.theta_dot, 0.0);
        assert_eq!(sol.residual, 0.0);
        assert_eq!(sol.cg_iterations, 0);
    }

    #[test]
    fn net_charge_in_the_perturbation_is_rejected() {
        let grid = Grid::new(12, 3.0).unwrap();
        let ops = SpectralOps::new(grid);
        let state = uniform_state(grid, 1.0);
        let m_dot = ScalarField::constant(grid, 0.01);
        match solve_linearised(&ops, &state, &m_dot, &ResponseOptions::default()) {
            Err(TfwError::NonNeutralPerturbation { integral }) => {
                assert!((integral - 0.01 * grid.cell_volume()).abs() < 1e-12);
            }
            other => panic!("expected NonNeutralPerturbation, got {other:?}"),
        }
    }

    #[test]
    fn moved_nucleus_perturbation_is_chargeless_and_dipolar() {
        // Pushing the nucleus toward +x moves charge from the back half to
        // the front half: the first moment along x equals the moved charge
        // (one unit times the displacement rate), up to the quadrature
        // residue of the profile derivative, which dies superalgebraically
        // under grid refinement.
        let moment_error = |n: usize| {
            let grid = Grid::new(n, 6.0).unwrap();
            let config = NuclearConfig::new(vec![[3.0, 3.0, 3.0]], 1.0, 0.0);
            let m_dot = perturbation_density(&grid, &config, 0, [1.0, 0.0, 0.0]).unwrap();
            assert!(m_dot.integrate().abs() < 1e-12);
            let moment = ScalarField::from_fn(grid, |x, _, _| x - 3.0).dot(&m_dot);
            (moment - 1.0).abs()
        };
        let coarse = moment_error(24);
        let fine = moment_error(48);
        assert!(coarse < 1e-3, "coarse moment error {coarse}");
        assert!(fine < 2e-5, "fine moment error {fine}");
        assert!(fine < coarse / 4.0, "no refinement gain: {coarse} -> {fine}");

        let grid = Grid::new(48, 6.0).unwrap();
        let config = NuclearConfig::new(vec![[3.0, 3.0, 3.0]], 1.0, 0.0);
        let m_dot = perturbation_density(&grid, &config, 0, [1.0, 0.0, 0.0]).unwrap();
        assert!(m_dot.sup_norm() > 0.0);

        // Antisymmetric under the reflection x -> 2 x_c - x, symmetric in y, z.
        let n = grid.n;
        let mut max_asym = 0.0f64;
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let reflected = m_dot.data[grid.idx((2 * n - i) % n, j, k)];
                    let asym = (m_dot.data[grid.idx(i, j, k)] + reflected).abs();
                    max_asym = max_asym.max(asym);
                }
            }
        }
        // The mean-removal shift moves both halves by the same constant, so
        // exact antisymmetry survives up to twice that constant.
        assert!(max_asym <= 2e-12 * m_dot.sup_norm(), "asymmetry {max_asym}");
    }

    fn lattice_state() -> (Grid, SpectralOps, NuclearConfig, ScalarField, GroundState) {
        let grid = Grid::new(16, 4.0).unwrap();
        let ops = SpectralOps::new(grid);
        let config = NuclearConfig::new(vec![[2.0, 2.0, 2.0]], 1.0, 0.0);
        let m = assemble_density(&grid, &config).unwrap();
        let opts = SolverOptions::default();
        let state = solve_ground_state(&ops, &m, &opts).unwrap();
        (grid, ops, config, m, state)
    }

    /// Around a genuinely inhomogeneous state: linearity, charge response,
    /// the sign of the local curvature form, the multiplier response of a
    /// symmetric configuration, and the reflection antisymmetry of the
    /// tangent field.
    #[test]
    fn response_around_a_single_nucleus() {
        let (grid, ops, config, _m, state) = lattice_state();
        let m_dot = perturbation_density(&grid, &config, 0, [1.0, 0.0, 0.0]).unwrap();
        let opts = ResponseOptions::default();
        let sol = solve_linearised(&ops, &state, &m_dot, &opts).unwrap();

        assert!(sol.residual <= opts.tol * 10.0, "residual {}", sol.residual);

        // Linearised neutrality: integral 2 u u_dot = integral m_dot.
        let charge_response = 2.0 * state.u.dot(&sol.u_dot);
        assert!((charge_response - sol.m_dot.integrate()).abs() <= 1e-8);

        // Linearity of the solve.
        let mut doubled = m_dot.clone();
        doubled.scale(2.0);
        let sol2 = solve_linearised(&ops, &state, &doubled, &opts).unwrap();
        let mut twice = sol.u_dot.clone();
        twice.scale(2.0);
        assert!(sol2.u_dot.sup_diff(&twice) <= 1e-10 * twice.sup_norm().max(1e-30));
        assert!((sol2.theta_dot - 2.0 * sol.theta_dot).abs() <= 1e-10 * sol.theta_dot.abs().max(1e-12));

        // The local curvature form -Delta + (35/9) u^{4/3} - phi - theta is
        // nonnegative at a minimizer (it dominates the operator that
        // annihilates the positive function u).
        let lap = ops.laplacian(&sol.u_dot);
        let mut coeff = state.u.mapped(|uv| 35.0 / 9.0 * (uv * uv).powf(2.0 / 3.0));
        coeff.zip_apply(&state.phi, |c, p| c - p - state.theta);
        let mut local = sol.u_dot.clone();
        local.zip_apply(&coeff, |w, c| w * c);
        let form = -sol.u_dot.dot(&lap) + sol.u_dot.dot(&local);
        let norm_sq = sol.u_dot.dot(&sol.u_dot);
        assert!(form >= -1e-8 * norm_sq, "curvature form {form} vs norm^2 {norm_sq}");

        // Moving the nucleus of a reflection-symmetric cell changes the
        // multiplier only at second order.
        assert!(sol.theta_dot.abs() <= 1e-7, "theta_dot = {}", sol.theta_dot);

        // The tangent field inherits the antisymmetry of the drive.
        let n = grid.n;
        let mut max_asym = 0.0f64;
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let reflected = sol.u_dot.data[grid.idx((2 * n - i) % n, j, k)];
                    max_asym = max_asym.max((sol.u_dot.data[grid.idx(i, j, k)] + reflected).abs());
                }
            }
        }
        assert!(max_asym <= 1e-6 * sol.u_dot.sup_norm(), "asymmetry {max_asym}");
    }

    /// The tangent field is the h -> 0 limit of difference quotients of
    /// re-solved states: the error is O(h), so halving h halves it.
    #[test]
    fn difference_quotients_converge_to_the_tangent() {
        let (grid, ops, config, _m, state) = lattice_state();
        let dir = [1.0, 0.0, 0.0];
        let m_dot = perturbation_density(&grid, &config, 0, dir).unwrap();
        let sol = solve_linearised(&ops, &state, &m_dot, &ResponseOptions::default()).unwrap();

        let rows = fd_consistency(&state, &sol, &[0.2, 0.1, 0.05], |h| {
            let moved = config.perturbed(0, dir, h, &grid);
            let m_h = assemble_density(&grid, &moved)?;
            let mut opts = SolverOptions::default();
            opts.init = InitGuess::Supplied(state.u.clone());
            Ok(solve_ground_state(&ops, &m_h, &opts)?.u)
        })
        .unwrap();

        assert_eq!(rows.len(), 3);
        assert!(rows[0].ratio.is_none());
        for row in &rows[1..] {
            let ratio = row.ratio.unwrap();
            assert!(
                (0.35..=0.65).contains(&ratio),
                "ratio {ratio} at h = {} (errors: {:?})",
                row.h,
                rows.iter().map(|r| r.error).collect::<Vec<_>>()
            );
        }
    }
}
