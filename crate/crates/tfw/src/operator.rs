//! The self-adjoint operator at the core of every linear solve in this crate:
//! the second variation of the constrained energy around a state `(u, phi)`.
//!
//! Eliminating the potential response from the coupled tangent system leaves a
//! single operator on amplitude perturbations,
//!
//! ```text
//! A w = -Delta w + ((35/9) u^{4/3} - phi - theta) w
//!       + 8 pi u (-Delta)^{-1}_0 (u w),
//! ```
//!
//! where `(-Delta)^{-1}_0` projects out the cell mean. The local coefficient
//! is the screened curvature of the kinetic + field terms; the nonlocal term
//! is the Coulomb kernel restricted to the torus. `A` is symmetric, and at a
//! ground state it is positive definite: the operator `-Delta + (5/3)u^{4/3}
//! - phi - theta` annihilates the positive function `u` and is therefore
//! nonnegative, and `A` exceeds it by `(20/9) u^{4/3}` plus a nonnegative
//! kernel. That makes conjugate gradients the right solver.

use crate::error::{Result, TfwError};
use crate::fft::SpectralOps;
use crate::field::ScalarField;

pub(crate) struct LinearisedOperator<'a> {
    ops: &'a SpectralOps,
    u: &'a ScalarField,
    /// `(35/9) u^{4/3} - phi - theta`, precomputed once.
    coeff: ScalarField,
    /// Preconditioner constants: the uniform-state symbol `|k|^2 + a0 + b0/|k|^2`.
    a0: f64,
    b0: f64,
}

impl<'a> LinearisedOperator<'a> {
    pub fn new(ops: &'a SpectralOps, u: &'a ScalarField, phi: &'a ScalarField, theta: f64) -> Self {
        let mut coeff = u.mapped(|v| 35.0 / 9.0 * (v * v).powf(2.0 / 3.0));
        coeff.zip_apply(phi, |a, p| a - p - theta);
        // Uniform-state curvature at the mean density; exact on jellium,
        // a solid preconditioner elsewhere.
        let mean_density = u.dot(u) / ops.grid.cell_volume();
        let a0 = (20.0 / 9.0 * mean_density.powf(2.0 / 3.0)).max(1e-8);
        let b0 = 8.0 * std::f64::consts::PI * mean_density;
        LinearisedOperator { ops, u, coeff, a0, b0 }
    }

    pub fn apply(&self, w: &ScalarField) -> ScalarField {
        let mut out = self.ops.neg_lap_from_spec(self.ops.forward(w));
        let mut local = w.clone();
        local.zip_apply(&self.coeff, |a, c| a * c);
        out.zip_apply(&local, |a, b| a + b);

        let mut uw = w.clone();
        uw.zip_apply(self.u, |a, b| a * b);
        let mut coul = self.ops.inv_lap_zero_mean(&uw);
        coul.zip_apply(self.u, |a, b| a * b);
        out.add_scaled(8.0 * std::f64::consts::PI, &coul);
        // The multiplicative terms leak past the resolved band; projecting
        // the output keeps the operator a self-adjoint map of the band onto
        // itself, which is the space the solves run in.
        self.ops.band_project(&out)
    }

    pub fn precondition(&self, r: &ScalarField) -> ScalarField {
        self.ops.precondition(r, self.a0, self.b0)
    }
}

/// Anything CG can invert: a symmetric positive application plus a symmetric
/// positive preconditioner.
pub(crate) trait CgOperator {
    fn apply(&self, w: &ScalarField) -> ScalarField;
    fn precondition(&self, r: &ScalarField) -> ScalarField;
}

impl CgOperator for LinearisedOperator<'_> {
    fn apply(&self, w: &ScalarField) -> ScalarField {
        LinearisedOperator::apply(self, w)
    }
    fn precondition(&self, r: &ScalarField) -> ScalarField {
        LinearisedOperator::precondition(self, r)
    }
}

/// A base operator restricted to the orthogonal complement of one direction:
/// `w -> P A P w` with `P` the orthogonal projector off `dir`. On that
/// subspace the restriction of an SPD operator stays SPD, so CG applies; the
/// projector also wraps the preconditioner to keep iterates in the subspace.
pub(crate) struct ProjectedOperator<'a, 'b> {
    pub inner: &'a LinearisedOperator<'b>,
    pub dir: &'a ScalarField,
    pub dir_norm_sq: f64,
}

impl<'a, 'b> ProjectedOperator<'a, 'b> {
    pub fn new(inner: &'a LinearisedOperator<'b>, dir: &'a ScalarField) -> Self {
        let dir_norm_sq = dir.dot(dir);
        ProjectedOperator { inner, dir, dir_norm_sq }
    }

    pub fn project(&self, w: &mut ScalarField) {
        let c = w.dot(self.dir) / self.dir_norm_sq;
        w.add_scaled(-c, self.dir);
    }
}

impl CgOperator for ProjectedOperator<'_, '_> {
    fn apply(&self, w: &ScalarField) -> ScalarField {
        let mut t = w.clone();
        self.project(&mut t);
        let mut out = self.inner.apply(&t);
        self.project(&mut out);
        out
    }
    fn precondition(&self, r: &ScalarField) -> ScalarField {
        let mut t = r.clone();
        self.project(&mut t);
        let mut out = self.inner.precondition(&t);
        self.project(&mut out);
        out
    }
}

pub(crate) struct CgOutcome {
    pub x: ScalarField,
    pub iterations: usize,
}

/// Preconditioned conjugate gradients for `A x = b`, relative tolerance on the
/// unpreconditioned residual. All inner products are sequential compensated
/// sums, so the iteration is bit-reproducible.
pub(crate) fn pcg(
    op: &impl CgOperator,
    b: &ScalarField,
    rel_tol: f64,
    max_iter: usize,
) -> Result<CgOutcome> {
    let b_norm = b.l2_norm();
    if b_norm == 0.0 {
        return Ok(CgOutcome { x: ScalarField::zeros(b.grid), iterations: 0 });
    }
    let mut x = ScalarField::zeros(b.grid);
    let mut r = b.clone();
    let mut z = op.precondition(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut res = b_norm;
    for it in 0..max_iter {
        if res <= rel_tol * b_norm {
            return Ok(CgOutcome { x, iterations: it });
        }
        let ap = op.apply(&p);
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            // Loss of positive definiteness signals a state far from any
            // minimizer; report rather than silently iterate.
            return Err(TfwError::SingularOperator { iterations: it, residual: res / b_norm, tol: rel_tol });
        }
        let alpha = rz / pap;
        x.add_scaled(alpha, &p);
        r.add_scaled(-alpha, &ap);
        res = r.l2_norm();
        z = op.precondition(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        let mut p_new = z.clone();
        p_new.add_scaled(beta, &p);
        p = p_new;
    }
    if res <= rel_tol * b_norm {
        return Ok(CgOutcome { x, iterations: max_iter });
    }
    Err(TfwError::SingularOperator { iterations: max_iter, residual: res / b_norm, tol: rel_tol })
}

pub(crate) struct BorderedOutcome {
    pub x: ScalarField,
    /// Multiplier on the constraint direction.
    pub mu: f64,
    pub cg_iterations: usize,
}

/// Solve the bordered system
///
/// ```text
/// A x - mu c = b,   <c, x> = 0,
/// ```
///
/// by a Schur complement over two CG solves: `x = A^{-1} b + mu A^{-1} c` with
/// `mu` fixed by the constraint. This is how the charge constraint enters
/// every tangent solve: the multiplier `mu` is the derivative of the
/// Lagrange multiplier along the perturbation.
pub(crate) fn bordered_solve(
    op: &LinearisedOperator,
    b: &ScalarField,
    c: &ScalarField,
    rel_tol: f64,
    max_iter: usize,
) -> Result<BorderedOutcome> {
    let sol_b = pcg(op, b, rel_tol, max_iter)?;
    let sol_c = pcg(op, c, rel_tol, max_iter)?;
    let denom = c.dot(&sol_c.x);
    if !(denom.abs() > 0.0) {
        return Err(TfwError::SingularOperator {
            iterations: sol_c.iterations,
            residual: f64::INFINITY,
            tol: rel_tol,
        });
    }
    let mu = -c.dot(&sol_b.x) / denom;
    let mut x = sol_b.x;
    x.add_scaled(mu, &sol_c.x);
    Ok(BorderedOutcome { x, mu, cg_iterations: sol_b.iterations + sol_c.iterations })
}
