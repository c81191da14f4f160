use crate::error::{Result, TfwError};
use crate::field::{ScalarField, VectorField};
use crate::grid::Grid;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::Arc;

/// Relative neutrality a Poisson source must satisfy: `|mean(rho)| <= tol * rms(rho)`.
pub const NEUTRALITY_TOL: f64 = 1e-10;

/// Fourier-space differential operators on a periodic grid.
///
/// Plans are built once per grid and reused. All differential operators are
/// diagonal multipliers on the discrete Fourier coefficients, restricted to
/// the symmetric band `|k_i| < n/2` per axis: the Nyquist plane of an even
/// real grid is self-conjugate, so odd derivatives there have no real
/// representation, and keeping it in some operators but not others would
/// break the integration-by-parts identities the energy bookkeeping relies
/// on. Projecting it out of *every* differential operator (a Fourier-Galerkin
/// truncation) makes, for arbitrary grid data and exactly in the grid
/// quadrature:
///
/// * `integrate(|gradient(f)|^2) = integrate(f * (-laplacian(f)))`,
/// * divergence of gradient = laplacian,
/// * `1/2 integrate(phi * rho) = 1/(8 pi) integrate(|gradient(phi)|^2)`
///   for `phi = poisson_solve(rho)`,
///
/// because products of two band-limited fields are quadrature-exact (no
/// aliasing below the sampling rate). Fields below the Nyquist frequency are
/// untouched, so band-limited results remain spectrally exact. The Poisson
/// solve additionally pins the `k = 0` mode to zero: potentials come out
/// with zero mean.
pub struct SpectralOps {
    pub grid: Grid,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// Wavenumber per axis index (the Nyquist slot holds `+n/2`'s value, but
    /// every projected operator zeroes that plane before it is used).
    k: Vec<f64>,
}

impl SpectralOps {
    pub fn new(grid: Grid) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft(grid.n, FftDirection::Forward);
        let inv = planner.plan_fft(grid.n, FftDirection::Inverse);
        let k: Vec<f64> = (0..grid.n).map(|j| grid.wavenumber(j)).collect();
        SpectralOps { grid, fwd, inv, k }
    }

    /// Forward DFT of a real field (unnormalized, x-fastest layout kept).
    pub(crate) fn forward(&self, f: &ScalarField) -> Vec<Complex64> {
        debug_assert_eq!(f.grid, self.grid);
        let mut buf: Vec<Complex64> = f.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft3(&mut buf, true);
        buf
    }

    /// Inverse DFT, keeping the real part and applying the `1/n^3` factor.
    pub(crate) fn inverse_re(&self, mut spec: Vec<Complex64>) -> ScalarField {
        self.fft3(&mut spec, false);
        let scale = 1.0 / self.grid.num_points() as f64;
        let data: Vec<f64> = if spec.len() >= 1 << 15 {
            spec.par_iter().map(|c| c.re * scale).collect()
        } else {
            spec.iter().map(|c| c.re * scale).collect()
        };
        ScalarField { grid: self.grid, data }
    }

    /// Multiply by `mult(kx, ky, kz)` on the symmetric band; zero every mode
    /// with any axis index on the Nyquist plane.
    pub(crate) fn apply_projected(
        &self,
        spec: &mut [Complex64],
        mult: impl Fn(f64, f64, f64) -> Complex64 + Sync,
    ) {
        let n = self.grid.n;
        let nyq = n / 2;
        let k = &self.k;
        spec.par_chunks_mut(n * n).enumerate().for_each(|(kz_idx, slab)| {
            let z_dead = kz_idx == nyq;
            let kz = k[kz_idx];
            for j in 0..n {
                let row_dead = z_dead || j == nyq;
                let ky = k[j];
                for i in 0..n {
                    let c = &mut slab[i + n * j];
                    if row_dead || i == nyq {
                        *c = Complex64::new(0.0, 0.0);
                    } else {
                        *c *= mult(k[i], ky, kz);
                    }
                }
            }
        });
    }

    /// `Delta f`, spectrally exact for band-limited fields.
    pub fn laplacian(&self, f: &ScalarField) -> ScalarField {
        let mut spec = self.forward(f);
        self.apply_projected(&mut spec, |kx, ky, kz| {
            Complex64::new(-(kx * kx + ky * ky + kz * kz), 0.0)
        });
        self.inverse_re(spec)
    }

    /// `grad f` as three component fields.
    pub fn gradient(&self, f: &ScalarField) -> VectorField {
        let spec = self.forward(f);
        let mut out = Vec::with_capacity(3);
        for axis in 0..3 {
            let mut s = spec.clone();
            self.apply_projected(&mut s, |kx, ky, kz| {
                let k = [kx, ky, kz][axis];
                Complex64::new(0.0, k)
            });
            out.push(self.inverse_re(s));
        }
        let z = out.pop().unwrap();
        let y = out.pop().unwrap();
        let x = out.pop().unwrap();
        VectorField { x, y, z }
    }

    /// Solve `-Delta phi = 4 pi rho` on the torus; `phi` has zero mean.
    ///
    /// The source must be numerically neutral: `|mean(rho)| <= NEUTRALITY_TOL * rms(rho)`.
    /// A non-neutral source has no periodic solution and is rejected rather
    /// than silently projected.
    pub fn poisson_solve(&self, rho: &ScalarField) -> Result<ScalarField> {
        let mean = rho.mean();
        let rms = rho.rms();
        let limit = NEUTRALITY_TOL * rms;
        if mean.abs() > limit {
            return Err(TfwError::NonNeutralSource {
                mean_abs: mean.abs(),
                limit,
                tol: NEUTRALITY_TOL,
            });
        }
        let mut phi = self.inv_lap_zero_mean(rho);
        phi.scale(4.0 * std::f64::consts::PI);
        Ok(phi)
    }

    /// `(-Delta)^{-1} f` with the mean (k = 0) component projected out.
    ///
    /// No neutrality check: this is the building block for screened operators
    /// where the projection itself is part of the operator definition.
    pub(crate) fn inv_lap_zero_mean(&self, f: &ScalarField) -> ScalarField {
        let mut spec = self.forward(f);
        self.apply_projected(&mut spec, |kx, ky, kz| {
            let k2 = kx * kx + ky * ky + kz * kz;
            if k2 == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(1.0 / k2, 0.0)
            }
        });
        self.inverse_re(spec)
    }

    /// Apply the inverse of the screened symbol `|k|^2 + a0 + b0/|k|^2` on
    /// the resolved band; Nyquist-plane modes are projected out, `k = 0`
    /// (where the long-range term is screened by charge conservation) is
    /// divided by `a0`.
    ///
    /// This is the exact Hessian inverse of the energy at a uniform state
    /// with `a0 = (20/9) m0^{2/3}` and `b0 = 8 pi m0`; on non-uniform states
    /// it is used as a preconditioner. Projecting here keeps every solver
    /// direction built from it inside the resolved band (see
    /// [`Self::band_project`]).
    pub(crate) fn precondition(&self, r: &ScalarField, a0: f64, b0: f64) -> ScalarField {
        debug_assert!(a0 > 0.0 && b0 >= 0.0);
        let mut spec = self.forward(r);
        self.apply_projected(&mut spec, |kx, ky, kz| {
            let k2 = kx * kx + ky * ky + kz * kz;
            let denom = if k2 == 0.0 { a0 } else { k2 + a0 + b0 / k2 };
            Complex64::new(1.0 / denom, 0.0)
        });
        self.inverse_re(spec)
    }

    /// Project a field onto the resolved band (zero the Nyquist planes).
    ///
    /// Pointwise products of resolved fields (densities, potentials times
    /// amplitudes) pick up Nyquist-plane content that every differential
    /// operator here annihilates. A minimization run entirely inside the
    /// band cannot park density on those modes (where it would be invisible
    /// to the kinetic term and make the discrete energy spuriously low), so
    /// solvers re-project their states and directions through this after
    /// every nonlinear operation.
    pub(crate) fn band_project(&self, f: &ScalarField) -> ScalarField {
        let mut spec = self.forward(f);
        self.apply_projected(&mut spec, |_, _, _| Complex64::new(1.0, 0.0));
        self.inverse_re(spec)
    }

    /// `integral |grad f|^2` from the forward coefficients of `f`. The sum
    /// runs over the same symmetric band as the projected operators, so by
    /// Parseval it equals both `integral f * (-Delta f)` and the quadrature
    /// of `|gradient(f)|^2` exactly: the energy stays consistent with the
    /// spectral Euler-Lagrange operator down to rounding.
    pub(crate) fn kinetic_from_spec(&self, spec: &[Complex64]) -> f64 {
        let weight = self.grid.dv() / self.grid.num_points() as f64;
        weight * self.banded_norm_sq(spec, |k2| k2)
    }

    /// `1/2 integral phi rho` from the forward coefficients of `rho`, where
    /// `phi` is the zero-mean solution of `-Delta phi = 4 pi rho`.
    pub(crate) fn coulomb_from_spec(&self, rho_spec: &[Complex64]) -> f64 {
        let weight = self.grid.dv() / self.grid.num_points() as f64;
        2.0 * std::f64::consts::PI
            * weight
            * self.banded_norm_sq(rho_spec, |k2| if k2 == 0.0 { 0.0 } else { 1.0 / k2 })
    }

    /// Sequential compensated sum of `w(|k|^2) |spec_k|^2` over the symmetric
    /// band (Nyquist plane excluded, matching the projected operators).
    fn banded_norm_sq(&self, spec: &[Complex64], w: impl Fn(f64) -> f64) -> f64 {
        let n = self.grid.n;
        let nyq = n / 2;
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for kz_idx in 0..n {
            if kz_idx == nyq {
                continue;
            }
            let kz2 = self.k[kz_idx] * self.k[kz_idx];
            for j in 0..n {
                if j == nyq {
                    continue;
                }
                let kyz2 = kz2 + self.k[j] * self.k[j];
                let row = &spec[n * (j + n * kz_idx)..n * (j + n * kz_idx) + n];
                for (i, c) in row.iter().enumerate() {
                    if i == nyq {
                        continue;
                    }
                    let term = w(self.k[i] * self.k[i] + kyz2) * c.norm_sqr();
                    let t = sum + term;
                    if sum.abs() >= term.abs() {
                        comp += (sum - t) + term;
                    } else {
                        comp += (term - t) + sum;
                    }
                    sum = t;
                }
            }
        }
        sum + comp
    }

    /// `-Delta f` from its forward coefficients (consumes the spectrum).
    pub(crate) fn neg_lap_from_spec(&self, mut spec: Vec<Complex64>) -> ScalarField {
        self.apply_projected(&mut spec, |kx, ky, kz| {
            Complex64::new(kx * kx + ky * ky + kz * kz, 0.0)
        });
        self.inverse_re(spec)
    }

    /// Zero-mean `phi` with `-Delta phi = 4 pi rho`, from the coefficients of `rho`.
    pub(crate) fn phi_from_rho_spec(&self, mut spec: Vec<Complex64>) -> ScalarField {
        let four_pi = 4.0 * std::f64::consts::PI;
        self.apply_projected(&mut spec, |kx, ky, kz| {
            let k2 = kx * kx + ky * ky + kz * kz;
            if k2 == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(four_pi / k2, 0.0)
            }
        });
        self.inverse_re(spec)
    }

    /// In-place 3D FFT: batched lines along x, with transposes bringing the
    /// other two axes into the contiguous position.
    fn fft3(&self, buf: &mut Vec<Complex64>, forward: bool) {
        let n = self.grid.n;
        let fft = if forward { &self.fwd } else { &self.inv };

        // x axis: already contiguous. One z-slab (n lines) per task.
        buf.par_chunks_mut(n * n).for_each(|slab| fft.process(slab));

        // y axis: transpose x<->y inside each slab, transform, transpose back.
        buf.par_chunks_mut(n * n).for_each(|slab| transpose_square(slab, n));
        buf.par_chunks_mut(n * n).for_each(|slab| fft.process(slab));
        buf.par_chunks_mut(n * n).for_each(|slab| transpose_square(slab, n));

        // z axis: global x<->z transpose through a scratch buffer.
        let mut scratch = vec![Complex64::new(0.0, 0.0); buf.len()];
        transpose_xz(buf, &mut scratch, n);
        scratch.par_chunks_mut(n * n).for_each(|slab| fft.process(slab));
        transpose_xz(&scratch, buf, n);
    }
}

/// In-place transpose of an n x n complex matrix stored row-major.
fn transpose_square(slab: &mut [Complex64], n: usize) {
    for j in 1..n {
        for i in 0..j {
            slab.swap(i + n * j, j + n * i);
        }
    }
}

/// `dst[(k, j, i)] = src[(i, j, k)]` (x-fastest indices shown left to right).
fn transpose_xz(src: &[Complex64], dst: &mut [Complex64], n: usize) {
    dst.par_chunks_mut(n * n).enumerate().for_each(|(zo, slab)| {
        // Output slab index zo corresponds to the original x index.
        for j in 0..n {
            for i in 0..n {
                slab[i + n * j] = src[zo + n * (j + n * i)];
            }
        }
    });
}
