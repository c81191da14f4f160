use crate::grid::Grid;
use rayon::prelude::*;

/// Real scalar samples on a [`Grid`], stored x-fastest.
///
/// Reductions (integrals, inner products, norms) run sequentially with
/// compensated summation so results are bit-reproducible regardless of the
/// thread count; elementwise maps may run in parallel because each output
/// element is written independently.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub data: Vec<f64>,
}

/// Threshold below which parallel elementwise maps are not worth the overhead.
const PAR_MIN_LEN: usize = 1 << 15;

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        ScalarField { grid, data: vec![0.0; grid.num_points()] }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        ScalarField { grid, data: vec![c; grid.num_points()] }
    }

    /// Sample `f(x, y, z)` at every grid point.
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64, f64) -> f64 + Sync) -> Self {
        let n = grid.n;
        let h = grid.h;
        let mut data = vec![0.0; grid.num_points()];
        data.par_chunks_mut(n * n).enumerate().for_each(|(k, slab)| {
            let z = k as f64 * h;
            for j in 0..n {
                let y = j as f64 * h;
                for i in 0..n {
                    slab[i + n * j] = f(i as f64 * h, y, z);
                }
            }
        });
        ScalarField { grid, data }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `integral f dx` over the cell: compensated (Neumaier) sum times `h^3`.
    pub fn integrate(&self) -> f64 {
        neumaier_sum(&self.data) * self.grid.dv()
    }

    /// `integral f*g dx`.
    pub fn dot(&self, other: &ScalarField) -> f64 {
        debug_assert_eq!(self.grid, other.grid);
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let term = a * b;
            let t = sum + term;
            if sum.abs() >= term.abs() {
                comp += (sum - t) + term;
            } else {
                comp += (term - t) + sum;
            }
            sum = t;
        }
        (sum + comp) * self.grid.dv()
    }

    /// Continuum-normalized L2 norm `sqrt(integral f^2)`.
    pub fn l2_norm(&self) -> f64 {
        self.dot(self).max(0.0).sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn max(&self) -> f64 {
        self.data.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    pub fn mean(&self) -> f64 {
        neumaier_sum(&self.data) / self.data.len() as f64
    }

    /// Root-mean-square of the samples.
    pub fn rms(&self) -> f64 {
        let mut sq = 0.0f64;
        let mut comp = 0.0f64;
        for &v in &self.data {
            let term = v * v;
            let t = sq + term;
            if sq.abs() >= term.abs() {
                comp += (sq - t) + term;
            } else {
                comp += (term - t) + sq;
            }
            sq = t;
        }
        (((sq + comp) / self.data.len() as f64).max(0.0)).sqrt()
    }

    /// Elementwise map into a new field.
    pub fn mapped(&self, f: impl Fn(f64) -> f64 + Sync) -> ScalarField {
        let mut out = self.clone();
        out.apply(f);
        out
    }

    /// Elementwise map in place.
    pub fn apply(&mut self, f: impl Fn(f64) -> f64 + Sync) {
        if self.data.len() >= PAR_MIN_LEN {
            self.data.par_iter_mut().for_each(|v| *v = f(*v));
        } else {
            self.data.iter_mut().for_each(|v| *v = f(*v));
        }
    }

    /// `self[i] = f(self[i], other[i])` for every point.
    pub fn zip_apply(&mut self, other: &ScalarField, f: impl Fn(f64, f64) -> f64 + Sync) {
        debug_assert_eq!(self.grid, other.grid);
        if self.data.len() >= PAR_MIN_LEN {
            self.data
                .par_iter_mut()
                .zip(other.data.par_iter())
                .for_each(|(a, &b)| *a = f(*a, b));
        } else {
            self.data
                .iter_mut()
                .zip(other.data.iter())
                .for_each(|(a, &b)| *a = f(*a, b));
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ScalarField) {
        self.zip_apply(other, |a, b| a + alpha * b);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.apply(|v| alpha * v);
    }

    /// `max |self - other|` over the grid.
    pub fn sup_diff(&self, other: &ScalarField) -> f64 {
        debug_assert_eq!(self.grid, other.grid);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Cartesian components of a vector field, one scalar field per axis.
#[derive(Debug, Clone)]
pub struct VectorField {
    pub x: ScalarField,
    pub y: ScalarField,
    pub z: ScalarField,
}

impl VectorField {
    /// Pointwise squared magnitude `|v|^2`.
    pub fn magnitude_sq(&self) -> ScalarField {
        let mut out = self.x.mapped(|v| v * v);
        out.zip_apply(&self.y, |a, b| a + b * b);
        out.zip_apply(&self.z, |a, b| a + b * b);
        out
    }

    /// Pointwise dot product with another vector field.
    pub fn dot_pointwise(&self, other: &VectorField) -> ScalarField {
        let mut out = self.x.clone();
        out.zip_apply(&other.x, |a, b| a * b);
        let mut t = self.y.clone();
        t.zip_apply(&other.y, |a, b| a * b);
        out.zip_apply(&t, |a, b| a + b);
        let mut t = self.z.clone();
        t.zip_apply(&other.z, |a, b| a * b);
        out.zip_apply(&t, |a, b| a + b);
        out
    }
}

/// Neumaier's compensated sum: robust to cancellation across magnitudes.
pub fn neumaier_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new(16, 2.0).unwrap()
    }

    #[test]
    fn integrate_constant_is_volume() {
        let f = ScalarField::constant(grid(), 3.0);
        assert!((f.integrate() - 3.0 * 8.0).abs() < 1e-13);
    }

    #[test]
    fn integrate_single_mode_vanishes() {
        let g = grid();
        let two_pi = 2.0 * std::f64::consts::PI;
        let f = ScalarField::from_fn(g, |x, _, _| (two_pi * x / g.l).sin());
        // Exact quadrature for trigonometric polynomials below Nyquist.
        assert!(f.integrate().abs() < 1e-14);
    }

    #[test]
    fn product_of_distinct_modes_integrates_to_zero() {
        let g = grid();
        let two_pi = 2.0 * std::f64::consts::PI;
        let f = ScalarField::from_fn(g, |x, _, _| (two_pi * x / g.l).sin());
        let p = ScalarField::from_fn(g, |x, _, _| (2.0 * two_pi * x / g.l).sin());
        assert!(f.dot(&p).abs() < 1e-13);
        // Same mode: integral of sin^2 = L^3 / 2.
        assert!((f.dot(&f) - g.cell_volume() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn neumaier_handles_cancellation() {
        // Large head, small tail, then the negation of the head: the naive sum
        // would lose the tail entirely.
        let vals = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(neumaier_sum(&vals), 2.0);
    }

    #[test]
    fn norms_and_maps() {
        let g = grid();
        let mut f = ScalarField::constant(g, -2.0);
        assert_eq!(f.sup_norm(), 2.0);
        assert_eq!(f.min(), -2.0);
        f.apply(|v| v.abs());
        assert_eq!(f.min(), 2.0);
        let other = ScalarField::constant(g, 1.0);
        f.add_scaled(0.5, &other);
        assert_eq!(f.max(), 2.5);
        assert!((f.l2_norm() - 2.5 * g.cell_volume().sqrt()).abs() < 1e-12);
    }
}
