use crate::error::{Result, TfwError};
use serde::{Deserialize, Serialize};

/// Uniform periodic grid on the cubic cell `[0, L)^3` with `n` points per axis.
///
/// Point `(i, j, k)` sits at `(i*h, j*h, k*h)` with `h = L/n`, and fields are
/// stored x-fastest: linear index `i + n*(j + n*k)`. `n` must be even so the
/// spectral operators have an unambiguous Nyquist plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n: usize,
    pub l: f64,
    pub h: f64,
}

impl Grid {
    pub fn new(n: usize, l: f64) -> Result<Self> {
        if n < 4 || n % 2 != 0 {
            return Err(TfwError::BadGridSize { n });
        }
        if !(l.is_finite() && l > 0.0) {
            return Err(TfwError::BadDomain { l });
        }
        Ok(Grid { n, l, h: l / n as f64 })
    }

    #[inline]
    pub fn num_points(&self) -> usize {
        self.n * self.n * self.n
    }

    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.l * self.l * self.l
    }

    /// Quadrature weight of one grid point.
    #[inline]
    pub fn dv(&self) -> f64 {
        self.h * self.h * self.h
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n * (j + self.n * k)
    }

    /// Inverse of [`Grid::idx`].
    #[inline]
    pub fn coords_of(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.n;
        let j = (idx / self.n) % self.n;
        let k = idx / (self.n * self.n);
        (i, j, k)
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [i as f64 * self.h, j as f64 * self.h, k as f64 * self.h]
    }

    /// Signed integer frequency for axis index `j`: `0, 1, .., n/2, -n/2+1, .., -1`.
    ///
    /// The Nyquist index `n/2` maps to `+n/2`; first-derivative multipliers
    /// must treat that plane specially (see the spectral operators).
    #[inline]
    pub fn freq(&self, j: usize) -> i64 {
        if j <= self.n / 2 {
            j as i64
        } else {
            j as i64 - self.n as i64
        }
    }

    /// Angular wavenumber `2*pi*freq/L` for axis index `j`.
    #[inline]
    pub fn wavenumber(&self, j: usize) -> f64 {
        2.0 * std::f64::consts::PI * self.freq(j) as f64 / self.l
    }

    /// Wrap a coordinate into `[0, L)`.
    #[inline]
    pub fn wrap_coord(&self, x: f64) -> f64 {
        let mut y = x % self.l;
        if y < 0.0 {
            y += self.l;
        }
        // `-1e-18 % l` rounds back to `l` exactly; fold that onto 0.
        if y >= self.l {
            y = 0.0;
        }
        y
    }

    #[inline]
    pub fn wrap_point(&self, p: [f64; 3]) -> [f64; 3] {
        [self.wrap_coord(p[0]), self.wrap_coord(p[1]), self.wrap_coord(p[2])]
    }

    /// Minimum-image displacement `a - b`, each component folded into `(-L/2, L/2]`.
    #[inline]
    pub fn min_image_delta(&self, a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
        let mut d = [0.0; 3];
        for ax in 0..3 {
            let mut t = (a[ax] - b[ax]) % self.l;
            if t > 0.5 * self.l {
                t -= self.l;
            } else if t <= -0.5 * self.l {
                t += self.l;
            }
            d[ax] = t;
        }
        d
    }

    /// Minimum-image Euclidean distance between two points of the torus.
    #[inline]
    pub fn min_distance(&self, a: [f64; 3], b: [f64; 3]) -> f64 {
        let d = self.min_image_delta(a, b);
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }

    /// Visit every grid point within minimum-image distance `radius` of `center`.
    ///
    /// The callback receives the linear index and the signed displacement
    /// `x - center` (minimum image). Each point is visited exactly once even
    /// when `2*radius` exceeds the cell.
    pub fn for_each_in_ball(
        &self,
        center: [f64; 3],
        radius: f64,
        mut f: impl FnMut(usize, [f64; 3], f64),
    ) {
        let n = self.n as i64;
        let r2 = radius * radius;
        // Integer window wide enough to cover the ball; clamped to one period.
        let span = ((radius / self.h).ceil() as i64 + 1).min(n / 2);
        let base = [
            (center[0] / self.h).round() as i64,
            (center[1] / self.h).round() as i64,
            (center[2] / self.h).round() as i64,
        ];
        let lo = |b: i64| b - span;
        let hi = |b: i64| if 2 * span + 1 >= n { b - span + n - 1 } else { b + span };
        for kz in lo(base[2])..=hi(base[2]) {
            let z = kz as f64 * self.h;
            let wz = kz.rem_euclid(n) as usize;
            for ky in lo(base[1])..=hi(base[1]) {
                let y = ky as f64 * self.h;
                let wy = ky.rem_euclid(n) as usize;
                for kx in lo(base[0])..=hi(base[0]) {
                    let x = kx as f64 * self.h;
                    let wx = kx.rem_euclid(n) as usize;
                    let d = self.min_image_delta([x, y, z], center);
                    let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    if d2 <= r2 {
                        f(self.idx(wx, wy, wz), d, d2.sqrt());
                    }
                }
            }
        }
    }
}
