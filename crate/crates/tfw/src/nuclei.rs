use crate::error::{Result, TfwError};
use crate::field::ScalarField;
use crate::grid::Grid;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Default radius of the smeared nuclear charge.
pub const DEFAULT_R0: f64 = 1.0;

/// Compactly supported C-infinity bump used to smear each unit nuclear charge:
/// `exp(-1 / (1 - (r/R0)^2))` for `r < R0`, zero outside. All derivatives
/// vanish at the support boundary, so the profile never introduces Gibbs
/// artifacts into the spectral operators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NucleusShape {
    pub r0: f64,
}

impl Default for NucleusShape {
    fn default() -> Self {
        NucleusShape { r0: DEFAULT_R0 }
    }
}

impl NucleusShape {
    /// Unnormalized profile value at distance `r` from the center.
    #[inline]
    pub fn profile(&self, r: f64) -> f64 {
        let s = r / self.r0;
        if s >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - s * s)).exp()
        }
    }

    /// Radial derivative of the unnormalized profile. Vanishes at the center,
    /// at the support boundary, and outside it.
    #[inline]
    pub fn profile_deriv(&self, r: f64) -> f64 {
        let s = r / self.r0;
        if s >= 1.0 {
            0.0
        } else {
            let g = 1.0 - s * s;
            (-1.0 / g).exp() * (-2.0 * s / (g * g)) / self.r0
        }
    }
}

/// A set of unit-charge nuclei plus an optional uniform neutralizing background.
#[derive(Debug, Clone, PartialEq)]
pub struct NuclearConfig {
    /// Nucleus positions, wrapped into `[0, L)^3` at assembly time.
    pub coords: Vec<[f64; 3]>,
    pub shape: NucleusShape,
    /// Uniform nonnegative density added everywhere (a jellium component).
    pub background: f64,
}

impl NuclearConfig {
    pub fn new(coords: Vec<[f64; 3]>, r0: f64, background: f64) -> Self {
        NuclearConfig { coords, shape: NucleusShape { r0 }, background }
    }

    /// Pure jellium: no nuclei, uniform density `m0`.
    pub fn jellium(m0: f64) -> Self {
        NuclearConfig { coords: Vec::new(), shape: NucleusShape::default(), background: m0 }
    }

    /// Copy with nucleus `k` displaced by `step * dir`, wrapped into the cell.
    pub fn perturbed(&self, k: usize, dir: [f64; 3], step: f64, grid: &Grid) -> NuclearConfig {
        let mut out = self.clone();
        let c = out.coords[k];
        out.coords[k] = grid.wrap_point([
            c[0] + step * dir[0],
            c[1] + step * dir[1],
            c[2] + step * dir[2],
        ]);
        out
    }

    /// Index of the nucleus closest to the cell center (useful as a default
    /// "which one do we poke" choice in experiments).
    pub fn center_most(&self, grid: &Grid) -> Option<usize> {
        let c = [grid.l / 2.0, grid.l / 2.0, grid.l / 2.0];
        (0..self.coords.len()).min_by(|&a, &b| {
            grid.min_distance(self.coords[a], c)
                .total_cmp(&grid.min_distance(self.coords[b], c))
        })
    }
}

/// Sample every nucleus onto the grid and add the background.
///
/// Each nucleus is renormalized against its own discrete quadrature, so each
/// carries exactly unit charge on this particular grid no matter how it sits
/// relative to the mesh. Nuclei are accumulated in a canonical coordinate
/// order, which makes the result bit-identical under permutations of the
/// input list.
pub fn assemble_density(grid: &Grid, config: &NuclearConfig) -> Result<ScalarField> {
    let r0 = config.shape.r0;
    if !(r0 > 0.0 && r0.is_finite()) {
        return Err(TfwError::BadConfig(format!("nucleus radius must be positive, got {r0}")));
    }
    if r0 >= grid.l / 2.0 {
        return Err(TfwError::ShapeTooWide { r0, half_l: grid.l / 2.0 });
    }
    if !(config.background >= 0.0 && config.background.is_finite()) {
        return Err(TfwError::BadConfig(format!(
            "background density must be nonnegative, got {}",
            config.background
        )));
    }
    for (i, c) in config.coords.iter().enumerate() {
        if !c.iter().all(|v| v.is_finite()) {
            return Err(TfwError::BadConfig(format!("nucleus {i} has non-finite coordinates")));
        }
    }

    let mut m = ScalarField::constant(*grid, config.background);

    // Canonical assembly order: sort by wrapped coordinates so that permuting
    // the input list cannot change a single floating-point operation.
    let wrapped: Vec<[f64; 3]> = config.coords.iter().map(|&c| grid.wrap_point(c)).collect();
    let mut order: Vec<usize> = (0..wrapped.len()).collect();
    order.sort_by(|&a, &b| {
        wrapped[a]
            .iter()
            .zip(wrapped[b].iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut samples: Vec<(usize, f64)> = Vec::new();
    for &ni in &order {
        let center = wrapped[ni];
        samples.clear();
        let mut q = 0.0f64;
        grid.for_each_in_ball(center, r0, |idx, _, r| {
            let s = config.shape.profile(r);
            if s > 0.0 {
                samples.push((idx, s));
                q += s;
            }
        });
        let charge = q * grid.dv();
        if charge <= 0.0 {
            return Err(TfwError::ShapeUnresolved { index: ni, r0, h: grid.h });
        }
        let scale = 1.0 / charge;
        for &(idx, s) in &samples {
            m.data[idx] += s * scale;
        }
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Declarative file format
// ---------------------------------------------------------------------------

fn default_r0() -> f64 {
    DEFAULT_R0
}

/// On-disk description of a grid plus nuclear configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NucleiFile {
    #[serde(rename = "L")]
    pub l: f64,
    pub n: usize,
    #[serde(default)]
    pub nuclei: Vec<[f64; 3]>,
    #[serde(rename = "R0", default = "default_r0")]
    pub r0: f64,
    #[serde(default)]
    pub background: f64,
}

impl NucleiFile {
    pub fn into_parts(self) -> Result<(Grid, NuclearConfig)> {
        let grid = Grid::new(self.n, self.l)?;
        Ok((grid, NuclearConfig::new(self.nuclei, self.r0, self.background)))
    }

    pub fn from_parts(grid: &Grid, config: &NuclearConfig) -> Self {
        NucleiFile {
            l: grid.l,
            n: grid.n,
            nuclei: config.coords.clone(),
            r0: config.shape.r0,
            background: config.background,
        }
    }
}

pub fn load_nuclei_file(path: &Path) -> Result<(Grid, NuclearConfig)> {
    let text = std::fs::read_to_string(path)?;
    let file: NucleiFile = serde_json::from_str(&text)?;
    file.into_parts()
}

pub fn save_nuclei_file(path: &Path, grid: &Grid, config: &NuclearConfig) -> Result<()> {
    let file = NucleiFile::from_parts(grid, config);
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Configuration generators: simple lattices plus optional jitter
// ---------------------------------------------------------------------------

/// `dims` sites per axis, spaced `spacing`, first site at `origin`.
pub fn cubic_lattice(dims: [usize; 3], spacing: f64, origin: [f64; 3]) -> Vec<[f64; 3]> {
    let mut coords = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for kz in 0..dims[2] {
        for ky in 0..dims[1] {
            for kx in 0..dims[0] {
                coords.push([
                    origin[0] + kx as f64 * spacing,
                    origin[1] + ky as f64 * spacing,
                    origin[2] + kz as f64 * spacing,
                ]);
            }
        }
    }
    coords
}

/// Lattice that fills the cell symmetrically: `dims` sites per axis with
/// spacing `L/dims`, centered in the cell.
pub fn centered_lattice(grid: &Grid, per_axis: usize) -> Vec<[f64; 3]> {
    let spacing = grid.l / per_axis as f64;
    let origin = [spacing / 2.0; 3];
    cubic_lattice([per_axis; 3], spacing, origin)
}

/// Displace every site by a seeded uniform jitter in `[-amplitude, amplitude]^3`.
pub fn jittered(coords: &[[f64; 3]], amplitude: f64, seed: u64, grid: &Grid) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords
        .iter()
        .map(|&c| {
            let d: [f64; 3] = [
                rng.gen_range(-amplitude..=amplitude),
                rng.gen_range(-amplitude..=amplitude),
                rng.gen_range(-amplitude..=amplitude),
            ];
            grid.wrap_point([c[0] + d[0], c[1] + d[1], c[2] + d[2]])
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Admissibility diagnostics
// ---------------------------------------------------------------------------

/// Options for the empirical density-regularity scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmissibilityOptions {
    pub num_centers: usize,
    /// Ball radii for the charge lower-bound table; defaults to a ladder up to L/2.
    pub radii: Vec<f64>,
    pub seed: u64,
}

impl Default for AdmissibilityOptions {
    fn default() -> Self {
        AdmissibilityOptions { num_centers: 64, radii: Vec::new(), seed: 0 }
    }
}

/// Empirical uniform-regularity numbers for a density.
///
/// `m_ball_l2_sup` estimates the largest local L2 mass `||m||_{L2(B_1(x))}`
/// over sampled centers; `omega` tabulates, per radius, the smallest charge
/// found in any sampled ball of that radius. Both are diagnostics: they
/// quantify how uniformly the charge fills the cell but carry no pass/fail
/// semantics of their own.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub m_ball_l2_sup: f64,
    /// (radius, min over sampled centers of the ball charge)
    pub omega: Vec<(f64, f64)>,
    pub num_centers: usize,
    pub seed: u64,
}

pub fn admissibility(
    grid: &Grid,
    m: &ScalarField,
    opts: &AdmissibilityOptions,
) -> AdmissibilityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let centers: Vec<[f64; 3]> = (0..opts.num_centers.max(1))
        .map(|_| {
            [
                rng.gen_range(0.0..grid.l),
                rng.gen_range(0.0..grid.l),
                rng.gen_range(0.0..grid.l),
            ]
        })
        .collect();
    let radii: Vec<f64> = if opts.radii.is_empty() {
        let steps = 6;
        (1..=steps)
            .map(|i| grid.l / 2.0 * i as f64 / steps as f64)
            .collect()
    } else {
        opts.radii.clone()
    };

    let mut l2_sup = 0.0f64;
    for &c in &centers {
        let mut sq = 0.0;
        grid.for_each_in_ball(c, 1.0_f64.min(grid.l / 2.0), |idx, _, _| {
            sq += m.data[idx] * m.data[idx];
        });
        l2_sup = l2_sup.max((sq * grid.dv()).sqrt());
    }

    let mut omega = Vec::with_capacity(radii.len());
    for &r in &radii {
        let mut min_charge = f64::INFINITY;
        for &c in &centers {
            let mut q = 0.0;
            grid.for_each_in_ball(c, r, |idx, _, _| q += m.data[idx]);
            min_charge = min_charge.min(q * grid.dv());
        }
        omega.push((r, min_charge));
    }

    AdmissibilityReport {
        m_ball_l2_sup: l2_sup,
        omega,
        num_centers: centers.len(),
        seed: opts.seed,
    }
}
