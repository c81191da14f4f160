//! JSON run configuration: schema, validation, and conversion into the
//! library's domain types. Unknown keys are rejected everywhere so typos in
//! hand-written configs fail loudly instead of silently using defaults.

use std::path::PathBuf;

use serde::Deserialize;

use tfw::experiments::{ExperimentOptions, Perturbation};
use tfw::ground_state::{InitGuess, SolverOptions};
use tfw::nuclei::{centered_lattice, jittered, NuclearConfig};
use tfw::site_energy::Flavor;
use tfw::{Grid, Result, TfwError};

/// Top-level run configuration.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    #[serde(default)]
    pub nuclei: NucleiConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    /// Where artifacts land; overridden by `--output`, defaulted from
    /// `TFW_OUTPUT_DIR` when absent.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Seed for every stochastic ingredient (jitter, randomized solver
    /// starts).
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Points per axis (even, at least 4).
    pub n: usize,
    /// Cell edge length.
    #[serde(rename = "L")]
    pub l: f64,
}

impl GridConfig {
    pub fn build(&self) -> Result<Grid> {
        Grid::new(self.n, self.l)
    }
}

/// The charge density: a uniform background, discrete smeared nuclei, or
/// both. Discrete positions come from an explicit list and/or a centered
/// cubic lattice, optionally jittered (seeded, wrapped into the cell).
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NucleiConfig {
    #[serde(default)]
    pub background: f64,
    /// Smearing radius of each discrete nucleus; required with coordinates.
    #[serde(default)]
    pub r0: Option<f64>,
    #[serde(default)]
    pub coords: Vec<[f64; 3]>,
    /// Nuclei per axis of a centered cubic lattice filling the cell.
    #[serde(default)]
    pub lattice: Option<usize>,
    /// Amplitude of the positional jitter applied to all coordinates.
    #[serde(default)]
    pub jitter: Option<f64>,
}

impl NucleiConfig {
    pub fn build(&self, grid: &Grid, seed: u64) -> Result<NuclearConfig> {
        let mut coords = self.coords.clone();
        if let Some(per_axis) = self.lattice {
            if per_axis == 0 {
                return Err(TfwError::BadConfig(
                    "lattice needs at least one nucleus per axis".into(),
                ));
            }
            coords.extend(centered_lattice(grid, per_axis));
        }
        if let Some(amplitude) = self.jitter {
            if !(amplitude >= 0.0 && amplitude.is_finite()) {
                return Err(TfwError::BadConfig(format!(
                    "jitter amplitude must be nonnegative, got {amplitude}"
                )));
            }
            coords = jittered(&coords, amplitude, seed, grid);
        }
        if coords.is_empty() {
            if self.background <= 0.0 {
                return Err(TfwError::BadConfig(
                    "no nuclei: provide coords, a lattice, or a positive background".into(),
                ));
            }
            return Ok(NuclearConfig::jellium(self.background));
        }
        let r0 = self.r0.ok_or_else(|| {
            TfwError::BadConfig("discrete nuclei need a smearing radius r0".into())
        })?;
        Ok(NuclearConfig::new(coords, r0, self.background))
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Residual tolerance of the ground-state iteration.
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub max_iter: Option<usize>,
    /// Starting point: "uniform" (default) or "random".
    #[serde(default)]
    pub init: Option<String>,
}

impl SolverConfig {
    pub fn build(&self, seed: u64) -> Result<SolverOptions> {
        let mut opts = SolverOptions { record_trace: false, ..SolverOptions::default() };
        if let Some(tol) = self.tol {
            opts.tol = tol;
        }
        if let Some(max_iter) = self.max_iter {
            opts.max_iter = max_iter;
        }
        match self.init.as_deref() {
            None | Some("uniform") => {}
            Some("random") => opts.init = InitGuess::RandomizedPositive { seed },
            Some(other) => {
                return Err(TfwError::BadConfig(format!(
                    "unknown solver init '{other}' (expected 'uniform' or 'random')"
                )));
            }
        }
        Ok(opts)
    }
}

/// Knobs of the individual subcommands. All optional; each subcommand reads
/// the ones it understands and documents its defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Guard against running a config under the wrong subcommand; checked
    /// when present.
    #[serde(default)]
    pub name: Option<String>,
    /// Index of the nucleus a displacement perturbation moves; defaults to
    /// the one nearest the cell center.
    #[serde(default)]
    pub displace_index: Option<usize>,
    /// Displacement offset; selects the displaced-nucleus perturbation.
    #[serde(default)]
    pub displace_offset: Option<[f64; 3]>,
    /// Impurity charge; selects the added-charge perturbation.
    #[serde(default)]
    pub impurity_z: Option<f64>,
    /// Impurity position; defaults to the cell center.
    #[serde(default)]
    pub impurity_center: Option<[f64; 3]>,
    /// Deletion radii (tdl) or nested ball radii (neutrality).
    #[serde(default)]
    pub radii: Option<Vec<f64>>,
    /// Radius of the observation ball errors are measured over (tdl).
    #[serde(default)]
    pub observation_radius: Option<f64>,
    /// Fit window override `[r_min, r_max]`.
    #[serde(default)]
    pub fit_window: Option<[f64; 2]>,
    /// Magnitude floor override for fits.
    #[serde(default)]
    pub floor: Option<f64>,
    /// Shell width override for radial curves.
    #[serde(default)]
    pub shell_width: Option<f64>,
    /// Energy-density flavor for site energies and forces: "E1" or "E2".
    #[serde(default)]
    pub flavor: Option<String>,
    /// Width parameter of the partition kernel.
    #[serde(default)]
    pub gamma_tilde: Option<f64>,
    /// Nucleus moved by forces / linearise; defaults to the center-most one.
    #[serde(default)]
    pub moved: Option<usize>,
    /// Direction of the motion for forces / linearise.
    #[serde(default)]
    pub direction: Option<[f64; 3]>,
    /// Central-difference displacement for forces.
    #[serde(default)]
    pub cd_step: Option<f64>,
    /// Difference-quotient steps for the linearise consistency table.
    #[serde(default)]
    pub fd_steps: Option<Vec<f64>>,
}

impl ExperimentConfig {
    /// Reject configs whose declared experiment name does not match the
    /// subcommand actually being run.
    pub fn check_name(&self, subcommand: &str) -> Result<()> {
        match self.name.as_deref() {
            Some(name) if name != subcommand => Err(TfwError::BadConfig(format!(
                "config declares experiment '{name}' but the '{subcommand}' subcommand is running"
            ))),
            _ => Ok(()),
        }
    }

    /// Fit and solver knobs bundled for the experiment harnesses.
    pub fn options(&self, solver: SolverOptions) -> ExperimentOptions {
        let mut opts = ExperimentOptions { solver, ..ExperimentOptions::default() };
        if let Some(width) = self.shell_width {
            opts.shell_width = Some(width);
        }
        if let Some(floor) = self.floor {
            opts.floor = floor;
        }
        if let Some(window) = self.fit_window {
            opts.fit_window = Some(window);
        }
        opts
    }

    /// The configured perturbation. Displacement of the center-most nucleus
    /// by 0.3 along x when nothing is specified.
    pub fn perturbation(&self, grid: &Grid, nuclei: &NuclearConfig) -> Result<Perturbation> {
        if self.displace_offset.is_some() && self.impurity_z.is_some() {
            return Err(TfwError::BadConfig(
                "displace_offset and impurity_z are mutually exclusive".into(),
            ));
        }
        if let Some(z) = self.impurity_z {
            let center = self
                .impurity_center
                .unwrap_or([grid.l / 2.0, grid.l / 2.0, grid.l / 2.0]);
            return Ok(Perturbation::AddCharge { center, z });
        }
        let index = match self.displace_index {
            Some(index) => index,
            None => nuclei.center_most(grid).ok_or(TfwError::EmptyConfiguration)?,
        };
        let offset = self.displace_offset.unwrap_or([0.3, 0.0, 0.0]);
        Ok(Perturbation::Displace { index, offset })
    }

    pub fn flavor(&self) -> Result<Flavor> {
        match self.flavor.as_deref() {
            None | Some("E1") => Ok(Flavor::E1),
            Some("E2") => Ok(Flavor::E2),
            Some(other) => Err(TfwError::BadConfig(format!(
                "unknown energy-density flavor '{other}' (expected 'E1' or 'E2')"
            ))),
        }
    }

    /// The nucleus that forces / linearise move.
    pub fn moved_index(&self, grid: &Grid, nuclei: &NuclearConfig) -> Result<usize> {
        match self.moved {
            Some(index) if index < nuclei.coords.len() => Ok(index),
            Some(index) => Err(TfwError::BadConfig(format!(
                "moved index {index} out of range ({} nuclei)",
                nuclei.coords.len()
            ))),
            None => nuclei.center_most(grid).ok_or(TfwError::EmptyConfiguration),
        }
    }
}

/// Parse a config, rejecting unknown keys with an error naming them.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let err = parse_config(r#"{"grid": {"n": 16, "L": 4.0}, "grd": 1}"#).unwrap_err();
        assert!(err.to_string().contains("grd"), "{err}");
    }

    #[test]
    fn a_minimal_jellium_config_builds() {
        let cfg =
            parse_config(r#"{"grid": {"n": 16, "L": 4.0}, "nuclei": {"background": 1.0}}"#)
                .unwrap();
        let grid = cfg.grid.build().unwrap();
        let nuclei = cfg.nuclei.build(&grid, cfg.seed).unwrap();
        assert!(nuclei.coords.is_empty());
        assert_eq!(nuclei.background, 1.0);
    }

    #[test]
    fn lattice_and_explicit_coords_combine() {
        let cfg = parse_config(
            r#"{"grid": {"n": 16, "L": 4.0},
                "nuclei": {"r0": 0.5, "coords": [[1.0, 1.0, 1.0]], "lattice": 2}}"#,
        )
        .unwrap();
        let grid = cfg.grid.build().unwrap();
        let nuclei = cfg.nuclei.build(&grid, 0).unwrap();
        assert_eq!(nuclei.coords.len(), 1 + 8);
    }

    #[test]
    fn coords_without_r0_are_rejected() {
        let cfg = parse_config(
            r#"{"grid": {"n": 16, "L": 4.0}, "nuclei": {"coords": [[1.0, 1.0, 1.0]]}}"#,
        )
        .unwrap();
        let grid = cfg.grid.build().unwrap();
        assert!(cfg.nuclei.build(&grid, 0).is_err());
    }

    #[test]
    fn experiment_name_mismatch_is_rejected() {
        let cfg = parse_config(
            r#"{"grid": {"n": 16, "L": 4.0}, "experiment": {"name": "locality"}}"#,
        )
        .unwrap();
        assert!(cfg.experiment.check_name("locality").is_ok());
        assert!(cfg.experiment.check_name("screening").is_err());
    }
}
