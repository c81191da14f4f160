//! Orbital-free density functional model on a periodic supercell.
//!
//! The energy of an electron amplitude `v` against a nonnegative charge
//! density `m` is
//!
//! ```text
//! E(v, m) = integral |grad v|^2 + integral v^{10/3}
//!         + 1/2 integral phi (m - v^2),   -Delta phi = 4 pi (m - v^2),
//! ```
//!
//! with the gradient and field constants scaled to one. The crate provides
//! the spectral toolbox on the torus, smeared nuclear densities, the
//! constrained ground-state solver, the exact tangent (linear-response)
//! solver, localized site energies and their derivatives, and the decay /
//! screening / thermodynamic-limit experiment harnesses built on top.

pub mod error;
pub mod experiments;
pub mod fft;
pub mod field;
pub mod grid;
pub mod ground_state;
pub mod io;
pub mod linear_response;
pub mod nuclei;
pub(crate) mod operator;
pub mod site_energy;

pub use error::{Result, TfwError};
pub use field::{ScalarField, VectorField};
pub use grid::Grid;
