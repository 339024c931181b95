//! Spin-1/2 particle under spatially distributed unselective spin measurement
//! with a position-dependent pointer basis `|±n(x)⟩`.
//!
//! The same dynamics is represented four ways and cross-checked:
//!
//! * [`lindblad`]: the full spinor density matrix on a periodic grid,
//!   propagated with an exact-substep Strang splitting;
//! * [`trajectories`]: pure-state unraveling with Poisson-timed global
//!   projective spin measurements;
//! * [`semiclassical`]: gradient-expanded Wigner transport on a phase-space grid;
//! * [`gauge`]: the strong-decoherence limit, charged particles in the emergent
//!   vector potential of the pointer basis.
//!
//! [`diagnostics`] turns run outputs into force-balance, spin-separation,
//! flux-source and diffusion checks; [`config`] and [`runner`] drive it all from
//! a configuration file.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod fields;
pub mod gauge;
pub mod grid;
pub mod lindblad;
pub mod observables;
pub mod output;
pub mod runner;
pub mod semiclassical;
pub mod trajectories;

pub use error::{Error, Result};
pub use fields::{build_axis_field, spin_geometry, AxisField, FieldKind, SpinGeometry, Vec3};
pub use grid::{Grid, Spectral};
pub use lindblad::{DensityMatrix, PauliFields};
