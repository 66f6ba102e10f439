//! Numerical workbench for ergodic properties of finitely generated action
//! semigroups on the circle and the 2-torus.
//!
//! The crate is organized bottom-up:
//!
//! - [`phase`]: phase spaces, the parametric map menu, words and iterated
//!   function systems.
//! - [`grid`]: box partitions, grid measures and sets, Ulam matrices and the
//!   measure-theoretic functionals built on them.
//! - [`stationary`]: stationary measures of the averaged operator, ergodic
//!   component extraction and positivity on open sets.
//! - [`semigroup`]: word searches for minimality, strong transitivity and
//!   finite covers.
//! - [`skew`]: the step skew product over the Bernoulli shift, Birkhoff
//!   diagnostics and the robustness sweep.
//!
//! Words are always composed left to right: the first listed letter is
//! applied first. Measures are row vectors, so pushing a measure forward is
//! `mu * P`.

pub mod error;
pub mod grid;
pub mod phase;
pub mod semigroup;
pub mod skew;
pub mod stationary;

mod seeds;

pub use error::{Error, Result};
pub use grid::{BoxSet, Grid, GridMeasure, UlamMatrix, UlamMethod};
pub use phase::{Direction, IFSystem, Letter, MapFamily, PhaseSpace, Point, SmoothMap, Word};
pub use semigroup::{MinimalityMode, MinimalityParams, MinimalityReport, MinimalityVerdict};
pub use skew::{Cylinder, ErgodicityParams, ErgodicityReport, Observable, PipelineParams, SymbolStream, Verdict};
pub use stationary::{ComponentDecomposition, StationaryResult};

/// Fixed-point tolerance used when none is configured.
pub const DEFAULT_FIXED_POINT_TOL: f64 = 1e-8;

/// Mass below which a box is treated as outside the support of a measure.
pub const DEFAULT_SUPPORT_TOL: f64 = 1e-10;
