//! Numerical toolkit for G-expectations and reflected forward-backward SDEs
//! driven by G-Brownian motion.
//!
//! The modules build on each other: [`gcore`] holds the volatility band,
//! time grids and finite sublinear expectations, [`glattice`] the explicit
//! G-heat lattice, [`gpaths`] scenario simulation of `B` and `⟨B⟩`,
//! [`approx`] the inf-convolution ladder, [`fsde`] and [`rbsde`] the forward
//! and reflected backward solvers, and [`rfbsde`] the coupled iteration.

// `!(a > b)` is used on purpose so that NaN inputs are rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod approx;
pub mod error;
pub mod fsde;
pub mod gcore;
pub mod glattice;
pub mod gpaths;
pub mod rbsde;
pub mod rfbsde;

pub use approx::{CandidateGrid, GrowthBoundedFunction, InfConvApprox, Monotonicity};
pub use error::{Category, Error, Result};
pub use fsde::{ForwardSpec, LadderConfig};
pub use gcore::{ProcessSamples, TimeGrid, VolatilityBand};
pub use glattice::{LatticeConfig, LatticeGeometry, NodeField};
pub use gpaths::{PathBundle, ScenarioControl};
pub use rbsde::{BackwardSpec, Barrier, Terminal, TerminalPolicy};
pub use rfbsde::{CoupledProblem, IterationConfig};
