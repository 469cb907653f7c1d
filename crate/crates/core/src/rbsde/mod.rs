//! Reflected G-BSDEs with a lower barrier.
//!
//! `Y_t = ξ + ∫f(s,X,Y,Z)ds + ∫g(s,X,Y,Z)d⟨B⟩ − ∫Z dB + (A_T − A_t)`,
//! `Y ≥ L`, with `A` increasing and `−∫(Y − L)dA` a non-increasing
//! G-martingale. The lattice backend reflects nodewise; the scenario backend
//! penalizes and is kept as a cross-check.

use std::fmt;
use std::sync::Arc;

use crate::approx::{GrowthBoundedFunction, Monotonicity};
use crate::error::{config, Result};

mod diagnostics;
mod lattice;
mod penalized;

pub use diagnostics::{
    a_bound_ratio, martingale_defect_lattice, martingale_defect_paths, shift_increments_late, DefectReport,
};
pub(crate) use lattice::driver_update;
pub use lattice::{envelope_pair, solve_bsde_lattice, solve_rbsde_lattice, Envelopes, LatticeSolution};
pub use penalized::{solve_rbsde_penalized, PathSolution, RegressionConfig};

pub type TerminalFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type BarrierFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Terminal condition `ξ(B_T, X_T)`.
#[derive(Clone)]
pub struct Terminal(TerminalFn);

impl Terminal {
    pub fn new(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    /// `ξ = φ(B_T)`.
    pub fn of_b(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(move |b, _| f(b))
    }

    pub fn eval(&self, b: f64, x: f64) -> f64 {
        (self.0)(b, x)
    }

    /// `Φ ∘ ξ`.
    pub fn compose(&self, phi: Arc<dyn Fn(f64) -> f64 + Send + Sync>) -> Self {
        let inner = self.0.clone();
        Self::new(move |b, x| phi(inner(b, x)))
    }
}

impl fmt::Debug for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Terminal(..)")
    }
}

/// Lower barrier `L(t, B_t, X_t)` with its declared upper bound `c`.
#[derive(Clone)]
pub struct Barrier {
    f: BarrierFn,
    cap: f64,
}

impl Barrier {
    pub fn new(cap: f64, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f), cap }
    }

    pub fn constant(level: f64) -> Self {
        Self::new(level, move |_, _, _| level)
    }

    /// A barrier so low that it never binds.
    pub fn inactive() -> Self {
        Self::constant(-1.0e9)
    }

    pub fn eval(&self, t: f64, b: f64, x: f64) -> f64 {
        (self.f)(t, b, x)
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }
}

impl fmt::Debug for Barrier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Barrier").field("cap", &self.cap).finish()
    }
}

/// What to do when `ξ < L_T` somewhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TerminalPolicy {
    /// Fail with [`crate::Error::TerminalBelowBarrier`].
    #[default]
    Reject,
    /// Use `max(ξ, L_T)` as terminal value.
    ProjectOntoBarrier,
}

/// Data of the backward equation. Drivers take `[x, y, z]`.
#[derive(Debug, Clone)]
pub struct BackwardSpec {
    pub terminal: Terminal,
    pub driver_f: GrowthBoundedFunction,
    pub driver_g: GrowthBoundedFunction,
    pub barrier: Barrier,
    pub terminal_policy: TerminalPolicy,
    /// Envelope growth constant.
    pub k: f64,
}

impl BackwardSpec {
    pub fn new(
        terminal: Terminal,
        driver_f: GrowthBoundedFunction,
        driver_g: GrowthBoundedFunction,
        barrier: Barrier,
        k: f64,
    ) -> Result<Self> {
        for (name, d) in [("f", &driver_f), ("g", &driver_g)] {
            if d.arity() != 3 {
                return config(format!("driver {name} takes (x, y, z)"));
            }
            if d.depends_on(0) && d.monotone(0) != Monotonicity::Nondecreasing {
                return config(format!("driver {name} must be declared nondecreasing in x"));
            }
        }
        if !(k >= 0.0) {
            return config("envelope constant K must be non-negative");
        }
        Ok(Self {
            terminal,
            driver_f,
            driver_g,
            barrier,
            terminal_policy: TerminalPolicy::default(),
            k,
        })
    }

    /// `g = 0`.
    pub fn with_driver(terminal: Terminal, driver_f: GrowthBoundedFunction, barrier: Barrier) -> Result<Self> {
        let k = driver_f.growth();
        Self::new(terminal, driver_f, GrowthBoundedFunction::zero(3), barrier, k)
    }

    pub fn with_policy(mut self, policy: TerminalPolicy) -> Self {
        self.terminal_policy = policy;
        self
    }

    pub(crate) fn drivers_lipschitz(&self) -> bool {
        [&self.driver_f, &self.driver_g]
            .iter()
            .all(|d| d.lipschitz().is_some_and(f64::is_finite))
    }

    /// Number of inner fixed-point passes for the implicit `y`.
    pub(crate) fn picard_passes(dt: f64) -> usize {
        if dt > 0.01 {
            2
        } else {
            1
        }
    }
}

/// Driver `±K(1 + |y| + |z|)` of the envelope equations.
pub fn envelope_driver(k: f64, sign: f64) -> GrowthBoundedFunction {
    GrowthBoundedFunction::new(3, k, move |_, v| sign * k * (1.0 + v[1].abs() + v[2].abs()))
        .with_lipschitz(k)
        .ignoring(0)
}
