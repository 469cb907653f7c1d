//! Explicit finite-difference lattice for the G-heat equation
//! `∂_t u + G(∂²_x u) = 0` and the one-step conditional G-expectation.
//!
//! Spatial nodes are uniform with spacing `Δx` and shared by every time layer.
//! One backward step is
//!
//! ```text
//! u_k(i) = u_{k+1}(i) + Δt · G((u_{k+1}(i+1) − 2u_{k+1}(i) + u_{k+1}(i−1)) / Δx²)
//! ```
//!
//! which, written out, is the maximum over `σ² ∈ {σ̲², σ̄²}` of a trinomial
//! expectation with weights `σ²Δt/(2Δx²)`, `1 − σ²Δt/Δx²`, `σ²Δt/(2Δx²)`. Under
//! `σ̄²Δt/Δx² ≤ 1/2` all weights are non-negative, so the step is itself a
//! sublinear expectation. Boundary nodes use a zero second difference (linear
//! extrapolation) and therefore keep their value.

use std::io::Write;

use crate::error::{config, Error, Result};
use crate::gcore::{TimeGrid, VolatilityBand};

/// Upper bound on `σ̄²Δt/Δx²`.
pub const STABILITY_LIMIT: f64 = 0.5;

const RATIO_SLOP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeConfig {
    pub horizon: f64,
    pub steps: usize,
    /// Spatial value at the root node.
    pub center: f64,
    /// Target `σ̄²Δt/Δx²` when `dx` is not given.
    pub courant: f64,
    /// Half-width of the spatial domain in units of `σ̄√T`, added to `|center|`.
    pub width_sigmas: f64,
    pub dx: Option<f64>,
}

impl LatticeConfig {
    pub fn new(horizon: f64, steps: usize) -> Self {
        Self {
            horizon,
            steps,
            center: 0.0,
            courant: STABILITY_LIMIT,
            width_sigmas: 6.0,
            dx: None,
        }
    }

    pub fn with_center(mut self, center: f64) -> Self {
        self.center = center;
        self
    }

    pub fn with_dx(mut self, dx: f64) -> Self {
        self.dx = Some(dx);
        self
    }

    pub fn with_width(mut self, width_sigmas: f64) -> Self {
        self.width_sigmas = width_sigmas;
        self
    }
}

/// `σ̄²Δt/Δx²`.
pub fn stability_ratio(band: &VolatilityBand, dt: f64, dx: f64) -> f64 {
    band.var_hi() * dt / (dx * dx)
}

pub(crate) fn check_stability(band: &VolatilityBand, dt: f64, dx: f64) -> Result<()> {
    let ratio = stability_ratio(band, dt, dx);
    if !(ratio <= STABILITY_LIMIT * (1.0 + RATIO_SLOP)) {
        return Err(Error::Stability {
            ratio,
            limit: STABILITY_LIMIT,
        });
    }
    Ok(())
}

/// Time grid plus spatial nodes of a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGeometry {
    grid: TimeGrid,
    nodes: Vec<f64>,
    dx: f64,
    root: usize,
}

impl LatticeGeometry {
    pub fn new(band: &VolatilityBand, cfg: &LatticeConfig) -> Result<Self> {
        if cfg.steps == 0 {
            return config("lattice needs at least one time step");
        }
        if !(cfg.courant > 0.0) || !(cfg.width_sigmas > 0.0) {
            return config("courant number and width must be positive");
        }
        let grid = TimeGrid::uniform(cfg.horizon, cfg.steps)?;
        let dt = grid.dt(0);
        let dx = match cfg.dx {
            Some(dx) if dx > 0.0 && dx.is_finite() => dx,
            Some(dx) => return config(format!("lattice spacing must be positive, got {dx}")),
            None => band.sigma_hi() * (dt / cfg.courant).sqrt(),
        };
        check_stability(band, dt, dx)?;
        let half_width = cfg.center.abs() + cfg.width_sigmas * band.sigma_hi() * cfg.horizon.sqrt();
        let m = ((half_width / dx).ceil() as usize).max(1);
        let nodes = (0..=2 * m).map(|i| cfg.center + (i as f64 - m as f64) * dx).collect();
        Ok(Self {
            grid,
            nodes,
            dx,
            root: m,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        self.grid.times()
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt(0)
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Index of the node holding the lattice center.
    pub fn root(&self) -> usize {
        self.root
    }

    /// A field that is `f(t_k, x_i)` on every node.
    pub fn tabulate(&self, f: impl Fn(f64, f64) -> f64) -> NodeField {
        let layers = self
            .times()
            .iter()
            .map(|&t| self.nodes.iter().map(|&x| f(t, x)).collect())
            .collect();
        NodeField { layers }
    }

    pub fn zeros(&self) -> NodeField {
        NodeField {
            layers: vec![vec![0.0; self.n_nodes()]; self.steps() + 1],
        }
    }
}

/// Per-node values for every time layer, indexed `[k][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeField {
    pub layers: Vec<Vec<f64>>,
}

impl NodeField {
    pub fn sup_abs(&self) -> f64 {
        self.layers.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max (self − other)` over all nodes.
    pub fn max_excess_over(&self, other: &NodeField) -> f64 {
        self.layers
            .iter()
            .flatten()
            .zip(other.layers.iter().flatten())
            .fold(f64::NEG_INFINITY, |m, (a, b)| m.max(a - b))
    }

    /// `sup |self − other|`.
    pub fn sup_distance(&self, other: &NodeField) -> f64 {
        self.layers
            .iter()
            .flatten()
            .zip(other.layers.iter().flatten())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn same_shape(&self, other: &NodeField) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.len() == b.len())
    }
}

/// Centered second difference, zero on the two boundary nodes.
pub fn second_difference(layer: &[f64], dx: f64) -> Vec<f64> {
    let n = layer.len();
    let inv = 1.0 / (dx * dx);
    (0..n)
        .map(|i| {
            if i == 0 || i + 1 == n {
                0.0
            } else {
                (layer[i + 1] - 2.0 * layer[i] + layer[i - 1]) * inv
            }
        })
        .collect()
}

/// One backward explicit step of the G-heat equation: the conditional
/// sublinear expectation over one time step.
pub fn conditional_expectation_step(next: &[f64], band: &VolatilityBand, dt: f64, dx: f64) -> Result<Vec<f64>> {
    if next.len() < 3 {
        return config("lattice layer needs at least 3 nodes");
    }
    check_stability(band, dt, dx)?;
    Ok(step_unchecked(next, band, dt, dx))
}

pub(crate) fn step_unchecked(next: &[f64], band: &VolatilityBand, dt: f64, dx: f64) -> Vec<f64> {
    second_difference(next, dx)
        .into_iter()
        .zip(next)
        .map(|(d2, v)| v + dt * band.g(d2))
        .collect()
}

/// A solved G-heat lattice.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub geometry: LatticeGeometry,
    pub band: VolatilityBand,
    pub values: NodeField,
}

impl Lattice {
    /// `u` at the root node of layer 0.
    pub fn root_value(&self) -> f64 {
        self.values.layers[0][self.geometry.root()]
    }

    /// Columns `t,x,value`, one row per node and layer.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,value")?;
        for (k, layer) in self.values.layers.iter().enumerate() {
            let t = self.geometry.times()[k];
            for (x, v) in self.geometry.nodes().iter().zip(layer) {
                writeln!(out, "{t},{x},{v}")?;
            }
        }
        Ok(())
    }
}

/// Solves `∂_t u + G(u_xx) = 0` backward from `u(T, x) = φ(x)`.
///
/// `values.layers[k]` approximates `Ê[φ(x + B_T − B_{t_k})]`, so layer 0 at the
/// root is `Ê[φ(x₀ + B_T)]`.
pub fn solve_gheat(phi: impl Fn(f64) -> f64, band: &VolatilityBand, cfg: &LatticeConfig) -> Result<Lattice> {
    let geometry = LatticeGeometry::new(band, cfg)?;
    let n = geometry.steps();
    let (dt, dx) = (geometry.dt(), geometry.dx());
    let mut layers = vec![Vec::new(); n + 1];
    layers[n] = geometry.nodes().iter().map(|&x| phi(x)).collect();
    if let Some(i) = layers[n].iter().position(|v: &f64| !v.is_finite()) {
        return Err(Error::NonFinite {
            step: n,
            what: format!("terminal value at x = {}", geometry.nodes()[i]),
        });
    }
    for k in (0..n).rev() {
        layers[k] = step_unchecked(&layers[k + 1], band, dt, dx);
    }
    Ok(Lattice {
        geometry,
        band: *band,
        values: NodeField { layers },
    })
}

/// G-expectation of the path functional `Σ_{k<len} c_k(B_{t_k})` started from
/// each node, by backward accumulation `W_k = c_k + Ê_k[W_{k+1}]`.
///
/// `terms[k]` holds `c_k` on the nodes; `terms.len()` may be anything up to
/// `steps + 1`. The returned field has `terms.len()` layers.
pub fn running_sum_expectation(geometry: &LatticeGeometry, band: &VolatilityBand, terms: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let len = terms.len();
    let mut w = vec![Vec::new(); len];
    if len == 0 {
        return w;
    }
    w[len - 1] = terms[len - 1].clone();
    for k in (0..len - 1).rev() {
        let e = step_unchecked(&w[k + 1], band, geometry.dt(), geometry.dx());
        w[k] = terms[k].iter().zip(e).map(|(c, v)| c + v).collect();
    }
    w
}

/// Largest `Σ_{k<len} c_k` along any lattice path, i.e. over the support of
/// every one-step law. Upper-bounds [`running_sum_expectation`].
pub fn pathwise_max_sum(terms: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let len = terms.len();
    let mut w = vec![Vec::new(); len];
    if len == 0 {
        return w;
    }
    w[len - 1] = terms[len - 1].clone();
    for k in (0..len - 1).rev() {
        let next = &w[k + 1];
        let n = next.len();
        w[k] = (0..n)
            .map(|i| {
                let best = if i == 0 || i + 1 == n {
                    next[i]
                } else {
                    next[i - 1].max(next[i]).max(next[i + 1])
                };
                terms[k][i] + best
            })
            .collect();
    }
    w
}
