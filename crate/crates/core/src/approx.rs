//! Lipschitz minorants of continuous linear-growth coefficients by
//! inf-convolution, `f_n(x) = inf_y { f(y) + n|x − y| }`.
//!
//! For `n ≥ M` (the linear-growth constant of `f`) the sequence is well
//! defined, `n`-Lipschitz, nondecreasing in `n`, bounded above by `f` and
//! converges to `f` along convergent sequences. The infimum is taken over a
//! finite candidate grid centered at the query point. Candidates farther than
//!
//! ```text
//! R(x) = (M(1+|x|) + f(x) + 1) / (n − M)
//! ```
//!
//! cannot beat `y = x`, because `f(y) ≥ −M(1+|x|+|x−y|)`, so the truncation is
//! lossless up to the grid spacing. The grid minimum is then polished by a few
//! rounds of local zooming around the best candidate.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{config, Result};

pub type CoefficientFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Declared monotonicity of a coefficient in one argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monotonicity {
    Unknown,
    Nondecreasing,
    Nonincreasing,
}

/// A coefficient `f(t, x₁, …, x_m)` with its declared structure: linear-growth
/// constant `M`, optional Lipschitz constant in the state arguments, per
/// argument monotonicity and dependence.
#[derive(Clone)]
pub struct GrowthBoundedFunction {
    eval: CoefficientFn,
    arity: usize,
    growth: f64,
    lipschitz: Option<f64>,
    monotone: Vec<Monotonicity>,
    depends: Vec<bool>,
}

impl fmt::Debug for GrowthBoundedFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GrowthBoundedFunction")
            .field("arity", &self.arity)
            .field("growth", &self.growth)
            .field("lipschitz", &self.lipschitz)
            .field("monotone", &self.monotone)
            .field("depends", &self.depends)
            .finish()
    }
}

impl GrowthBoundedFunction {
    pub fn new(arity: usize, growth: f64, eval: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            eval: Arc::new(eval),
            arity,
            growth,
            lipschitz: None,
            monotone: vec![Monotonicity::Unknown; arity],
            depends: vec![true; arity],
        }
    }

    pub fn constant(arity: usize, value: f64) -> Self {
        Self::new(arity, value.abs(), move |_, _| value)
            .with_lipschitz(0.0)
            .with_depends(vec![false; arity])
    }

    pub fn zero(arity: usize) -> Self {
        Self::constant(arity, 0.0)
    }

    pub fn with_lipschitz(mut self, lipschitz: f64) -> Self {
        self.lipschitz = Some(lipschitz);
        self
    }

    pub fn with_monotone(mut self, arg: usize, m: Monotonicity) -> Self {
        self.monotone[arg] = m;
        self
    }

    pub fn nondecreasing_in(self, arg: usize) -> Self {
        self.with_monotone(arg, Monotonicity::Nondecreasing)
    }

    /// Declares which arguments the function reads; the others are ignored by
    /// the inf-convolution.
    pub fn with_depends(mut self, depends: Vec<bool>) -> Self {
        assert_eq!(depends.len(), self.arity);
        for (m, d) in self.monotone.iter_mut().zip(&depends) {
            if !d {
                *m = Monotonicity::Nondecreasing;
            }
        }
        self.depends = depends;
        self
    }

    /// Marks argument `arg` as unused.
    pub fn ignoring(mut self, arg: usize) -> Self {
        self.depends[arg] = false;
        self.monotone[arg] = Monotonicity::Nondecreasing;
        self
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        (self.eval)(t, x)
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn growth(&self) -> f64 {
        self.growth
    }

    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn monotone(&self, arg: usize) -> Monotonicity {
        self.monotone[arg]
    }

    pub fn depends_on(&self, arg: usize) -> bool {
        self.depends[arg]
    }

    /// Largest `|f(t,x)| − M(1+|x|)` over the given points; non-positive when
    /// the growth declaration holds there.
    pub fn growth_excess(&self, t: f64, points: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .map(|x| self.eval(t, x).abs() - self.growth * (1.0 + norm(x)))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest decrease of `f` along `+step` in argument `arg`; zero when the
    /// function is nondecreasing in that argument at the given points.
    pub fn monotone_violation(&self, t: f64, arg: usize, points: &[Vec<f64>], step: f64) -> f64 {
        monotone_violation_of(|x| self.eval(t, x), arg, points, step)
    }
}

fn monotone_violation_of(f: impl Fn(&[f64]) -> f64, arg: usize, points: &[Vec<f64>], step: f64) -> f64 {
    points
        .iter()
        .map(|x| {
            let mut up = x.clone();
            up[arg] += step;
            (f(x) - f(&up)).max(0.0)
        })
        .fold(0.0, f64::max)
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// How candidate points for the infimum are laid out.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrid {
    /// Grid cells per axis per side of the query: spacing is `R/divisions`.
    pub divisions: usize,
    /// Local refinement rounds after the coarse search.
    pub zoom_levels: usize,
    /// Cells per axis per side in each refinement round.
    pub zoom_divisions: usize,
    /// Cap on the search radius (also used when `n = M`).
    pub max_radius: f64,
    /// Explicit candidates, required above three convolved arguments.
    pub candidates: Option<Vec<Vec<f64>>>,
}

impl Default for CandidateGrid {
    fn default() -> Self {
        Self {
            divisions: 256,
            zoom_levels: 6,
            zoom_divisions: 16,
            max_radius: 1.0e3,
            candidates: None,
        }
    }
}

impl CandidateGrid {
    /// A cheaper layout for coefficients evaluated at many lattice nodes.
    pub fn coarse() -> Self {
        Self {
            divisions: 24,
            zoom_levels: 4,
            zoom_divisions: 6,
            ..Self::default()
        }
    }
}

/// `f_n` for a fixed level `n`.
#[derive(Debug, Clone)]
pub struct InfConvApprox {
    base: GrowthBoundedFunction,
    n: f64,
    grid: CandidateGrid,
    active: Vec<usize>,
}

impl InfConvApprox {
    pub fn new(base: GrowthBoundedFunction, n: f64, grid: CandidateGrid) -> Result<Self> {
        if !(n.is_finite()) || n < base.growth() {
            return config(format!(
                "inf-convolution level n = {n} must be >= growth constant M = {}",
                base.growth()
            ));
        }
        if grid.divisions == 0 {
            return config("candidate grid needs at least one division");
        }
        let active: Vec<usize> = (0..base.arity()).filter(|&j| base.depends_on(j)).collect();
        if active.len() > 3 && grid.candidates.is_none() && !base.lipschitz().is_some_and(|l| l <= n) {
            return config(format!(
                "grid search is limited to 3 arguments ({} active); supply candidates",
                active.len()
            ));
        }
        Ok(Self { base, n, grid, active })
    }

    pub fn level(&self) -> f64 {
        self.n
    }

    pub fn base(&self) -> &GrowthBoundedFunction {
        &self.base
    }

    /// `true` when `f` is already declared `n`-Lipschitz, so `f_n = f`.
    pub fn is_identity(&self) -> bool {
        self.active.is_empty() || self.base.lipschitz().is_some_and(|l| l <= self.n)
    }

    /// Search radius around `x` before padding.
    pub fn radius(&self, t: f64, x: &[f64]) -> f64 {
        let m = self.base.growth();
        let gap = self.n - m;
        // ignored arguments cannot affect the growth bound
        let active_norm = self.active.iter().map(|&j| x[j] * x[j]).sum::<f64>().sqrt();
        let need = m * (1.0 + active_norm) + self.base.eval(t, x) + 1.0;
        if gap <= 1e-12 * self.n.max(1.0) {
            self.grid.max_radius
        } else {
            (need.max(0.0) / gap).min(self.grid.max_radius)
        }
    }

    /// `min_y f(t, y) + n|x − y|` over the candidate grid.
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        if self.is_identity() {
            return self.base.eval(t, x);
        }
        self.minimize(t, x).0
    }

    /// Minimizing candidate and its objective value.
    pub fn minimize(&self, t: f64, x: &[f64]) -> (f64, Vec<f64>) {
        let objective = |y: &[f64]| self.base.eval(t, y) + self.n * dist(x, y);
        let mut best = (objective(x), x.to_vec());
        if let Some(cands) = &self.grid.candidates {
            for c in cands {
                consider(&mut best, objective(c), c);
            }
            return best;
        }
        let r = self.radius(t, x);
        let h = r / self.grid.divisions as f64;
        if h > 0.0 {
            self.grid_pass(&objective, x, h, self.grid.divisions + 1, &mut best);
            let mut h = h;
            for _ in 0..self.grid.zoom_levels {
                h = 2.0 * h / self.grid.zoom_divisions as f64;
                let center = best.1.clone();
                self.grid_pass(&objective, &center, h, self.grid.zoom_divisions, &mut best);
            }
        }
        best
    }

    fn grid_pass(
        &self,
        objective: &(impl Fn(&[f64]) -> f64 + Sync),
        center: &[f64],
        h: f64,
        half: usize,
        best: &mut (f64, Vec<f64>),
    ) {
        let side = 2 * half + 1;
        let dims = self.active.len();
        let total = side.pow(dims as u32);
        let point = |mut idx: usize| {
            let mut y = center.to_vec();
            for &a in self.active.iter().rev() {
                let j = idx % side;
                idx /= side;
                y[a] = center[a] + (j as f64 - half as f64) * h;
            }
            y
        };
        // index order is lexicographic in the active coordinates; small grids
        // stay serial so that callers can parallelize across queries
        let found = if dims == 1 || total < 20_000 {
            let mut local: Option<(f64, Vec<f64>)> = None;
            for idx in 0..total {
                let y = point(idx);
                let v = objective(&y);
                match &mut local {
                    Some(b) => consider(b, v, &y),
                    None => local = Some((v, y)),
                }
            }
            local
        } else {
            (0..total)
                .into_par_iter()
                .map(|idx| {
                    let y = point(idx);
                    (objective(&y), y)
                })
                .reduce_with(|a, b| if better(b.0, &b.1, a.0, &a.1) { b } else { a })
        };
        if let Some((v, y)) = found {
            consider(best, v, &y);
        }
    }

    /// The approximation as a coefficient: `n`-Lipschitz, same growth,
    /// dependence and declared monotonicity as the base.
    pub fn as_function(&self) -> GrowthBoundedFunction {
        if self.is_identity() {
            return self.base.clone();
        }
        let me = self.clone();
        let mut g = GrowthBoundedFunction::new(self.base.arity(), self.base.growth(), move |t, x| me.eval(t, x))
            .with_lipschitz(self.n);
        g.monotone = self.base.monotone.clone();
        g.depends = self.base.depends.clone();
        g
    }
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn better(v: f64, y: &[f64], bv: f64, by: &[f64]) -> bool {
    v < bv || (v == bv && y.partial_cmp(by) == Some(std::cmp::Ordering::Less))
}

fn consider(best: &mut (f64, Vec<f64>), v: f64, y: &[f64]) {
    if better(v, y, best.0, &best.1) {
        *best = (v, y.to_vec());
    }
}

/// Convenience wrapper: `f_n(x)` at time `t`.
pub fn inf_convolve(approx: &InfConvApprox, t: f64, x: &[f64]) -> f64 {
    approx.eval(t, x)
}

/// Largest difference quotient `|f_n(x) − f_n(x')| / |x − x'|` over the pairs.
pub fn lipschitz_audit(approx: &InfConvApprox, t: f64, pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    pairs
        .iter()
        .filter(|(a, b)| dist(a, b) > 0.0)
        .map(|(a, b)| (approx.eval(t, a) - approx.eval(t, b)).abs() / dist(a, b))
        .fold(0.0, f64::max)
}

/// Level schedule `max(⌈M⌉, 2) · 2^j`, `j = 0..count`.
pub fn level_schedule(growth: f64, count: usize) -> Vec<f64> {
    let first = growth.ceil().max(2.0);
    (0..count).map(|j| first * f64::powi(2.0, j as i32)).collect()
}

/// Values of `f_n` for several levels at several query points.
#[derive(Debug, Clone)]
pub struct LadderTable {
    pub levels: Vec<f64>,
    /// `values[level][query]`
    pub values: Vec<Vec<f64>>,
    /// `f` at each query.
    pub base: Vec<f64>,
}

impl LadderTable {
    /// Largest decrease between consecutive levels; zero for a monotone ladder.
    pub fn monotone_violation(&self) -> f64 {
        self.values
            .windows(2)
            .flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).max(0.0)))
            .fold(0.0, f64::max)
    }

    /// Largest `f_n − f` over all levels; non-positive when `f_n ≤ f`.
    pub fn excess_over_base(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|row| row.iter().zip(&self.base).map(|(a, b)| a - b))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max |f − f_top|` at the top level.
    pub fn top_gap(&self) -> f64 {
        self.values
            .last()
            .map(|row| {
                row.iter()
                    .zip(&self.base)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .unwrap_or(0.0)
    }
}

/// Evaluates the ladder `f_{n_1} ≤ f_{n_2} ≤ …` at the query points.
pub fn monotone_ladder(
    base: &GrowthBoundedFunction,
    levels: &[f64],
    t: f64,
    queries: &[Vec<f64>],
    grid: &CandidateGrid,
) -> Result<LadderTable> {
    let approxes = levels
        .iter()
        .map(|&n| InfConvApprox::new(base.clone(), n, grid.clone()))
        .collect::<Result<Vec<_>>>()?;
    let values = approxes
        .iter()
        .map(|a| queries.iter().map(|x| a.eval(t, x)).collect())
        .collect();
    Ok(LadderTable {
        levels: levels.to_vec(),
        values,
        base: queries.iter().map(|x| base.eval(t, x)).collect(),
    })
}

/// Growth, monotonicity-in-`n`, Lipschitz and convergence audits of a ladder.
#[derive(Debug, Clone)]
pub struct LadderAudit {
    /// Largest `|f_n(x)| − M(1+|x|)` over levels and points.
    pub growth_excess: f64,
    pub monotone_violation: f64,
    /// Largest `f_n − f`.
    pub excess_over_base: f64,
    /// Per level: certified Lipschitz ratio and its allowance `n + h·n`.
    pub lipschitz: Vec<(f64, f64)>,
    pub top_gap: f64,
}

impl LadderAudit {
    pub fn lipschitz_ok(&self) -> bool {
        self.lipschitz.iter().all(|(r, cap)| r <= cap)
    }
}

pub fn audit_ladder(
    base: &GrowthBoundedFunction,
    levels: &[f64],
    t: f64,
    points: &[Vec<f64>],
    pairs: &[(Vec<f64>, Vec<f64>)],
    grid: &CandidateGrid,
) -> Result<LadderAudit> {
    let table = monotone_ladder(base, levels, t, points, grid)?;
    let growth_excess = table
        .values
        .iter()
        .flat_map(|row| {
            row.iter()
                .zip(points)
                .map(|(v, x)| v.abs() - base.growth() * (1.0 + norm(x)))
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let mut lipschitz = Vec::with_capacity(levels.len());
    for &n in levels {
        let a = InfConvApprox::new(base.clone(), n, grid.clone())?;
        let spacing = pairs
            .iter()
            .map(|(x, _)| a.radius(t, x) / grid.divisions as f64)
            .fold(0.0, f64::max);
        lipschitz.push((lipschitz_audit(&a, t, pairs), n + spacing * n));
    }
    Ok(LadderAudit {
        growth_excess,
        monotone_violation: table.monotone_violation(),
        excess_over_base: table.excess_over_base(),
        lipschitz,
        top_gap: table.top_gap(),
    })
}

/// `max |f_n − f|` over `points` while doubling `n` and halving the spacing,
/// one entry per round: `(n, divisions, error)`.
pub fn refinement_study(
    base: &GrowthBoundedFunction,
    t: f64,
    points: &[Vec<f64>],
    start_level: f64,
    start: &CandidateGrid,
    rounds: usize,
) -> Result<Vec<(f64, usize, f64)>> {
    let mut out = Vec::with_capacity(rounds);
    let mut grid = start.clone();
    let mut n = start_level;
    for _ in 0..rounds {
        let a = InfConvApprox::new(base.clone(), n, grid.clone())?;
        let err = points
            .iter()
            .map(|x| (a.eval(t, x) - base.eval(t, x)).abs())
            .fold(0.0, f64::max);
        out.push((n, grid.divisions, err));
        n *= 2.0;
        grid.divisions *= 2;
    }
    Ok(out)
}

/// Largest decrease of `f_n` along argument `arg`; checks that declared
/// monotonicity of `f` carries over.
pub fn monotone_transfer_violation(approx: &InfConvApprox, t: f64, arg: usize, points: &[Vec<f64>], step: f64) -> f64 {
    monotone_violation_of(|x| approx.eval(t, x), arg, points, step)
}
