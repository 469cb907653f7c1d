//! Monotone iteration for the coupled reflected forward-backward system.
//!
//! Starting from the lower solution `Y⁰` of the envelope pair, the solver
//! alternates a reflected backward solve with the drift frozen at the
//! previous forward iterate and a forward solve driven by the new `Y`. With
//! `b, h` nondecreasing in `y` and `f, g` nondecreasing in `x`, both chains
//! increase and stay under the envelopes `S` and `U`. Everything runs on one
//! lattice, so `X` is a function of the node.

use std::io::Write;
use std::sync::Arc;

use crate::approx::{level_schedule, GrowthBoundedFunction, InfConvApprox};
use crate::error::{config, Error, Result};
use crate::fsde::{
    envelope_forward, lattice_forward_layer, lattice_initial_layer, solve_forward_monotone, ForwardSpec, LadderConfig,
    LadderReport, LatticeDomain,
};
use crate::gcore::VolatilityBand;
use crate::glattice::{running_sum_expectation, second_difference, LatticeGeometry, NodeField};
use crate::rbsde::{
    envelope_pair, solve_rbsde_lattice, BackwardSpec, Barrier, LatticeSolution, Terminal, TerminalPolicy,
};

/// Full coefficient set of the coupled system.
#[derive(Debug, Clone)]
pub struct CoupledProblem {
    pub forward: ForwardSpec,
    pub backward: BackwardSpec,
    /// Joint growth constant `M`.
    pub growth: f64,
    /// Envelope constant `K ≥ M`.
    pub k: f64,
}

impl CoupledProblem {
    pub fn new(forward: ForwardSpec, backward: BackwardSpec, growth: f64, k: f64) -> Result<Self> {
        if !(k >= growth) {
            return config(format!(
                "envelope constant K = {k} must be >= growth constant M = {growth}"
            ));
        }
        let coeffs = [
            ("b", &forward.b),
            ("h", &forward.h),
            ("f", &backward.driver_f),
            ("g", &backward.driver_g),
        ];
        if let Some((name, c)) = coeffs.iter().find(|(_, c)| c.growth() > growth) {
            return config(format!("{name} declares growth {} above M = {growth}", c.growth()));
        }
        let mut backward = backward;
        backward.k = k;
        Ok(Self {
            forward,
            backward,
            growth,
            k,
        })
    }
}

/// Settings of the outer iteration.
#[derive(Debug, Clone)]
pub struct IterationConfig {
    pub tol: f64,
    pub max_outer: usize,
    /// Inner ladder; its tolerance is used as given.
    pub ladder: LadderConfig,
    /// Multiplier in the slack `c·Δt·(1 + scale)`.
    pub slack_factor: f64,
}

impl IterationConfig {
    pub fn new(tol: f64, max_outer: usize) -> Self {
        Self {
            tol,
            max_outer,
            ladder: LadderConfig {
                tol: tol / 10.0,
                ..LadderConfig::default()
            },
            slack_factor: 10.0,
        }
    }
}

/// Diagnostics of one outer iteration `n`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationRecord {
    pub n: usize,
    pub delta_x: f64,
    pub delta_y: f64,
    /// `max (X^{n−1} − X^n)⁺`.
    pub mono_x: f64,
    /// `max (Y^{n−1} − Y^n)⁺`.
    pub mono_y: f64,
    /// `min (S − X^n)`.
    pub margin_s: f64,
    /// `min (U − Y^n)`.
    pub margin_u: f64,
    /// `min (Y^n − L)`.
    pub floor_gap: f64,
    pub defect: f64,
    /// `Ê[Σ_k |Z^n_k|²Δt]`.
    pub z_norm: f64,
    pub backward_levels: usize,
    pub forward_levels: usize,
}

#[derive(Debug, Clone, Default)]
pub struct IterationReport {
    pub records: Vec<IterationRecord>,
    pub slack: f64,
    pub converged: bool,
    /// Smallest `n ≥ 1` whose successor moved less than `tol`.
    pub converged_at: Option<usize>,
    /// `max (Y⁰ − U)` of the envelope pair.
    pub envelope_gap: f64,
    pub forward_start: LadderReport,
}

impl IterationReport {
    /// Regression guard: every Z-norm stays within `4×` the first one.
    pub fn z_norm_guard(&self) -> bool {
        match self.records.first() {
            None => true,
            Some(first) => self.records.iter().all(|r| r.z_norm <= 4.0 * first.z_norm + 1e-300),
        }
    }

    /// Key-value text.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "converged: {}", self.converged)?;
        match self.converged_at {
            Some(n) => writeln!(out, "converged_at: {n}")?,
            None => writeln!(out, "converged_at: none")?,
        }
        writeln!(out, "iterations: {}", self.records.len())?;
        writeln!(out, "slack: {:e}", self.slack)?;
        writeln!(out, "envelope_gap: {:e}", self.envelope_gap)?;
        writeln!(out, "z_norm_guard: {}", self.z_norm_guard())?;
        Ok(())
    }

    /// Columns `iteration,delta_x,delta_y,mono_x,mono_y,margin_s,margin_u,defect,z_norm`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "iteration,delta_x,delta_y,mono_x,mono_y,margin_s,margin_u,defect,z_norm"
        )?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.n, r.delta_x, r.delta_y, r.mono_x, r.mono_y, r.margin_s, r.margin_u, r.defect, r.z_norm
            )?;
        }
        Ok(())
    }
}

/// Last iterate `(X, Y, Z, A)` with the envelopes it was squeezed between.
#[derive(Debug, Clone)]
pub struct CoupledSolution {
    pub x: NodeField,
    /// `Y`, `Z`, `ΔA` and the state they were computed with.
    pub backward: LatticeSolution,
    pub s: NodeField,
    pub u: NodeField,
    pub y_lower: NodeField,
}

impl CoupledSolution {
    pub fn y0(&self) -> f64 {
        self.backward.y0()
    }

    pub fn x0(&self) -> f64 {
        self.x.layers[0][self.backward.geometry.root()]
    }
}

/// Reflected backward solve through the inf-convolution ladder of the
/// drivers; levels run until consecutive solutions agree within `cfg.tol`.
pub fn solve_rbsde_ladder(
    spec: &BackwardSpec,
    geometry: &LatticeGeometry,
    band: &VolatilityBand,
    x: Option<&NodeField>,
    cfg: &LadderConfig,
) -> Result<(LatticeSolution, LadderReport)> {
    let growth = spec.driver_f.growth().max(spec.driver_g.growth());
    let levels = level_schedule(growth, cfg.max_levels.max(1));
    let mut report = LadderReport::default();
    let mut prev: Option<LatticeSolution> = None;
    let lipschitz_at = |d: &GrowthBoundedFunction, n: f64| d.lipschitz().is_some_and(|l| l <= n);
    for &n in &levels {
        let f = InfConvApprox::new(spec.driver_f.clone(), n, cfg.grid.clone())?.as_function();
        let g = InfConvApprox::new(spec.driver_g.clone(), n, cfg.grid.clone())?.as_function();
        let level_spec = BackwardSpec {
            driver_f: f,
            driver_g: g,
            ..spec.clone()
        };
        let sol = solve_rbsde_lattice(&level_spec, geometry, band, x)?;
        report.levels.push(n);
        if prev.is_none() && lipschitz_at(&spec.driver_f, n) && lipschitz_at(&spec.driver_g, n) {
            report.converged = true;
            return Ok((sol, report));
        }
        if let Some(p) = &prev {
            let slack = cfg.slack_factor * geometry.dt() * (1.0 + sol.y.sup_abs());
            report.slack = slack;
            let violation = p.y.max_excess_over(&sol.y).max(0.0);
            let delta = p.y.sup_distance(&sol.y);
            report.violations.push(violation);
            report.deltas.push(delta);
            if violation > slack {
                return Err(Error::Monotonicity {
                    iteration: report.levels.len() - 1,
                    what: "backward ladder",
                    magnitude: violation,
                    slack,
                });
            }
            if delta < cfg.tol {
                report.converged = true;
                return Ok((sol, report));
            }
        }
        prev = Some(sol);
    }
    Ok((prev.expect("at least one level"), report))
}

/// `Ê[Σ_{k<N} |Z_k|²Δt]` from the root.
pub fn z_norm(sol: &LatticeSolution) -> f64 {
    let g = &sol.geometry;
    let dt = g.dt();
    let terms: Vec<Vec<f64>> = sol.z.layers[..g.steps()]
        .iter()
        .map(|l| l.iter().map(|z| z * z * dt).collect())
        .collect();
    running_sum_expectation(g, &sol.band, &terms)[0][g.root()]
}

/// Runs the monotone iteration on the lattice.
pub fn solve_rfbgsde(
    problem: &CoupledProblem,
    geometry: &LatticeGeometry,
    band: &VolatilityBand,
    cfg: &IterationConfig,
) -> Result<(CoupledSolution, IterationReport)> {
    if cfg.max_outer == 0 || !(cfg.tol > 0.0) {
        return config("need a positive tolerance and at least one outer iteration");
    }
    let bw = &problem.backward;
    let env = envelope_pair(
        problem.k,
        &bw.terminal,
        &bw.barrier,
        bw.terminal_policy,
        geometry,
        band,
        None,
    )?;
    let mut report = IterationReport {
        envelope_gap: env.worst_gap,
        ..Default::default()
    };
    let y_lower = env.lower.y.clone();
    let u = env.upper.y.clone();
    let (mut x, forward_start) = solve_forward_monotone(
        &problem.forward,
        &LatticeDomain {
            geometry,
            band,
            y: Some(&y_lower),
        },
        &cfg.ladder,
    )?;
    report.forward_start = forward_start;
    let s = envelope_forward(
        problem.forward.x0,
        problem.k,
        &problem.forward.sigma,
        &LatticeDomain {
            geometry,
            band,
            y: Some(&u),
        },
    )?;
    let dt = geometry.dt();
    let mut y_prev = y_lower.clone();
    let mut last: Option<LatticeSolution> = None;
    for n in 1..=cfg.max_outer {
        let (backward, bl) = solve_rbsde_ladder(bw, geometry, band, Some(&x), &cfg.ladder)?;
        let (x_new, fl) = solve_forward_monotone(
            &problem.forward,
            &LatticeDomain {
                geometry,
                band,
                y: Some(&backward.y),
            },
            &cfg.ladder,
        )?;
        let scale = 1.0
            + x_new
                .sup_abs()
                .max(backward.y.sup_abs())
                .max(s.sup_abs())
                .max(u.sup_abs());
        let slack = cfg.slack_factor * dt * scale;
        report.slack = slack;
        let rec = IterationRecord {
            n,
            delta_x: x.sup_distance(&x_new),
            delta_y: y_prev.sup_distance(&backward.y),
            mono_x: x.max_excess_over(&x_new).max(0.0),
            mono_y: y_prev.max_excess_over(&backward.y).max(0.0),
            margin_s: -x_new.max_excess_over(&s),
            margin_u: -backward.y.max_excess_over(&u),
            floor_gap: -backward.barrier.max_excess_over(&backward.y),
            defect: backward.defect.defect,
            z_norm: z_norm(&backward),
            backward_levels: bl.levels.len(),
            forward_levels: fl.levels.len(),
        };
        for (what, v) in [("forward chain", rec.mono_x), ("backward chain", rec.mono_y)] {
            if v > slack {
                return Err(Error::Monotonicity {
                    iteration: n,
                    what,
                    magnitude: v,
                    slack,
                });
            }
        }
        for (what, margin) in [
            ("forward envelope S", rec.margin_s),
            ("backward envelope U", rec.margin_u),
        ] {
            if -margin > slack {
                return Err(Error::EnvelopeBreach {
                    iteration: n,
                    what,
                    magnitude: -margin,
                    slack,
                });
            }
        }
        if rec.floor_gap < 0.0 {
            return Err(Error::EnvelopeBreach {
                iteration: n,
                what: "barrier",
                magnitude: -rec.floor_gap,
                slack: 0.0,
            });
        }
        let done = rec.delta_x.max(rec.delta_y) < cfg.tol;
        report.records.push(rec);
        x = x_new;
        y_prev = backward.y.clone();
        last = Some(backward);
        if done {
            report.converged = true;
            report.converged_at = Some((n - 1).max(1));
            break;
        }
    }
    let solution = CoupledSolution {
        x,
        backward: last.expect("at least one outer iteration"),
        s,
        u,
        y_lower,
    };
    Ok((solution, report))
}

/// Sup-norm residuals of the discrete equations recomputed from a solution.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ResidualReport {
    /// `sup |Y_k − ỹ_k(Y_{k+1}, X_k) − ΔA_k|`, terminal layer included.
    pub backward: f64,
    /// `Σ_k sup_i` of the same local residuals.
    pub backward_accumulated: f64,
    /// `sup |X_{k+1} − Φ_k(X_k, Y_k)|`, initial layer included.
    pub forward: f64,
    pub forward_accumulated: f64,
    /// `min (Y − L)`.
    pub floor_gap: f64,
    /// Largest `ΔA` at a node off the barrier.
    pub off_contact_increment: f64,
    pub defect: f64,
}

/// Replays one backward and one forward step at every layer and node.
pub fn residual_check(problem: &CoupledProblem, solution: &CoupledSolution) -> Result<ResidualReport> {
    let sol = &solution.backward;
    let geo = &sol.geometry;
    let band = &sol.band;
    let n = geo.steps();
    let (dt, dx) = (geo.dt(), geo.dx());
    let x = &solution.x;
    if x.layers.len() != n + 1 || !x.same_shape(&sol.y) {
        return Err(Error::GridMismatch("solution fields do not share a lattice".into()));
    }
    let spec = BackwardSpec {
        terminal_policy: problem.backward.terminal_policy,
        ..problem.backward.clone()
    };
    let nodes = geo.nodes();
    let mut rep = ResidualReport {
        floor_gap: -sol.barrier.max_excess_over(&sol.y),
        defect: sol.defect.defect,
        ..Default::default()
    };

    // terminal layer
    let mut local = 0.0f64;
    for (i, &b) in nodes.iter().enumerate() {
        let xi = spec.terminal.eval(b, x.layers[n][i]);
        let l = spec.barrier.eval(geo.times()[n], b, x.layers[n][i]);
        let target = match spec.terminal_policy {
            TerminalPolicy::ProjectOntoBarrier => xi.max(l),
            TerminalPolicy::Reject => xi,
        };
        local = local.max((sol.y.layers[n][i] - target).abs());
    }
    rep.backward = local;
    rep.backward_accumulated = local;
    let passes = BackwardSpec::picard_passes(dt);
    for k in (0..n).rev() {
        let next = &sol.y.layers[k + 1];
        let d2 = second_difference(next, dx);
        let t = geo.times()[k];
        let mut local = 0.0f64;
        for i in 0..nodes.len() {
            let z = sol.z.layers[k][i];
            let mut y = next[i] + dt * band.g(d2[i]);
            for _ in 0..passes {
                y = crate::rbsde::driver_update(&spec, band, t, dt, next[i], d2[i], x.layers[k][i], y, z);
            }
            let da = sol.da.layers[k][i];
            local = local.max((sol.y.layers[k][i] - y - da).abs());
            let l = spec.barrier.eval(t, nodes[i], x.layers[k][i]);
            if da > 0.0 {
                rep.off_contact_increment =
                    rep.off_contact_increment
                        .max(if sol.y.layers[k][i] > l { da } else { 0.0 });
            }
        }
        rep.backward = rep.backward.max(local);
        rep.backward_accumulated += local;
    }

    let fspec = &problem.forward;
    let init = lattice_initial_layer(fspec, geo);
    let mut local = init
        .iter()
        .zip(&x.layers[0])
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    rep.forward = local;
    rep.forward_accumulated = local;
    for k in 0..n {
        let next = lattice_forward_layer(fspec, geo, band, k, &x.layers[k], Some(&sol.y.layers[k]))?;
        local = next
            .iter()
            .zip(&x.layers[k + 1])
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        rep.forward = rep.forward.max(local);
        rep.forward_accumulated += local;
    }
    Ok(rep)
}

/// A bounded nondecreasing map applied to the terminal value.
#[derive(Clone)]
pub struct TerminalTransform {
    pub phi: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Declared `sup |Φ|`; `None` means unbounded.
    pub bound: Option<f64>,
}

impl std::fmt::Debug for TerminalTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TerminalTransform").field("bound", &self.bound).finish()
    }
}

impl TerminalTransform {
    pub fn new(bound: Option<f64>, phi: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            phi: Arc::new(phi),
            bound,
        }
    }

    pub fn clamp(lo: f64, hi: f64) -> Self {
        Self::new(Some(lo.abs().max(hi.abs())), move |v| v.clamp(lo, hi))
    }
}

/// Replaces `ξ` by `Φ(ξ)` after auditing `Φ` on the terminal layer of
/// `geometry` (with `x = B`): bounded by its declared bound, nondecreasing over
/// the range of `ξ`, and still above the terminal barrier.
pub fn apply_terminal_transform(
    problem: &CoupledProblem,
    transform: &TerminalTransform,
    geometry: &LatticeGeometry,
) -> Result<CoupledProblem> {
    let Some(bound) = transform.bound else {
        return config("terminal transform must declare a finite bound");
    };
    let bw = &problem.backward;
    let t = geometry.grid().horizon();
    let values: Vec<f64> = geometry.nodes().iter().map(|&b| bw.terminal.eval(b, b)).collect();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let sweep: Vec<f64> = (0..=1000).map(|i| lo + (hi - lo) * i as f64 / 1000.0).collect();
    let slack = 1e-12 * bound.max(1.0);
    for w in sweep.windows(2) {
        let (a, b) = ((transform.phi)(w[0]), (transform.phi)(w[1]));
        if a.abs() > bound + slack || b.abs() > bound + slack {
            return Err(Error::Audit(format!(
                "terminal transform exceeds its bound {bound} near {}",
                w[0]
            )));
        }
        if a > b + slack {
            return Err(Error::Audit(format!("terminal transform decreases near {}", w[0])));
        }
    }
    for (&b, v) in geometry.nodes().iter().zip(&values) {
        let phi = (transform.phi)(*v);
        let l = bw.barrier.eval(t, b, b);
        if phi < l {
            return Err(Error::TerminalBelowBarrier {
                state: b,
                terminal: phi,
                barrier: l,
            });
        }
    }
    let mut out = problem.clone();
    out.backward.terminal = bw.terminal.compose(transform.phi.clone());
    Ok(out)
}

/// The shipped test problems.
pub mod problems {
    use super::*;

    fn sigma_one() -> GrowthBoundedFunction {
        GrowthBoundedFunction::constant(1, 1.0)
    }

    fn terminal_b() -> Terminal {
        Terminal::of_b(|b| b)
    }

    /// `b = 0.2 tanh(y)`, `f = 0.2 tanh(x) − 0.1 y`, `σ = 1`, `ξ = B_T`,
    /// `L ≡ −1`, `M = K = 0.2`.
    pub fn coupled_tanh() -> CoupledProblem {
        let b = GrowthBoundedFunction::new(2, 0.2, |_, v| 0.2 * v[1].tanh())
            .with_lipschitz(0.2)
            .nondecreasing_in(1)
            .ignoring(0);
        let f = GrowthBoundedFunction::new(3, 0.2, |_, v| 0.2 * v[0].tanh() - 0.1 * v[1])
            .with_lipschitz(0.2)
            .nondecreasing_in(0)
            .ignoring(2);
        build(b, f, 0.2)
    }

    /// `b = 0.3 atan(y) − 0.1 x`, `f = 0.3 atan(x) − 0.2 y + 0.1|z|`, `M = K = 0.5`.
    pub fn lipschitz_coupled() -> CoupledProblem {
        let b = GrowthBoundedFunction::new(2, 0.5, |_, v| 0.3 * v[1].atan() - 0.1 * v[0])
            .with_lipschitz(0.3)
            .nondecreasing_in(1);
        let f = GrowthBoundedFunction::new(3, 0.5, |_, v| 0.3 * v[0].atan() - 0.2 * v[1] + 0.1 * v[2].abs())
            .with_lipschitz(0.3)
            .nondecreasing_in(0);
        build(b, f, 0.5)
    }

    /// `b = 0.1 − 0.1 x` and `f = 0.05 − 0.1 y`: no coupling in either direction.
    pub fn decoupled() -> CoupledProblem {
        let b = GrowthBoundedFunction::new(2, 0.1, |_, v| 0.1 - 0.1 * v[0])
            .with_lipschitz(0.1)
            .ignoring(1);
        let f = GrowthBoundedFunction::new(3, 0.1, |_, v| 0.05 - 0.1 * v[1])
            .with_lipschitz(0.1)
            .ignoring(0)
            .ignoring(2);
        build(b, f, 0.1)
    }

    fn build(b: GrowthBoundedFunction, f: GrowthBoundedFunction, m: f64) -> CoupledProblem {
        let forward = ForwardSpec::new(0.0, b, GrowthBoundedFunction::zero(2), sigma_one()).expect("valid forward");
        let backward = BackwardSpec::new(
            terminal_b(),
            f,
            GrowthBoundedFunction::zero(3),
            Barrier::constant(-1.0),
            m,
        )
        .expect("valid backward")
        .with_policy(TerminalPolicy::ProjectOntoBarrier);
        CoupledProblem::new(forward, backward, m, m).expect("valid problem")
    }

    /// Looks a shipped problem up by name.
    pub fn builtin(name: &str) -> Option<CoupledProblem> {
        match name {
            "coupled_tanh" => Some(coupled_tanh()),
            "lipschitz_coupled" => Some(lipschitz_coupled()),
            "decoupled" => Some(decoupled()),
            _ => None,
        }
    }

    pub const NAMES: [&str; 3] = ["coupled_tanh", "lipschitz_coupled", "decoupled"];
}
