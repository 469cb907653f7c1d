//! Euler scheme for the forward G-SDE
//! `dX = b(t,X,Y)dt + h(t,X,Y)d⟨B⟩ + σ(t,X)dB` and the monotone ladder that
//! handles continuous, non-Lipschitz drifts.
//!
//! Two domains are supported. On simulated paths ([`PathDomain`]) the scheme
//! is the plain left-endpoint Euler rule per sample. On the lattice
//! ([`LatticeDomain`]) `X` is kept as a function of the node: every node is
//! fed by the Euler update from its lattice parents, weighted by the
//! `σ̄`-transition probabilities of the explicit scheme. This reproduces any
//! `X = φ(t, B_t)` exactly and is monotone in the drift, which is what the
//! comparison arguments of the iteration need.

use rayon::prelude::*;

use crate::approx::{level_schedule, CandidateGrid, GrowthBoundedFunction, InfConvApprox, Monotonicity};
use crate::error::{config, Error, Result};
use crate::gcore::{ProcessSamples, VolatilityBand};
use crate::glattice::{stability_ratio, LatticeGeometry, NodeField};
use crate::gpaths::PathBundle;

/// Coefficients of the forward equation. `b` and `h` take `[x, y]`,
/// `sigma` takes `[x]`.
#[derive(Debug, Clone)]
pub struct ForwardSpec {
    pub x0: f64,
    pub b: GrowthBoundedFunction,
    pub h: GrowthBoundedFunction,
    pub sigma: GrowthBoundedFunction,
}

impl ForwardSpec {
    pub fn new(
        x0: f64,
        b: GrowthBoundedFunction,
        h: GrowthBoundedFunction,
        sigma: GrowthBoundedFunction,
    ) -> Result<Self> {
        if b.arity() != 2 || h.arity() != 2 || sigma.arity() != 1 {
            return config("forward coefficients take (x, y) for b, h and (x) for sigma");
        }
        match sigma.lipschitz() {
            Some(l) if l.is_finite() => {}
            _ => return config("sigma must declare a finite Lipschitz constant"),
        }
        for (name, c) in [("b", &b), ("h", &h)] {
            if c.depends_on(1) && c.monotone(1) != Monotonicity::Nondecreasing {
                return config(format!("{name} must be declared nondecreasing in y"));
            }
        }
        Ok(Self { x0, b, h, sigma })
    }

    /// `b` only, with `h = 0` and constant `σ`.
    pub fn with_drift(x0: f64, b: GrowthBoundedFunction, sigma: f64) -> Result<Self> {
        Self::new(
            x0,
            b,
            GrowthBoundedFunction::zero(2),
            GrowthBoundedFunction::constant(1, sigma),
        )
    }

    fn needs_y(&self) -> bool {
        self.b.depends_on(1) || self.h.depends_on(1)
    }

    /// Joint growth constant of the coefficients.
    pub fn growth(&self) -> f64 {
        self.b.growth().max(self.h.growth()).max(self.sigma.growth())
    }
}

/// Where a forward solve lives: values of `X` plus the driving `Y`.
pub trait ForwardDomain {
    type Field: Clone;

    fn solve(&self, spec: &ForwardSpec) -> Result<Self::Field>;
    fn sup_distance(a: &Self::Field, b: &Self::Field) -> f64;
    /// `max (a − b)`.
    fn max_excess(a: &Self::Field, b: &Self::Field) -> f64;
    fn sup_abs(a: &Self::Field) -> f64;
    fn dt(&self) -> f64;
}

/// Simulated paths with an optional driving process `Y[scenario][sample][k]`.
pub struct PathDomain<'a> {
    pub bundle: &'a PathBundle,
    pub y: Option<&'a ProcessSamples>,
}

impl ForwardDomain for PathDomain<'_> {
    type Field = ProcessSamples;

    fn solve(&self, spec: &ForwardSpec) -> Result<ProcessSamples> {
        euler_forward(spec, self.bundle, self.y)
    }

    fn sup_distance(a: &ProcessSamples, b: &ProcessSamples) -> f64 {
        a.scenarios
            .iter()
            .flatten()
            .flatten()
            .zip(b.scenarios.iter().flatten().flatten())
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    fn max_excess(a: &ProcessSamples, b: &ProcessSamples) -> f64 {
        a.scenarios
            .iter()
            .flatten()
            .flatten()
            .zip(b.scenarios.iter().flatten().flatten())
            .fold(f64::NEG_INFINITY, |m, (x, y)| m.max(x - y))
    }

    fn sup_abs(a: &ProcessSamples) -> f64 {
        a.sup_abs()
    }

    fn dt(&self) -> f64 {
        self.bundle.grid.max_dt()
    }
}

/// Lattice nodes with an optional driving node field `Y[k][i]`.
pub struct LatticeDomain<'a> {
    pub geometry: &'a LatticeGeometry,
    pub band: &'a VolatilityBand,
    pub y: Option<&'a NodeField>,
}

impl ForwardDomain for LatticeDomain<'_> {
    type Field = NodeField;

    fn solve(&self, spec: &ForwardSpec) -> Result<NodeField> {
        euler_forward_lattice(spec, self.geometry, self.band, self.y)
    }

    fn sup_distance(a: &NodeField, b: &NodeField) -> f64 {
        a.sup_distance(b)
    }

    fn max_excess(a: &NodeField, b: &NodeField) -> f64 {
        a.max_excess_over(b)
    }

    fn sup_abs(a: &NodeField) -> f64 {
        a.sup_abs()
    }

    fn dt(&self) -> f64 {
        self.geometry.dt()
    }
}

fn non_finite(step: usize, what: &str) -> Error {
    Error::NonFinite {
        step,
        what: what.to_string(),
    }
}

/// Per-sample Euler scheme
/// `X_{k+1} = X_k + bΔt + hΔ⟨B⟩_k + σΔB_k` with left-endpoint coefficients.
pub fn euler_forward(spec: &ForwardSpec, bundle: &PathBundle, y: Option<&ProcessSamples>) -> Result<ProcessSamples> {
    let grid = &bundle.grid;
    let steps = grid.steps();
    if spec.needs_y() && y.is_none() {
        return config("drift depends on y but no driving process was supplied");
    }
    if let Some(y) = y {
        let aligned = y.n_scenarios() == bundle.n_scenarios()
            && y.scenarios
                .iter()
                .zip(&bundle.scenarios)
                .all(|(ys, sc)| ys.len() == sc.b.len() && ys.iter().all(|p| p.len() >= steps));
        if !aligned {
            return Err(Error::GridMismatch(
                "driving process does not match the path bundle".into(),
            ));
        }
    }
    let times = grid.times();
    let mut out = Vec::with_capacity(bundle.n_scenarios());
    for (s, sc) in bundle.scenarios.iter().enumerate() {
        let paths =
            sc.b.par_iter()
                .enumerate()
                .map(|(m, bpath)| {
                    let mut x = Vec::with_capacity(steps + 1);
                    x.push(spec.x0);
                    for k in 0..steps {
                        let xk = x[k];
                        let yk = y.map_or(0.0, |y| y.scenarios[s][m][k]);
                        let t = times[k];
                        let arg = [xk, yk];
                        let next = xk
                            + spec.b.eval(t, &arg) * grid.dt(k)
                            + spec.h.eval(t, &arg) * sc.dqv[k]
                            + spec.sigma.eval(t, &[xk]) * (bpath[k + 1] - bpath[k]);
                        if !next.is_finite() {
                            return Err(non_finite(k + 1, "forward state"));
                        }
                        x.push(next);
                    }
                    Ok(x)
                })
                .collect::<Result<Vec<_>>>()?;
        out.push(paths);
    }
    Ok(ProcessSamples::new(out))
}

/// Lattice version of the Euler scheme: node `j` at `t_{k+1}` receives the
/// `σ̄`-transition-weighted average of the Euler updates from its parents,
/// with `ΔB = x_j − x_i` and `Δ⟨B⟩ = σ̄²Δt`. Layer 0 is
/// `x₀ + σ(0, x₀)(x_i − x_root)`.
pub fn euler_forward_lattice(
    spec: &ForwardSpec,
    geometry: &LatticeGeometry,
    band: &VolatilityBand,
    y: Option<&NodeField>,
) -> Result<NodeField> {
    if spec.needs_y() && y.is_none() {
        return config("drift depends on y but no driving field was supplied");
    }
    let n_nodes = geometry.n_nodes();
    let steps = geometry.steps();
    if let Some(y) = y {
        if y.layers.len() < steps || y.layers.iter().take(steps).any(|l| l.len() != n_nodes) {
            return Err(Error::GridMismatch("driving field does not match the lattice".into()));
        }
    }
    let mut layers = Vec::with_capacity(steps + 1);
    layers.push(lattice_initial_layer(spec, geometry));
    for k in 0..steps {
        let next = lattice_forward_layer(spec, geometry, band, k, &layers[k], y.map(|y| y.layers[k].as_slice()))?;
        layers.push(next);
    }
    Ok(NodeField { layers })
}

/// Layer 0 of the lattice forward state, `x₀ + σ(0, x₀)(x_i − x_root)`.
pub(crate) fn lattice_initial_layer(spec: &ForwardSpec, geometry: &LatticeGeometry) -> Vec<f64> {
    let root = geometry.nodes()[geometry.root()];
    let s0 = spec.sigma.eval(0.0, &[spec.x0]);
    geometry.nodes().iter().map(|&b| spec.x0 + s0 * (b - root)).collect()
}

/// One forward step on the lattice from layer `k` to `k + 1`.
pub(crate) fn lattice_forward_layer(
    spec: &ForwardSpec,
    geometry: &LatticeGeometry,
    band: &VolatilityBand,
    k: usize,
    prev: &[f64],
    y: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let nodes = geometry.nodes();
    let n_nodes = nodes.len();
    let dt = geometry.dt();
    let r = stability_ratio(band, dt, geometry.dx());
    let dqv = band.var_hi() * dt;
    let t = geometry.times()[k];
    let weight = |i: usize, j: usize| {
        if i == 0 || i + 1 == n_nodes {
            if i == j {
                1.0
            } else {
                0.0
            }
        } else if i == j {
            1.0 - r
        } else {
            0.5 * r
        }
    };
    let update: Vec<(f64, f64)> = (0..n_nodes)
        .into_par_iter()
        .map(|i| {
            let arg = [prev[i], y.map_or(0.0, |y| y[i])];
            let drift = spec.b.eval(t, &arg) * dt + spec.h.eval(t, &arg) * dqv;
            (prev[i] + drift, spec.sigma.eval(t, &[prev[i]]))
        })
        .collect();
    let mut next = Vec::with_capacity(n_nodes);
    for j in 0..n_nodes {
        let lo = j.saturating_sub(1);
        let hi = (j + 1).min(n_nodes - 1);
        let (mut acc, mut wsum) = (0.0, 0.0);
        for (i, &(base, sig)) in update.iter().enumerate().take(hi + 1).skip(lo) {
            let w = weight(i, j);
            if w > 0.0 {
                acc += w * (base + sig * (nodes[j] - nodes[i]));
                wsum += w;
            }
        }
        let v = acc / wsum;
        if !v.is_finite() {
            return Err(non_finite(k + 1, "forward node state"));
        }
        next.push(v);
    }
    Ok(next)
}

/// Outcome of the Lipschitz ladder for a forward solve.
#[derive(Debug, Clone, Default)]
pub struct LadderReport {
    pub levels: Vec<f64>,
    /// `sup |X^{k+1} − X^k|` between consecutive levels.
    pub deltas: Vec<f64>,
    /// `max (X^k − X^{k+1})⁺` between consecutive levels.
    pub violations: Vec<f64>,
    pub converged: bool,
    pub slack: f64,
}

/// Settings for [`solve_forward_monotone`].
#[derive(Debug, Clone)]
pub struct LadderConfig {
    pub max_levels: usize,
    pub tol: f64,
    pub grid: CandidateGrid,
    /// Multiplier in the comparison slack `c·Δt·(1 + scale)`.
    pub slack_factor: f64,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            max_levels: 6,
            tol: 1e-6,
            grid: CandidateGrid::coarse(),
            slack_factor: 10.0,
        }
    }
}

/// Replaces `b` and `h` by their level-`n` inf-convolutions in `(x, y)`.
pub fn spec_at_level(spec: &ForwardSpec, n: f64, grid: &CandidateGrid) -> Result<ForwardSpec> {
    let b = InfConvApprox::new(spec.b.clone(), n, grid.clone())?.as_function();
    let h = InfConvApprox::new(spec.h.clone(), n, grid.clone())?.as_function();
    Ok(ForwardSpec { b, h, ..spec.clone() })
}

fn is_lipschitz_at(spec: &ForwardSpec, n: f64) -> bool {
    [&spec.b, &spec.h]
        .iter()
        .all(|c| (0..c.arity()).all(|j| !c.depends_on(j)) || c.lipschitz().is_some_and(|l| l <= n))
}

/// Solves the forward equation for the ladder `b_{n_1} ≤ b_{n_2} ≤ …` until
/// consecutive levels agree within `tol`. The level solutions must be
/// nondecreasing in the level (comparison); a decrease beyond the slack means
/// a monotonicity or growth declaration is wrong.
pub fn solve_forward_monotone<D: ForwardDomain>(
    spec: &ForwardSpec,
    domain: &D,
    cfg: &LadderConfig,
) -> Result<(D::Field, LadderReport)> {
    let levels = level_schedule(spec.b.growth().max(spec.h.growth()), cfg.max_levels.max(1));
    let mut report = LadderReport::default();
    let mut prev: Option<D::Field> = None;
    for &n in &levels {
        let level_spec = spec_at_level(spec, n, &cfg.grid)?;
        let x = domain.solve(&level_spec)?;
        report.levels.push(n);
        if prev.is_none() && is_lipschitz_at(spec, n) {
            // every level reproduces the coefficients themselves
            report.converged = true;
            return Ok((x, report));
        }
        if let Some(p) = &prev {
            let slack = cfg.slack_factor * domain.dt() * (1.0 + D::sup_abs(&x));
            report.slack = slack;
            let violation = D::max_excess(p, &x).max(0.0);
            let delta = D::sup_distance(p, &x);
            report.violations.push(violation);
            report.deltas.push(delta);
            if violation > slack {
                return Err(Error::Monotonicity {
                    iteration: report.levels.len() - 1,
                    what: "forward ladder",
                    magnitude: violation,
                    slack,
                });
            }
            if delta < cfg.tol {
                report.converged = true;
                return Ok((x, report));
            }
        }
        prev = Some(x);
    }
    Ok((prev.expect("at least one level"), report))
}

/// Dominating forward process
/// `S = x₀ + K∫(1 + |S| + |U|)ds + ∫σ(S)dB`, with `U` the driving process of
/// `domain`.
pub fn envelope_forward<D: ForwardDomain>(
    x0: f64,
    k: f64,
    sigma: &GrowthBoundedFunction,
    domain: &D,
) -> Result<D::Field> {
    let b = GrowthBoundedFunction::new(2, k, move |_, v| k * (1.0 + v[0].abs() + v[1].abs()))
        .nondecreasing_in(1)
        .with_lipschitz(k);
    let spec = ForwardSpec::new(x0, b, GrowthBoundedFunction::zero(2), sigma.clone())?;
    domain.solve(&spec)
}

/// Discrete Gronwall bound on `sup_k |X_k|` along one path:
/// `(|x₀| + M(1 + Y*)(T + ⟨B⟩_T) + I*) · exp(M(T + ⟨B⟩_T))`, where `Y*` bounds
/// the driving process and `I*` is the realized maximum of the stochastic
/// integral.
pub fn gronwall_bound(x0: f64, growth: f64, horizon: f64, qv_t: f64, y_sup: f64, ito_sup: f64) -> f64 {
    let clock = horizon + qv_t;
    (x0.abs() + growth * (1.0 + y_sup) * clock + ito_sup) * (growth * clock).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcore::TimeGrid;
    use crate::glattice::LatticeConfig;
    use crate::gpaths::{bang_bang_family, simulate_family, simulate_paths, ScenarioControl};

    fn band() -> VolatilityBand {
        VolatilityBand::new(0.5, 1.0).unwrap()
    }

    fn bundle(steps: usize, samples: usize) -> PathBundle {
        let grid = TimeGrid::uniform(1.0, steps).unwrap();
        let c = ScenarioControl::constant(grid, 1.0, &band()).unwrap();
        simulate_paths(&c, samples, 5).unwrap()
    }

    #[test]
    fn unit_drift() {
        let b = GrowthBoundedFunction::constant(2, 1.0);
        let spec = ForwardSpec::with_drift(0.3, b, 0.0).unwrap();
        let bun = bundle(50, 3);
        let x = euler_forward(&spec, &bun, None).unwrap();
        for (k, t) in bun.grid.times().iter().enumerate() {
            assert!((x.scenarios[0][1][k] - (0.3 + t)).abs() < 1e-12);
        }
    }

    #[test]
    fn qv_drift_attains_upper_variance() {
        let h = GrowthBoundedFunction::constant(2, 1.0);
        let spec = ForwardSpec::new(
            0.1,
            GrowthBoundedFunction::zero(2),
            h,
            GrowthBoundedFunction::constant(1, 0.0),
        )
        .unwrap();
        let grid = TimeGrid::uniform(1.0, 20).unwrap();
        let fam = bang_bang_family(&grid, &band(), 2).unwrap();
        let bun = simulate_family(&fam, 4, 2).unwrap();
        let x = euler_forward(&spec, &bun, None).unwrap();
        for (s, sc) in bun.scenarios.iter().enumerate() {
            for (k, q) in sc.qv.iter().enumerate() {
                assert!((x.scenarios[s][0][k] - 0.1 - q).abs() < 1e-12);
            }
        }
        let fam_view = x.family().unwrap();
        let top = crate::gcore::sublinear_expectation(&fam_view, |p| *p.last().unwrap());
        assert!((top - 1.1).abs() < 1e-12);
    }

    #[test]
    fn mean_reverting_ode() {
        let b = GrowthBoundedFunction::new(2, 1.0, |_, v| -v[0])
            .with_lipschitz(1.0)
            .ignoring(1);
        let spec = ForwardSpec::with_drift(2.0, b, 0.0).unwrap();
        for steps in [100, 200] {
            let x = euler_forward(&spec, &bundle(steps, 1), None).unwrap();
            let err = (x.scenarios[0][0][steps] - 2.0 * (-1.0f64).exp()).abs();
            assert!(err < 2.0 / steps as f64, "steps {steps}: {err}");
        }
    }

    #[test]
    fn missing_y_and_misaligned_inputs() {
        let b = GrowthBoundedFunction::new(2, 1.0, |_, v| v[1].tanh()).nondecreasing_in(1);
        let spec = ForwardSpec::with_drift(0.0, b, 1.0).unwrap();
        let bun = bundle(10, 2);
        assert!(euler_forward(&spec, &bun, None).is_err());
        let short = ProcessSamples::constant(0.0, 1, 2, 3);
        assert!(matches!(
            euler_forward(&spec, &bun, Some(&short)),
            Err(Error::GridMismatch(_))
        ));
        let bad = GrowthBoundedFunction::new(2, 1.0, |_, v| -v[1]);
        assert!(ForwardSpec::with_drift(0.0, bad, 1.0).is_err());
    }

    #[test]
    fn blow_up_reports_step() {
        let b = GrowthBoundedFunction::new(2, 1.0, |_, v| v[0] * v[0] * 1e300).ignoring(1);
        let spec = ForwardSpec::with_drift(1.0, b, 0.0).unwrap();
        match euler_forward(&spec, &bundle(10, 1), None) {
            Err(Error::NonFinite { step, .. }) => assert!(step >= 1),
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn lattice_reproduces_functions_of_b() {
        let b = band();
        let geo = LatticeGeometry::new(&b, &LatticeConfig::new(1.0, 50)).unwrap();
        let drift = GrowthBoundedFunction::constant(2, 0.5);
        let spec = ForwardSpec::with_drift(0.2, drift, 1.3).unwrap();
        let x = euler_forward_lattice(&spec, &geo, &b, None).unwrap();
        for (k, layer) in x.layers.iter().enumerate() {
            let t = geo.times()[k];
            for (i, v) in layer.iter().enumerate() {
                let expect = 0.2 + 0.5 * t + 1.3 * geo.nodes()[i];
                // boundary nodes only see themselves and their interior neighbour
                if i > k && i + k < geo.n_nodes() - 1 {
                    assert!((v - expect).abs() < 1e-12, "k {k} i {i}");
                }
            }
        }
    }

    #[test]
    fn ladder_is_constant_for_lipschitz_drift() {
        let b = GrowthBoundedFunction::new(2, 1.0, |_, v| v[1].atan())
            .nondecreasing_in(1)
            .ignoring(0);
        let spec = ForwardSpec::with_drift(0.0, b, 1.0).unwrap();
        let bun = bundle(100, 20);
        let y = bun.b_process();
        let domain = PathDomain {
            bundle: &bun,
            y: Some(&y),
        };
        let (x, rep) = solve_forward_monotone(&spec, &domain, &LadderConfig::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.levels.len(), 2);
        assert!(rep.deltas[0] < 1e-12);
        let declared = ForwardSpec::with_drift(0.0, spec.b.clone().with_lipschitz(1.0), 1.0).unwrap();
        let (_, rep) = solve_forward_monotone(&declared, &domain, &LadderConfig::default()).unwrap();
        assert_eq!(rep.levels.len(), 1);
        let direct = euler_forward(&spec, &bun, Some(&y)).unwrap();
        assert!(PathDomain::sup_distance(&x, &direct) < 1e-12);
    }

    #[test]
    fn zero_coefficients_stay_put() {
        let spec = ForwardSpec::new(
            0.7,
            GrowthBoundedFunction::zero(2),
            GrowthBoundedFunction::zero(2),
            GrowthBoundedFunction::zero(1),
        )
        .unwrap();
        let bun = bundle(30, 4);
        let domain = PathDomain { bundle: &bun, y: None };
        let (x, _) = solve_forward_monotone(&spec, &domain, &LadderConfig::default()).unwrap();
        assert!(x.scenarios.iter().flatten().flatten().all(|v| *v == 0.7));
    }

    #[test]
    fn envelope_ode() {
        let sigma = GrowthBoundedFunction::zero(1);
        let bun = bundle(400, 1);
        let u = ProcessSamples::constant(0.0, 1, 1, 401);
        let s = envelope_forward(
            0.5,
            1.0,
            &sigma,
            &PathDomain {
                bundle: &bun,
                y: Some(&u),
            },
        )
        .unwrap();
        let exact = 1.5 * 1.0f64.exp() - 1.0;
        assert!((s.scenarios[0][0][400] - exact).abs() < 5.0 / 400.0);
        let sig1 = GrowthBoundedFunction::constant(1, 1.0);
        let s0 = envelope_forward(
            0.5,
            0.0,
            &sig1,
            &PathDomain {
                bundle: &bun,
                y: Some(&u),
            },
        )
        .unwrap();
        for (v, b) in s0.scenarios[0][0].iter().zip(&bun.scenarios[0].b[0]) {
            assert!((v - 0.5 - b).abs() < 1e-12);
        }
    }
}
