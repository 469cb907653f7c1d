//! Experiment configuration read from TOML.
//!
//! Every section is optional; missing values fall back to the defaults below.
//! The resolved configuration (defaults plus command-line overrides) is
//! echoed into the run manifest so a run can be replayed from it alone.

use std::path::Path;

use gbsde_core::approx::{CandidateGrid, GrowthBoundedFunction};
use gbsde_core::fsde::ForwardSpec;
use gbsde_core::rbsde::{BackwardSpec, Barrier, Terminal, TerminalPolicy};
use gbsde_core::rfbsde::{problems, CoupledProblem};
use gbsde_core::{LatticeConfig, LatticeGeometry, VolatilityBand};
use serde::{Deserialize, Serialize};

use crate::expr::Expr;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Lattice,
    Scenario,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub backend: Backend,
    pub band: BandSection,
    pub grid: GridSection,
    pub lattice: LatticeSection,
    pub family: FamilySection,
    pub tolerances: ToleranceSection,
    pub gheat: GheatSection,
    pub infconv: InfconvSection,
    pub forward: ForwardSection,
    pub rbsde: RbsdeSection,
    pub problem: ProblemSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backend: Backend::Lattice,
            band: BandSection::default(),
            grid: GridSection::default(),
            lattice: LatticeSection::default(),
            family: FamilySection::default(),
            tolerances: ToleranceSection::default(),
            gheat: GheatSection::default(),
            infconv: InfconvSection::default(),
            forward: ForwardSection::default(),
            rbsde: RbsdeSection::default(),
            problem: ProblemSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandSection {
    pub sigma_lo: f64,
    pub sigma_hi: f64,
}

impl Default for BandSection {
    fn default() -> Self {
        Self {
            sigma_lo: 0.5,
            sigma_hi: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeSection {
    pub center: f64,
    pub courant: f64,
    pub width_sigmas: f64,
    pub dx: Option<f64>,
}

impl Default for LatticeSection {
    fn default() -> Self {
        let d = LatticeConfig::new(1.0, 1);
        Self {
            center: d.center,
            courant: d.courant,
            width_sigmas: d.width_sigmas,
            dx: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilySection {
    /// Bang-bang depth: `2^depth` controls.
    pub depth: usize,
    pub samples: usize,
}

impl Default for FamilySection {
    fn default() -> Self {
        Self {
            depth: 2,
            samples: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceSection {
    pub tol: f64,
    pub max_outer: usize,
    pub slack_factor: f64,
    pub ladder_levels: usize,
}

impl Default for ToleranceSection {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            max_outer: 20,
            slack_factor: 10.0,
            ladder_levels: 6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GheatSection {
    /// Payoff in `x`.
    pub phi: String,
}

impl Default for GheatSection {
    fn default() -> Self {
        Self { phi: "x^2".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfconvSection {
    /// Function of `x` to regularize.
    pub f: Coefficient,
    pub levels: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub points: usize,
}

impl Default for InfconvSection {
    fn default() -> Self {
        Self {
            f: Coefficient {
                expr: "x^2".into(),
                growth: None,
                lipschitz: None,
            },
            levels: 4,
            x_min: -2.0,
            x_max: 2.0,
            points: 41,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardSection {
    pub x0: f64,
    /// Drift in `(t, x, y)`.
    pub b: Coefficient,
    /// `d⟨B⟩` coefficient in `(t, x, y)`.
    pub h: Coefficient,
    /// Volatility in `(t, x)`.
    pub sigma: Coefficient,
    /// Value of `y` seen by `b` and `h` when the forward equation runs alone.
    pub y: f64,
}

impl Default for ForwardSection {
    fn default() -> Self {
        Self {
            x0: 0.0,
            b: Coefficient::declared("0.1 - 0.1*x", 0.1, 0.1),
            h: Coefficient::declared("0", 0.0, 0.0),
            sigma: Coefficient::declared("1", 1.0, 0.0),
            y: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RbsdeSection {
    /// Terminal value in `(b, x)`.
    pub terminal: String,
    /// Lower barrier in `(t, b, x)`.
    pub barrier: String,
    /// Declared upper bound of the barrier; estimated on the lattice if absent.
    pub barrier_cap: Option<f64>,
    /// Drivers in `(t, x, y, z)`.
    pub f: Coefficient,
    pub g: Coefficient,
    /// Envelope constant; defaults to the largest driver growth.
    pub k: Option<f64>,
    pub policy: Policy,
    /// Penalty parameter of the scenario backend.
    pub epsilon: f64,
}

impl Default for RbsdeSection {
    fn default() -> Self {
        Self {
            terminal: "max(1 - exp(b), 0)".into(),
            barrier: "max(1 - exp(b), 0)".into(),
            barrier_cap: None,
            f: Coefficient::declared("-0.05*y", 0.05, 0.05),
            g: Coefficient::declared("0", 0.0, 0.0),
            k: None,
            policy: Policy::Reject,
            epsilon: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Reject,
    Project,
}

impl From<Policy> for TerminalPolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::Reject => TerminalPolicy::Reject,
            Policy::Project => TerminalPolicy::ProjectOntoBarrier,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    /// Name of a shipped coupled problem, or `custom` to take the
    /// coefficients from the `forward` and `rbsde` sections.
    pub builtin: String,
    /// Growth constant `M`; defaults to the largest coefficient growth.
    pub growth: Option<f64>,
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self {
            builtin: "coupled_tanh".into(),
            growth: None,
        }
    }
}

/// An expression with optional declared growth and Lipschitz constants.
/// Written either as a bare string or as `{ expr = "...", growth = .., lipschitz = .. }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "CoefficientRepr")]
pub struct Coefficient {
    pub expr: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub growth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
}

impl Coefficient {
    fn declared(expr: &str, growth: f64, lipschitz: f64) -> Self {
        Self {
            expr: expr.into(),
            growth: Some(growth),
            lipschitz: Some(lipschitz),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CoefficientRepr {
    Plain(String),
    Table {
        expr: String,
        growth: Option<f64>,
        lipschitz: Option<f64>,
    },
}

impl From<CoefficientRepr> for Coefficient {
    fn from(r: CoefficientRepr) -> Self {
        match r {
            CoefficientRepr::Plain(expr) => Self {
                expr,
                growth: None,
                lipschitz: None,
            },
            CoefficientRepr::Table {
                expr,
                growth,
                lipschitz,
            } => Self {
                expr,
                growth,
                lipschitz,
            },
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub steps: Option<usize>,
    pub family_depth: Option<usize>,
    pub backend: Option<Backend>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.tol {
            self.tolerances.tol = v;
        }
        if let Some(v) = o.steps {
            self.grid.steps = v;
        }
        if let Some(v) = o.family_depth {
            self.family.depth = v;
        }
        if let Some(v) = o.backend {
            self.backend = v;
        }
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn band(&self) -> gbsde_core::Result<VolatilityBand> {
        VolatilityBand::new(self.band.sigma_lo, self.band.sigma_hi)
    }

    pub fn lattice_config(&self) -> LatticeConfig {
        let mut c = LatticeConfig::new(self.grid.horizon, self.grid.steps)
            .with_center(self.lattice.center)
            .with_width(self.lattice.width_sigmas);
        c.courant = self.lattice.courant;
        if let Some(dx) = self.lattice.dx {
            c = c.with_dx(dx);
        }
        c
    }

    /// Band and geometry; fails when the explicit scheme would be unstable.
    pub fn geometry(&self) -> gbsde_core::Result<(LatticeGeometry, VolatilityBand)> {
        let band = self.band()?;
        Ok((LatticeGeometry::new(&band, &self.lattice_config())?, band))
    }

    pub fn forward_spec(&self, t_max: f64) -> Result<ForwardSpec, CliError> {
        let f = &self.forward;
        let b = build_coefficient("forward.b", &f.b, &["t", "x", "y"], &[1], t_max)?;
        let h = build_coefficient("forward.h", &f.h, &["t", "x", "y"], &[1], t_max)?;
        let sigma = build_coefficient("forward.sigma", &f.sigma, &["t", "x"], &[], t_max)?;
        Ok(ForwardSpec::new(f.x0, b, h, sigma)?)
    }

    /// Backward data; a barrier without declared cap gets the largest value it
    /// takes on `geometry`.
    pub fn backward_spec(&self, geometry: &LatticeGeometry) -> Result<BackwardSpec, CliError> {
        let r = &self.rbsde;
        let t_max = self.grid.horizon;
        let f = build_coefficient("rbsde.f", &r.f, &["t", "x", "y", "z"], &[0], t_max)?;
        let g = build_coefficient("rbsde.g", &r.g, &["t", "x", "y", "z"], &[0], t_max)?;
        let terminal = parse("rbsde.terminal", &r.terminal, &["b", "x"])?;
        let terminal = Terminal::new(move |b, x| terminal.eval(&[b, x]));
        let barrier = parse("rbsde.barrier", &r.barrier, &["t", "b", "x"])?;
        let cap = match r.barrier_cap {
            Some(c) => c,
            None => geometry
                .times()
                .iter()
                .flat_map(|&t| geometry.nodes().iter().map(move |&b| (t, b)))
                .map(|(t, b)| barrier.eval(&[t, b, b]))
                .fold(f64::NEG_INFINITY, f64::max),
        };
        let barrier = Barrier::new(cap, move |t, b, x| barrier.eval(&[t, b, x]));
        let k = r.k.unwrap_or(f.growth().max(g.growth()));
        Ok(BackwardSpec::new(terminal, f, g, barrier, k)?.with_policy(r.policy.into()))
    }

    pub fn coupled_problem(&self, geometry: &LatticeGeometry) -> Result<CoupledProblem, CliError> {
        let name = self.problem.builtin.as_str();
        if name != "custom" {
            return problems::builtin(name).ok_or_else(|| {
                CliError::Config(format!(
                    "unknown built-in problem `{name}` (known: custom, {})",
                    problems::NAMES.join(", ")
                ))
            });
        }
        let forward = self.forward_spec(self.grid.horizon)?;
        let backward = self.backward_spec(geometry)?;
        let m = self.problem.growth.unwrap_or_else(|| {
            [&forward.b, &forward.h, &backward.driver_f, &backward.driver_g]
                .iter()
                .map(|c| c.growth())
                .fold(0.0, f64::max)
        });
        let k = backward.k.max(m);
        Ok(CoupledProblem::new(forward, backward, m, k)?)
    }

    pub fn infconv_base(&self) -> Result<GrowthBoundedFunction, CliError> {
        build_coefficient("infconv.f", &self.infconv.f, &["t", "x"], &[], self.grid.horizon)
    }

    pub fn candidate_grid(&self) -> CandidateGrid {
        CandidateGrid::default()
    }
}

fn parse(name: &str, text: &str, vars: &[&str]) -> Result<Expr, CliError> {
    Expr::parse(text, vars).map_err(|e| CliError::Config(format!("{name}: {e}")))
}

/// Half-width of the box on which expression coefficients are audited.
const AUDIT_RADIUS: f64 = 4.0;
const AUDIT_DIVISIONS: usize = 8;

fn audit_points(arity: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = (0..=AUDIT_DIVISIONS)
        .map(|i| -AUDIT_RADIUS + 2.0 * AUDIT_RADIUS * i as f64 / AUDIT_DIVISIONS as f64)
        .collect();
    let mut points = vec![Vec::new()];
    for _ in 0..arity {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&a| {
                    let mut q = p.clone();
                    q.push(a);
                    q
                })
            })
            .collect();
    }
    points
}

/// Compiles a coefficient whose first variable is `t`, derives its argument
/// dependence from the variables used, and audits it on a box: values must be
/// finite, the declared growth and Lipschitz constants must hold, and every
/// argument in `nondecreasing` that is used must be nondecreasing. Without a
/// declared growth the smallest constant valid on the box is used.
pub fn build_coefficient(
    name: &str,
    c: &Coefficient,
    vars: &[&str],
    nondecreasing: &[usize],
    t_max: f64,
) -> Result<GrowthBoundedFunction, CliError> {
    let e = parse(name, &c.expr, vars)?;
    let arity = vars.len() - 1;
    let points = audit_points(arity);
    let times = [0.0, 0.5 * t_max, t_max];
    let eval = |t: f64, v: &[f64]| {
        let mut env = Vec::with_capacity(arity + 1);
        env.push(t);
        env.extend_from_slice(v);
        e.eval(&env)
    };
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut needed: f64 = 0.0;
    for &t in &times {
        for p in &points {
            let v = eval(t, p);
            if !v.is_finite() {
                return Err(CliError::Config(format!("{name}: `{}` is not finite at {p:?}", c.expr)));
            }
            needed = needed.max(v.abs() / (1.0 + norm(p)));
        }
    }
    let growth = match c.growth {
        Some(m) if needed > m * (1.0 + 1e-9) + 1e-12 => {
            return Err(CliError::Config(format!(
                "{name}: declared growth {m} is exceeded on the audit box (needs {needed:.6})"
            )))
        }
        Some(m) => m,
        None => needed,
    };
    if let Some(l) = c.lipschitz {
        let h = 1e-4;
        for &t in &times {
            for p in &points {
                for i in 0..arity {
                    let mut q = p.clone();
                    q[i] += h;
                    let ratio = (eval(t, &q) - eval(t, p)).abs() / h;
                    if ratio > l * (1.0 + 1e-6) + 1e-6 {
                        return Err(CliError::Config(format!(
                            "{name}: declared Lipschitz constant {l} is exceeded near {p:?} (slope {ratio:.6})"
                        )));
                    }
                }
            }
        }
    }
    let depends: Vec<bool> = (0..arity).map(|i| e.uses(i + 1)).collect();
    let text = c.expr.clone();
    let e2 = e.clone();
    let mut func = GrowthBoundedFunction::new(arity, growth, move |t, v| {
        let mut env = [0.0; 4];
        env[0] = t;
        env[1..=v.len()].copy_from_slice(v);
        e2.eval(&env[..=v.len()])
    })
    .with_depends(depends);
    if let Some(l) = c.lipschitz {
        func = func.with_lipschitz(l);
    }
    for &arg in nondecreasing {
        if !func.depends_on(arg) {
            continue;
        }
        let violation = times
            .iter()
            .map(|&t| func.monotone_violation(t, arg, &points, 1e-3))
            .fold(0.0, f64::max);
        if violation > 1e-12 {
            return Err(CliError::Config(format!(
                "{name}: `{text}` must be nondecreasing in `{}` (decrease {violation:.3e})",
                vars[arg + 1]
            )));
        }
        func = func.nondecreasing_in(arg);
    }
    Ok(func)
}
