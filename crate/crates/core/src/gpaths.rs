//! Scenario-control realization of G-Brownian motion.
//!
//! Each [`ScenarioControl`] fixes a per-step volatility in `[σ̲, σ̄]`; under it
//! `B` is a classical Gaussian martingale with increments of variance
//! `σ_k²Δt_k`, and the quadratic variation is the deterministic sum of those
//! variances. A finite family of controls is the finite surrogate for the
//! representing set of the G-expectation.
//!
//! Random numbers come from one ChaCha stream per `(scenario, sample)` pair,
//! so growing the family or the sample count never changes existing paths and
//! the result does not depend on the rayon schedule.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{config, Error, Result};
use crate::gcore::{mean_and_stderr, pairwise_sum, ProcessSamples, TimeGrid, VolatilityBand};

/// Piecewise-constant volatility over a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioControl {
    grid: TimeGrid,
    sigma: Vec<f64>,
}

impl ScenarioControl {
    pub fn new(grid: TimeGrid, sigma: Vec<f64>, band: &VolatilityBand) -> Result<Self> {
        if sigma.len() != grid.steps() {
            return Err(Error::GridMismatch(format!(
                "control has {} volatilities for {} steps",
                sigma.len(),
                grid.steps()
            )));
        }
        if let Some(s) = sigma.iter().find(|s| !band.contains(**s)) {
            return config(format!(
                "control volatility {s} outside [{}, {}]",
                band.sigma_lo(),
                band.sigma_hi()
            ));
        }
        Ok(Self { grid, sigma })
    }

    pub fn constant(grid: TimeGrid, sigma: f64, band: &VolatilityBand) -> Result<Self> {
        let n = grid.steps();
        Self::new(grid, vec![sigma; n], band)
    }

    /// `σ̲` on even steps, `σ̄` on odd steps.
    pub fn alternating(grid: TimeGrid, band: &VolatilityBand) -> Result<Self> {
        let sigma = (0..grid.steps())
            .map(|k| if k % 2 == 0 { band.sigma_lo() } else { band.sigma_hi() })
            .collect();
        Self::new(grid, sigma, band)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Per-step quadratic-variation increments `σ_k²Δt_k`.
    pub fn qv_increments(&self) -> Vec<f64> {
        self.sigma
            .iter()
            .enumerate()
            .map(|(k, s)| s * s * self.grid.dt(k))
            .collect()
    }
}

/// All `2^depth` bang-bang controls: the steps are cut into `depth` nearly
/// equal blocks and each block runs at `σ̲` or `σ̄`.
pub fn bang_bang_family(grid: &TimeGrid, band: &VolatilityBand, depth: usize) -> Result<Vec<ScenarioControl>> {
    let n = grid.steps();
    if depth == 0 || depth > 16 {
        return config(format!("bang-bang depth must be in 1..=16, got {depth}"));
    }
    if n > 0 && depth > n {
        return config(format!("bang-bang depth {depth} exceeds {n} steps"));
    }
    (0..1usize << depth)
        .map(|pattern| {
            let sigma = (0..n)
                .map(|k| {
                    let block = k * depth / n;
                    if pattern >> (depth - 1 - block) & 1 == 1 {
                        band.sigma_hi()
                    } else {
                        band.sigma_lo()
                    }
                })
                .collect();
            ScenarioControl::new(grid.clone(), sigma, band)
        })
        .collect()
}

/// Simulated paths of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPaths {
    pub control: ScenarioControl,
    /// `B` per sample, `steps + 1` values starting at 0.
    pub b: Vec<Vec<f64>>,
    /// Quadratic-variation increments, shared by all samples.
    pub dqv: Vec<f64>,
    /// `⟨B⟩` at the grid times, starting at 0.
    pub qv: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub seed: u64,
    pub scenarios: Vec<ScenarioPaths>,
}

fn stream_id(scenario: usize, sample: usize) -> u64 {
    ((scenario as u64) << 32) | sample as u64
}

fn simulate_scenario(control: &ScenarioControl, n_samples: usize, seed: u64, id: usize) -> ScenarioPaths {
    let grid = control.grid();
    let dqv = control.qv_increments();
    let mut qv = Vec::with_capacity(dqv.len() + 1);
    qv.push(0.0);
    for d in &dqv {
        qv.push(qv.last().unwrap() + d);
    }
    let sd: Vec<f64> = dqv.iter().map(|v| v.sqrt()).collect();
    let b = (0..n_samples)
        .into_par_iter()
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_id(id, m));
            let mut path = Vec::with_capacity(grid.steps() + 1);
            path.push(0.0);
            for s in &sd {
                let z: f64 = StandardNormal.sample(&mut rng);
                path.push(path.last().unwrap() + s * z);
            }
            path
        })
        .collect();
    ScenarioPaths {
        control: control.clone(),
        b,
        dqv,
        qv,
    }
}

/// Classical realization of `B` and `⟨B⟩` under one control.
pub fn simulate_paths(control: &ScenarioControl, n_samples: usize, seed: u64) -> Result<PathBundle> {
    simulate_family(std::slice::from_ref(control), n_samples, seed)
}

/// Simulates every control of a family on a shared grid; scenario `s` uses
/// the streams `(s, 0..n_samples)`.
pub fn simulate_family(controls: &[ScenarioControl], n_samples: usize, seed: u64) -> Result<PathBundle> {
    if n_samples == 0 {
        return config("need at least one sample");
    }
    let Some(first) = controls.first() else {
        return config("control family is empty");
    };
    if controls.iter().any(|c| c.grid() != first.grid()) {
        return Err(Error::GridMismatch("controls use different grids".into()));
    }
    let scenarios = controls
        .iter()
        .enumerate()
        .map(|(s, c)| simulate_scenario(c, n_samples, seed, s))
        .collect();
    Ok(PathBundle {
        grid: first.grid().clone(),
        seed,
        scenarios,
    })
}

impl PathBundle {
    pub fn n_scenarios(&self) -> usize {
        self.scenarios.len()
    }

    pub fn n_samples(&self) -> usize {
        self.scenarios.first().map_or(0, |s| s.b.len())
    }

    pub fn b_process(&self) -> ProcessSamples {
        ProcessSamples::new(self.scenarios.iter().map(|s| s.b.clone()).collect())
    }

    pub fn qv_process(&self) -> ProcessSamples {
        ProcessSamples::new(self.scenarios.iter().map(|s| vec![s.qv.clone(); s.b.len()]).collect())
    }

    /// A step process `η(t_k, B_{t_k})` evaluated along every sample.
    pub fn adapted(&self, eta: impl Fn(f64, f64) -> f64) -> ProcessSamples {
        let times = self.grid.times();
        ProcessSamples::new(
            self.scenarios
                .iter()
                .map(|s| {
                    s.b.iter()
                        .map(|p| p.iter().zip(times).map(|(b, t)| eta(*t, *b)).collect())
                        .collect()
                })
                .collect(),
        )
    }

    /// Columns `scenario,sample,t,B,QV`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "scenario,sample,t,B,QV")?;
        for (s, sc) in self.scenarios.iter().enumerate() {
            for (m, path) in sc.b.iter().enumerate() {
                for (k, t) in self.grid.times().iter().enumerate() {
                    writeln!(out, "{s},{m},{t},{},{}", path[k], sc.qv[k])?;
                }
            }
        }
        Ok(())
    }
}

/// Lower and upper quadratic-variation envelopes `σ̲²t`, `σ̄²t`, accumulated
/// with the same recurrence as the simulated `⟨B⟩` so the comparison is exact.
pub fn qv_envelope(grid: &TimeGrid, band: &VolatilityBand) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![0.0];
    let mut hi = vec![0.0];
    for k in 0..grid.steps() {
        let dt = grid.dt(k);
        let (sl, sh) = (band.sigma_lo(), band.sigma_hi());
        lo.push(lo[k] + sl * sl * dt);
        hi.push(hi[k] + sh * sh * dt);
    }
    (lo, hi)
}

fn check_aligned(eta: &ProcessSamples, bundle: &PathBundle) -> Result<()> {
    let steps = bundle.grid.steps();
    if eta.n_scenarios() != bundle.n_scenarios() {
        return Err(Error::GridMismatch(format!(
            "integrand has {} scenarios, bundle has {}",
            eta.n_scenarios(),
            bundle.n_scenarios()
        )));
    }
    for (e, sc) in eta.scenarios.iter().zip(&bundle.scenarios) {
        if e.len() != sc.b.len() {
            return Err(Error::GridMismatch("integrand sample count differs".into()));
        }
        if let Some(p) = e.iter().find(|p| p.len() != steps && p.len() != steps + 1) {
            return Err(Error::GridMismatch(format!(
                "integrand length {} does not match {steps} steps",
                p.len()
            )));
        }
    }
    Ok(())
}

fn integral_paths(
    eta: &ProcessSamples,
    bundle: &PathBundle,
    increment: impl Fn(&ScenarioPaths, usize, usize) -> f64 + Sync,
) -> Result<ProcessSamples> {
    check_aligned(eta, bundle)?;
    let steps = bundle.grid.steps();
    let scenarios = eta
        .scenarios
        .iter()
        .zip(&bundle.scenarios)
        .map(|(e, sc)| {
            e.par_iter()
                .enumerate()
                .map(|(m, path)| {
                    let mut acc = Vec::with_capacity(steps + 1);
                    acc.push(0.0);
                    for k in 0..steps {
                        acc.push(acc[k] + path[k] * increment(sc, m, k));
                    }
                    acc
                })
                .collect()
        })
        .collect();
    Ok(ProcessSamples::new(scenarios))
}

/// Running Itô integral `∫_0^{t_j} η dB` with left-endpoint integrands.
pub fn ito_integral_path(eta: &ProcessSamples, bundle: &PathBundle) -> Result<ProcessSamples> {
    integral_paths(eta, bundle, |sc, m, k| sc.b[m][k + 1] - sc.b[m][k])
}

/// `Σ_k η_k (B_{k+1} − B_k)` per `[scenario][sample]`.
pub fn ito_integral(eta: &ProcessSamples, bundle: &PathBundle) -> Result<Vec<Vec<f64>>> {
    Ok(terminal_values(ito_integral_path(eta, bundle)?))
}

/// Running Riemann–Stieltjes integral against `⟨B⟩`.
pub fn qv_integral_path(eta: &ProcessSamples, bundle: &PathBundle) -> Result<ProcessSamples> {
    integral_paths(eta, bundle, |sc, _, k| sc.dqv[k])
}

/// `Σ_k η_k (⟨B⟩_{k+1} − ⟨B⟩_k)` per `[scenario][sample]`.
pub fn qv_integral(eta: &ProcessSamples, bundle: &PathBundle) -> Result<Vec<Vec<f64>>> {
    Ok(terminal_values(qv_integral_path(eta, bundle)?))
}

/// Values indexed `[scenario][sample]`.
pub type PerSample = Vec<Vec<f64>>;

/// Per-sample residuals of `⟨B⟩_T = B_T² − 2∫B dB`, as
/// `(B_T² − 2∫B dB − ⟨B⟩_T, B_T² − 2∫B dB − Σ(ΔB)²)`. The second term is the
/// exact discrete identity and vanishes up to rounding; the first is the
/// realized-minus-deterministic quadratic variation, which has mean zero.
pub fn ito_identity_residuals(bundle: &PathBundle) -> Result<(PerSample, PerSample)> {
    let eta = bundle.adapted(|_, b| b);
    let ito = ito_integral(&eta, bundle)?;
    let mut against_qv = Vec::with_capacity(bundle.n_scenarios());
    let mut discrete = Vec::with_capacity(bundle.n_scenarios());
    for (sc, ito_s) in bundle.scenarios.iter().zip(&ito) {
        let qv_t = *sc.qv.last().unwrap();
        let mut a = Vec::with_capacity(sc.b.len());
        let mut d = Vec::with_capacity(sc.b.len());
        for (path, i) in sc.b.iter().zip(ito_s) {
            let bt = *path.last().unwrap();
            let realized: f64 = path.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
            let lhs = bt * bt - 2.0 * i;
            a.push(lhs - qv_t);
            d.push(lhs - realized);
        }
        against_qv.push(a);
        discrete.push(d);
    }
    Ok((against_qv, discrete))
}

fn terminal_values(p: ProcessSamples) -> Vec<Vec<f64>> {
    p.scenarios
        .into_iter()
        .map(|s| s.into_iter().map(|path| *path.last().unwrap()).collect())
        .collect()
}

/// Constants of the two-sided moment inequality checked by [`bdg_diagnostic`].
#[derive(Debug, Clone, Copy)]
pub struct BdgConstants {
    pub lower: f64,
    pub upper: f64,
}

impl BdgConstants {
    /// Burkholder/Doob constants: `(p−1)^{−p}` below and `p^p` above; for
    /// `p = 2` these are the sharp `1` and `4`.
    pub fn classical(p: f64) -> Self {
        if p == 2.0 {
            Self { lower: 1.0, upper: 4.0 }
        } else {
            Self {
                lower: (p - 1.0).powf(-p),
                upper: p.powf(p),
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BdgReport {
    /// `σ̲^p Ê[(∫|η|²ds)^{p/2}]`
    pub lhs: f64,
    /// `Ê[sup_t |∫η dB|^p]`
    pub mid: f64,
    /// `σ̄^p Ê[(∫|η|²ds)^{p/2}]`
    pub rhs: f64,
    /// Standard error of `mid` under the maximizing scenario.
    pub mid_stderr: f64,
    pub lower_ratio: Option<f64>,
    pub upper_ratio: Option<f64>,
    /// `c·lhs ≤ mid + 3se` and `mid − 3se ≤ C·rhs`.
    pub holds: bool,
}

/// Monte-Carlo evaluation of both sides of the B-D-G inequality for an
/// adapted integrand `η(t, B_t)` over a control family.
pub fn bdg_diagnostic(
    eta: impl Fn(f64, f64) -> f64 + Sync,
    controls: &[ScenarioControl],
    p: f64,
    n_samples: usize,
    seed: u64,
    constants: BdgConstants,
) -> Result<BdgReport> {
    if !(p >= 2.0) {
        return config(format!("B-D-G diagnostic needs p >= 2, got {p}"));
    }
    let bundle = simulate_family(controls, n_samples, seed)?;
    let integrand = bundle.adapted(&eta);
    let running = ito_integral_path(&integrand, &bundle)?;
    let grid = &bundle.grid;
    let band_lo = controls
        .iter()
        .flat_map(|c| c.sigma().iter().copied())
        .fold(f64::INFINITY, f64::min);
    let band_hi = controls
        .iter()
        .flat_map(|c| c.sigma().iter().copied())
        .fold(0.0, f64::max);

    let mut energy_best = 0.0_f64;
    let mut mid = (f64::NEG_INFINITY, 0.0);
    for (eta_s, run_s) in integrand.scenarios.iter().zip(&running.scenarios) {
        let energy: Vec<f64> = eta_s
            .iter()
            .map(|path| {
                let terms: Vec<f64> = (0..grid.steps()).map(|k| path[k] * path[k] * grid.dt(k)).collect();
                pairwise_sum(&terms).powf(p / 2.0)
            })
            .collect();
        let sup: Vec<f64> = run_s
            .iter()
            .map(|path| path.iter().fold(0.0_f64, |m, v| m.max(v.abs())).powf(p))
            .collect();
        energy_best = energy_best.max(mean_and_stderr(&energy).0);
        let (m, se) = mean_and_stderr(&sup);
        if m > mid.0 {
            mid = (m, se);
        }
    }
    let (band_lo, band_hi) = if controls.iter().all(|c| c.sigma().is_empty()) {
        (0.0, 0.0)
    } else {
        (band_lo, band_hi)
    };
    let lhs = band_lo.powf(p) * energy_best;
    let rhs = band_hi.powf(p) * energy_best;
    let (mid, mid_stderr) = mid;
    let ratio = |den: f64| (den > 0.0).then(|| mid / den);
    let holds = constants.lower * lhs <= mid + 3.0 * mid_stderr && mid - 3.0 * mid_stderr <= constants.upper * rhs;
    Ok(BdgReport {
        lhs,
        mid,
        rhs,
        mid_stderr,
        lower_ratio: ratio(lhs),
        upper_ratio: ratio(rhs),
        holds,
    })
}
