//! Volatility band, the G-function and sublinear expectations over finite
//! families of classical laws.
//!
//! A G-expectation is the upper envelope `Ê[ξ] = max_P E_P[ξ]` of a set of
//! probability measures. Here that set is always finite: either a list of
//! weighted empirical laws or the laws induced by a finite family of
//! piecewise-constant volatility controls (see [`crate::gpaths`]). On a finite
//! family the four sublinear-expectation axioms hold exactly, up to
//! floating-point rounding.

use crate::error::{config, Result};

/// The uncertainty interval `[σ̲, σ̄]` of the G-Brownian motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolatilityBand {
    sigma_lo: f64,
    sigma_hi: f64,
}

impl VolatilityBand {
    pub fn new(sigma_lo: f64, sigma_hi: f64) -> Result<Self> {
        if !(sigma_lo.is_finite() && sigma_hi.is_finite()) || sigma_lo <= 0.0 || sigma_lo > sigma_hi {
            return config(format!(
                "volatility band requires 0 < sigma_lo <= sigma_hi, got [{sigma_lo}, {sigma_hi}]"
            ));
        }
        Ok(Self { sigma_lo, sigma_hi })
    }

    /// A degenerate band, i.e. classical Brownian motion with volatility `sigma`.
    pub fn collapsed(sigma: f64) -> Result<Self> {
        Self::new(sigma, sigma)
    }

    pub fn sigma_lo(&self) -> f64 {
        self.sigma_lo
    }

    pub fn sigma_hi(&self) -> f64 {
        self.sigma_hi
    }

    pub fn var_lo(&self) -> f64 {
        self.sigma_lo * self.sigma_lo
    }

    pub fn var_hi(&self) -> f64 {
        self.sigma_hi * self.sigma_hi
    }

    pub fn contains(&self, sigma: f64) -> bool {
        sigma >= self.sigma_lo && sigma <= self.sigma_hi
    }

    pub fn g(&self, a: f64) -> f64 {
        g_function(a, self)
    }
}

/// `G(a) = ½(σ̄² a⁺ − σ̲² a⁻)`.
pub fn g_function(a: f64, band: &VolatilityBand) -> f64 {
    if a >= 0.0 {
        0.5 * band.var_hi() * a
    } else {
        0.5 * band.var_lo() * a
    }
}

/// Strictly increasing time points `0 = t_0 < … < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return config("time grid needs at least the initial time");
        }
        if times[0] != 0.0 {
            return config("time grid must start at 0");
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return config("time grid must be finite and strictly increasing");
        }
        Ok(Self { times })
    }

    /// `steps` equal steps on `[0, horizon]`. `steps == 0` gives the
    /// single-point grid `{0}`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Self::new(vec![0.0]);
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return config(format!("horizon must be positive, got {horizon}"));
        }
        let dt = horizon / steps as f64;
        let mut times: Vec<f64> = (0..steps).map(|k| k as f64 * dt).collect();
        times.push(horizon);
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    pub fn max_dt(&self) -> f64 {
        (0..self.steps()).map(|k| self.dt(k)).fold(0.0, f64::max)
    }
}

/// Sum in a fixed binary-tree order, so the result does not depend on how a
/// caller split the work.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean through [`pairwise_sum`].
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample mean together with its standard error.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return (m, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

const PROBABILITY_TOL: f64 = 1e-12;

/// A discrete law: outcomes with probabilities summing to one.
#[derive(Debug, Clone)]
pub struct EmpiricalLaw<T> {
    atoms: Vec<(T, f64)>,
}

impl<T> EmpiricalLaw<T> {
    pub fn new(atoms: Vec<(T, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return config("empirical law has no atoms");
        }
        if atoms.iter().any(|(_, p)| !(*p >= 0.0) || !p.is_finite()) {
            return config("probabilities must be finite and non-negative");
        }
        let probs: Vec<f64> = atoms.iter().map(|(_, p)| *p).collect();
        let total = pairwise_sum(&probs);
        if (total - 1.0).abs() > PROBABILITY_TOL {
            return config(format!("probabilities sum to {total}, not 1"));
        }
        Ok(Self { atoms })
    }

    /// Equal weight on every outcome (a Monte-Carlo sample).
    pub fn uniform(outcomes: Vec<T>) -> Result<Self> {
        if outcomes.is_empty() {
            return config("empirical law has no atoms");
        }
        let p = 1.0 / outcomes.len() as f64;
        let atoms = outcomes.into_iter().map(|o| (o, p)).collect();
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &[(T, f64)] {
        &self.atoms
    }

    /// Classical expectation `E_P[payoff]`.
    pub fn expectation<F: Fn(&T) -> f64>(&self, payoff: F) -> f64 {
        let terms: Vec<f64> = self.atoms.iter().map(|(o, p)| p * payoff(o)).collect();
        pairwise_sum(&terms)
    }
}

/// Finite, non-empty set of laws standing in for the representing set of a
/// G-expectation.
#[derive(Debug, Clone)]
pub struct MeasureFamily<T> {
    members: Vec<EmpiricalLaw<T>>,
}

impl<T> MeasureFamily<T> {
    pub fn new(members: Vec<EmpiricalLaw<T>>) -> Result<Self> {
        if members.is_empty() {
            return config("measure family is empty");
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[EmpiricalLaw<T>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// `Ê[payoff] = max_P E_P[payoff]` over the family.
pub fn sublinear_expectation<T, F: Fn(&T) -> f64>(family: &MeasureFamily<T>, payoff: F) -> f64 {
    family
        .members
        .iter()
        .map(|law| law.expectation(&payoff))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the member attaining the maximum, with its value.
pub fn argmax_expectation<T, F: Fn(&T) -> f64>(family: &MeasureFamily<T>, payoff: F) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, law) in family.members.iter().enumerate() {
        let v = law.expectation(&payoff);
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Sampled process values indexed `[scenario][sample][time]`.
///
/// Each scenario is one classical law (equal weights over its samples); the
/// scenarios together form the measure family.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessSamples {
    pub scenarios: Vec<Vec<Vec<f64>>>,
}

impl ProcessSamples {
    pub fn new(scenarios: Vec<Vec<Vec<f64>>>) -> Self {
        Self { scenarios }
    }

    /// A process that is the same constant for every scenario, sample and time.
    pub fn constant(value: f64, scenarios: usize, samples: usize, len: usize) -> Self {
        Self {
            scenarios: vec![vec![vec![value; len]; samples]; scenarios],
        }
    }

    pub fn n_scenarios(&self) -> usize {
        self.scenarios.len()
    }

    pub fn n_samples(&self, scenario: usize) -> usize {
        self.scenarios[scenario].len()
    }

    /// Common per-sample length, if all samples agree.
    pub fn path_len(&self) -> Option<usize> {
        let first = self.scenarios.first()?.first()?.len();
        self.scenarios
            .iter()
            .flatten()
            .all(|p| p.len() == first)
            .then_some(first)
    }

    /// Maximum absolute value over everything.
    pub fn sup_abs(&self) -> f64 {
        self.scenarios
            .iter()
            .flatten()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// The family whose members are the per-scenario empirical laws over
    /// sample paths.
    pub fn family(&self) -> Result<MeasureFamily<&[f64]>> {
        let members = self
            .scenarios
            .iter()
            .map(|s| EmpiricalLaw::uniform(s.iter().map(Vec::as_slice).collect()))
            .collect::<Result<Vec<_>>>()?;
        MeasureFamily::new(members)
    }
}

/// Which discrete process norm [`discrete_norm`] computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// `(Ê[(Σ|η_k|²Δt_k)^{p/2}])^{1/p}`, the H/M-type norm.
    Integrated,
    /// `(Ê[sup_k |η_k|^p])^{1/p}`, the S-type norm.
    Sup,
}

/// Discrete surrogate of the process norms used in a-priori diagnostics.
///
/// In [`NormMode::Integrated`] the process is treated as a step process: the
/// value at index `k` holds on `[t_k, t_{k+1})`, so samples of length `N` or
/// `N + 1` are accepted and the last grid value is ignored.
pub fn discrete_norm(process: &ProcessSamples, grid: &TimeGrid, p: f64, mode: NormMode) -> Result<f64> {
    if !(p >= 1.0) {
        return config(format!("norm exponent must be >= 1, got {p}"));
    }
    let steps = grid.steps();
    let len = process
        .path_len()
        .ok_or_else(|| crate::Error::GridMismatch("ragged process samples".into()))?;
    if mode == NormMode::Integrated && len != steps && len != steps + 1 {
        return Err(crate::Error::GridMismatch(format!(
            "process length {len} does not match {steps} steps"
        )));
    }
    let family = process.family()?;
    let value = match mode {
        NormMode::Integrated => sublinear_expectation(&family, |path| {
            let terms: Vec<f64> = (0..steps).map(|k| path[k] * path[k] * grid.dt(k)).collect();
            pairwise_sum(&terms).powf(p / 2.0)
        }),
        NormMode::Sup => {
            sublinear_expectation(&family, |path| path.iter().fold(0.0_f64, |m, v| m.max(v.abs())).powf(p))
        }
    };
    Ok(value.powf(1.0 / p))
}
