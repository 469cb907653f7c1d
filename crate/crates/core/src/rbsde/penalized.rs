use nalgebra::DMatrix;
use rayon::prelude::*;

use super::diagnostics::{martingale_defect_paths, DefectReport};
use super::BackwardSpec;
use crate::error::{config, Error, Result};
use crate::gcore::{mean, ProcessSamples};
use crate::gpaths::PathBundle;

/// Least-squares regression settings for the scenario backend.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionConfig {
    /// Total polynomial degree in the standardized state variables.
    pub degree: usize,
    /// Relative singular-value cutoff for the rank test.
    pub rank_tol: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            degree: 4,
            rank_tol: 1e-10,
        }
    }
}

/// Per-sample solution of the penalized equations, one classical BSDE per
/// scenario. `da[k]` is the penalty increment over `[t_k, t_{k+1}]`.
#[derive(Debug, Clone)]
pub struct PathSolution {
    pub y: ProcessSamples,
    pub z: ProcessSamples,
    pub da: ProcessSamples,
    pub barrier: ProcessSamples,
    /// `max_s` of the scenario means of `Y_0`.
    pub y0: f64,
    pub defect: DefectReport,
}

/// Monomials of total degree `≤ degree` in the columns of `vars`.
fn exponents(dims: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; dims]];
    for d in 1..=degree {
        let mut stack = vec![(0usize, d, Vec::<usize>::new())];
        while let Some((j, left, mut acc)) = stack.pop() {
            if j + 1 == dims {
                acc.push(left);
                out.push(acc);
                continue;
            }
            for e in (0..=left).rev() {
                let mut next = acc.clone();
                next.push(e);
                stack.push((j + 1, left - e, next));
            }
        }
    }
    out
}

/// Fitted conditional expectations of `targets` given the regressors.
fn regress(vars: &[Vec<f64>], targets: &[&[f64]], cfg: &RegressionConfig, step: usize) -> Result<Vec<Vec<f64>>> {
    let m = targets[0].len();
    // standardize, dropping variables that are constant across samples
    let kept: Vec<Vec<f64>> = vars
        .iter()
        .filter_map(|v| {
            let mu = mean(v);
            let sd = (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m as f64).sqrt();
            (sd > 1e-12 * (1.0 + mu.abs())).then(|| v.iter().map(|x| (x - mu) / sd).collect())
        })
        .collect();
    if kept.is_empty() {
        return Ok(targets.iter().map(|t| vec![mean(t); m]).collect());
    }
    let exps = exponents(kept.len(), cfg.degree);
    let p = exps.len();
    let design = DMatrix::from_fn(m, p, |r, c| {
        exps[c]
            .iter()
            .zip(&kept)
            .map(|(&e, v)| v[r].powi(e as i32))
            .product::<f64>()
    });
    let rhs = DMatrix::from_fn(m, targets.len(), |r, c| targets[c][r]);
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = cfg.rank_tol * smax.max(f64::MIN_POSITIVE);
    let rank = svd.rank(eps);
    if rank < p {
        return Err(Error::RankDeficient { step, rank, columns: p });
    }
    let coef = svd
        .solve(&rhs, eps)
        .map_err(|e| Error::Config(format!("regression solve failed: {e}")))?;
    let fitted = design * coef;
    Ok((0..targets.len())
        .map(|c| fitted.column(c).iter().copied().collect())
        .collect())
}

/// Penalized scenario backend: for every control in the bundle, the classical
/// BSDE with driver `f + g σ_k² + (1/ε)(Y − L)⁻`, solved backward by
/// regression on polynomials of `(B_{t_k}, X_{t_k})`. The penalty is applied
/// implicitly: below the barrier `Y = (ỹ + λL)/(1 + λ)` with `λ = Δt/ε`.
pub fn solve_rbsde_penalized(
    spec: &BackwardSpec,
    bundle: &PathBundle,
    epsilon: f64,
    x: Option<&ProcessSamples>,
    cfg: &RegressionConfig,
) -> Result<PathSolution> {
    if !(epsilon > 0.0) {
        return config("penalty epsilon must be positive");
    }
    if !spec.drivers_lipschitz() {
        return Err(Error::DriverNotLipschitz);
    }
    let grid = &bundle.grid;
    let n = grid.steps();
    if let Some(x) = x {
        let ok = x.n_scenarios() == bundle.n_scenarios()
            && x.scenarios
                .iter()
                .zip(&bundle.scenarios)
                .all(|(xs, sc)| xs.len() == sc.b.len() && xs.iter().all(|p| p.len() == n + 1));
        if !ok {
            return Err(Error::GridMismatch("state process does not match the paths".into()));
        }
    }
    let times = grid.times();
    let passes = BackwardSpec::picard_passes(grid.max_dt());

    let per_scenario: Vec<Result<[Vec<Vec<f64>>; 4]>> = bundle
        .scenarios
        .par_iter()
        .enumerate()
        .map(|(s, sc)| {
            let m = sc.b.len();
            let state = |k: usize, j: usize| x.map_or(sc.b[j][k], |x| x.scenarios[s][j][k]);
            let mut y = vec![vec![0.0; n + 1]; m];
            let mut z = vec![vec![0.0; n + 1]; m];
            let mut da = vec![vec![0.0; n + 1]; m];
            let mut barrier = vec![vec![0.0; n + 1]; m];
            for j in 0..m {
                for k in 0..=n {
                    let l = spec.barrier.eval(times[k], sc.b[j][k], state(k, j));
                    if l > spec.barrier.cap() + 1e-12 * spec.barrier.cap().abs().max(1.0) {
                        return Err(Error::Audit(format!(
                            "barrier value {l} exceeds declared bound {}",
                            spec.barrier.cap()
                        )));
                    }
                    barrier[j][k] = l;
                }
                let xi = spec.terminal.eval(sc.b[j][n], state(n, j));
                y[j][n] = match spec.terminal_policy {
                    super::TerminalPolicy::ProjectOntoBarrier => xi.max(barrier[j][n]),
                    super::TerminalPolicy::Reject if xi < barrier[j][n] => {
                        return Err(Error::TerminalBelowBarrier {
                            state: sc.b[j][n],
                            terminal: xi,
                            barrier: barrier[j][n],
                        })
                    }
                    super::TerminalPolicy::Reject => xi,
                };
            }
            for k in (0..n).rev() {
                let dt = grid.dt(k);
                let dqv = sc.dqv[k];
                let lambda = dt / epsilon;
                let next: Vec<f64> = (0..m).map(|j| y[j][k + 1]).collect();
                let weighted: Vec<f64> = (0..m).map(|j| next[j] * (sc.b[j][k + 1] - sc.b[j][k])).collect();
                let mut vars = vec![(0..m).map(|j| sc.b[j][k]).collect::<Vec<f64>>()];
                if x.is_some() {
                    vars.push((0..m).map(|j| state(k, j)).collect());
                }
                let fitted = regress(&vars, &[&next, &weighted], cfg, k)?;
                for j in 0..m {
                    let e = fitted[0][j];
                    let zk = if dqv > 0.0 { fitted[1][j] / dqv } else { 0.0 };
                    let arg_x = state(k, j);
                    let mut yt = e;
                    for _ in 0..passes {
                        let a = [arg_x, yt, zk];
                        yt = e + dt * spec.driver_f.eval(times[k], &a) + dqv * spec.driver_g.eval(times[k], &a);
                    }
                    let l = barrier[j][k];
                    let v = if yt < l { (yt + lambda * l) / (1.0 + lambda) } else { yt };
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            step: k,
                            what: format!("penalized value, scenario {s}"),
                        });
                    }
                    y[j][k] = v;
                    z[j][k] = zk;
                    da[j][k] = lambda * (l - v).max(0.0);
                }
            }
            Ok([y, z, da, barrier])
        })
        .collect();

    let (mut ys, mut zs, mut das, mut ls) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in per_scenario {
        let [y, z, da, l] = r?;
        ys.push(y);
        zs.push(z);
        das.push(da);
        ls.push(l);
    }
    let y0 = ys
        .iter()
        .map(|paths| mean(&paths.iter().map(|p| p[0]).collect::<Vec<f64>>()))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sol = PathSolution {
        y: ProcessSamples::new(ys),
        z: ProcessSamples::new(zs),
        da: ProcessSamples::new(das),
        barrier: ProcessSamples::new(ls),
        y0,
        defect: DefectReport::default(),
    };
    sol.defect = martingale_defect_paths(&sol);
    Ok(sol)
}
