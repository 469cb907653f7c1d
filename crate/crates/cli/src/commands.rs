//! One function per subcommand. Each returns its artifacts in memory so a
//! run can be written to disk or compared against a manifest.

use std::fmt::Write as _;
use std::io::Write as _;

use gbsde_core::approx::{audit_ladder, level_schedule, monotone_ladder};
use gbsde_core::fsde::{solve_forward_monotone, LatticeDomain, PathDomain};
use gbsde_core::glattice::{running_sum_expectation, solve_gheat, stability_ratio};
use gbsde_core::gpaths::{bang_bang_family, ito_identity_residuals, qv_envelope, simulate_family};
use gbsde_core::rbsde::{solve_rbsde_penalized, RegressionConfig};
use gbsde_core::rfbsde::{residual_check, solve_rbsde_ladder, solve_rfbgsde};
use gbsde_core::{IterationConfig, LadderConfig, NodeField, PathBundle, ProcessSamples, TimeGrid};
use serde::{Deserialize, Serialize};

use crate::config::{Backend, ExperimentConfig};
use crate::expr::Expr;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Gheat,
    Paths,
    Infconv,
    Forward,
    Rbsde,
    Rfbsde,
}

/// Named output files, in the order they are written.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    fn csv(&mut self, name: &str, schema: &str, write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) {
        let mut buf = format!("# schema: {schema}/1\n").into_bytes();
        write(&mut buf).expect("writing to memory");
        self.files.push((name.to_string(), buf));
    }

    fn report(&mut self, report: Report) {
        self.files.push(("report.txt".into(), report.0.into_bytes()));
    }
}

/// `key: value` lines.
#[derive(Default)]
struct Report(String);

impl Report {
    fn put(&mut self, key: &str, value: impl std::fmt::Display) {
        writeln!(self.0, "{key}: {value}").expect("writing to a string");
    }
}

/// Outcome of a run: artifacts plus an optional failure raised after they
/// were produced (the artifacts are still written).
pub struct Outcome {
    pub artifacts: Artifacts,
    pub failure: Option<CliError>,
}

impl Outcome {
    fn ok(artifacts: Artifacts) -> Self {
        Self {
            artifacts,
            failure: None,
        }
    }
}

pub fn run(experiment: Experiment, cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    match experiment {
        Experiment::Gheat => gheat(cfg),
        Experiment::Paths => paths(cfg),
        Experiment::Infconv => infconv(cfg),
        Experiment::Forward => forward(cfg),
        Experiment::Rbsde => rbsde(cfg),
        Experiment::Rfbsde => rfbsde(cfg),
    }
}

fn gheat(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let phi = Expr::parse(&cfg.gheat.phi, &["x"]).map_err(|e| CliError::Config(format!("gheat.phi: {e}")))?;
    let (geometry, band) = cfg.geometry()?;
    let lattice = solve_gheat(|x| phi.eval(&[x]), &band, &cfg.lattice_config())?;
    let mut out = Artifacts::default();
    out.csv("gheat.csv", "gheat", |w| lattice.write_csv(w));
    let mut r = Report::default();
    r.put("root_value", lattice.root_value());
    r.put("steps", geometry.steps());
    r.put("nodes", geometry.n_nodes());
    r.put("dt", geometry.dt());
    r.put("dx", geometry.dx());
    r.put("stability_ratio", stability_ratio(&band, geometry.dt(), geometry.dx()));
    out.report(r);
    Ok(Outcome::ok(out))
}

fn bundle(cfg: &ExperimentConfig) -> Result<PathBundle, CliError> {
    let band = cfg.band()?;
    let grid = TimeGrid::uniform(cfg.grid.horizon, cfg.grid.steps)?;
    let controls = bang_bang_family(&grid, &band, cfg.family.depth)?;
    Ok(simulate_family(&controls, cfg.family.samples, cfg.seed)?)
}

fn paths(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let band = cfg.band()?;
    let bundle = bundle(cfg)?;
    let (lo, hi) = qv_envelope(&bundle.grid, &band);
    let qv_violations = bundle
        .scenarios
        .iter()
        .flat_map(|sc| sc.qv.iter().zip(lo.iter().zip(&hi)))
        .filter(|(q, (l, h))| q < l || q > h)
        .count();
    let (against_qv, discrete) = ito_identity_residuals(&bundle)?;
    let b_sq_max = bundle
        .scenarios
        .iter()
        .flat_map(|sc| sc.b.iter().flatten())
        .fold(0.0f64, |m, b| m.max(b * b));
    let ito_bound = 5.0 * bundle.grid.max_dt() * b_sq_max;
    let mean_residual = against_qv
        .iter()
        .map(|s| gbsde_core::gcore::mean(s).abs())
        .fold(0.0, f64::max);
    let discrete_residual = discrete.iter().flatten().fold(0.0f64, |m, r| m.max(r.abs()));
    let mut out = Artifacts::default();
    out.csv("paths.csv", "paths", |w| bundle.write_csv(w));
    let mut r = Report::default();
    r.put("scenarios", bundle.n_scenarios());
    r.put("samples", bundle.n_samples());
    r.put("seed", bundle.seed);
    r.put("qv_bound_violations", qv_violations);
    r.put("ito_mean_residual", mean_residual);
    r.put("ito_discrete_residual", discrete_residual);
    r.put("ito_bound", ito_bound);
    out.report(r);
    let failure = if qv_violations > 0 {
        Some(CliError::Audit(format!(
            "{qv_violations} grid points outside the quadratic-variation band"
        )))
    } else if mean_residual > ito_bound || discrete_residual > 1e-9 * (1.0 + b_sq_max) {
        Some(CliError::Audit(format!(
            "Ito identity residual {mean_residual:e} (discrete {discrete_residual:e}) exceeds {ito_bound:e}"
        )))
    } else {
        None
    };
    Ok(Outcome {
        artifacts: out,
        failure,
    })
}

fn infconv(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let ic = &cfg.infconv;
    if ic.points < 2 || ic.x_max.partial_cmp(&ic.x_min) != Some(std::cmp::Ordering::Greater) {
        return Err(CliError::Config("infconv needs points >= 2 and x_max > x_min".into()));
    }
    let base = cfg.infconv_base()?;
    let levels = level_schedule(base.growth(), ic.levels.max(1));
    let xs: Vec<Vec<f64>> = (0..ic.points)
        .map(|i| vec![ic.x_min + (ic.x_max - ic.x_min) * i as f64 / (ic.points - 1) as f64])
        .collect();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = xs.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect();
    let grid = cfg.candidate_grid();
    let table = monotone_ladder(&base, &levels, 0.0, &xs, &grid)?;
    let audit = audit_ladder(&base, &levels, 0.0, &xs, &pairs, &grid)?;
    let mut out = Artifacts::default();
    out.csv("infconv.csv", "infconv", |w| {
        writeln!(w, "x,f,n,f_n")?;
        for (level, row) in table.levels.iter().zip(&table.values) {
            for ((x, f), v) in xs.iter().zip(&table.base).zip(row) {
                writeln!(w, "{},{f},{level},{v}", x[0])?;
            }
        }
        Ok(())
    });
    let mut r = Report::default();
    r.put("growth", base.growth());
    r.put("levels", format_list(&levels));
    r.put("growth_excess", audit.growth_excess);
    r.put("monotone_violation", audit.monotone_violation);
    r.put("excess_over_base", audit.excess_over_base);
    r.put("lipschitz_ok", audit.lipschitz_ok());
    r.put("top_gap", audit.top_gap);
    out.report(r);
    let failure = if audit.monotone_violation > 1e-12
        || audit.excess_over_base > 1e-12
        || audit.growth_excess > 1e-9
        || !audit.lipschitz_ok()
    {
        Some(CliError::Audit("inf-convolution ladder audit failed".into()))
    } else {
        None
    };
    Ok(Outcome {
        artifacts: out,
        failure,
    })
}

fn format_list(v: &[f64]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

fn ladder_config(cfg: &ExperimentConfig) -> LadderConfig {
    LadderConfig {
        max_levels: cfg.tolerances.ladder_levels,
        tol: cfg.tolerances.tol,
        slack_factor: cfg.tolerances.slack_factor,
        ..LadderConfig::default()
    }
}

fn forward(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let spec = cfg.forward_spec(cfg.grid.horizon)?;
    let ladder = ladder_config(cfg);
    let mut out = Artifacts::default();
    let mut r = Report::default();
    let report = match cfg.backend {
        Backend::Lattice => {
            let (geometry, band) = cfg.geometry()?;
            let y = geometry.tabulate(|_, _| cfg.forward.y);
            let domain = LatticeDomain {
                geometry: &geometry,
                band: &band,
                y: Some(&y),
            };
            let (x, report) = solve_forward_monotone(&spec, &domain, &ladder)?;
            out.csv("forward.csv", "forward-lattice", |w| write_field(w, &geometry, &x));
            let mut terms = vec![vec![0.0; geometry.n_nodes()]; geometry.steps()];
            terms.push(x.layers[geometry.steps()].clone());
            let upper = running_sum_expectation(&geometry, &band, &terms)[0][geometry.root()];
            r.put("upper_expectation_x_t", upper);
            r.put("sup_abs_x", x.sup_abs());
            report
        }
        Backend::Scenario => {
            let bundle = bundle(cfg)?;
            let steps = bundle.grid.steps();
            let y = ProcessSamples::constant(cfg.forward.y, bundle.n_scenarios(), bundle.n_samples(), steps + 1);
            let domain = PathDomain {
                bundle: &bundle,
                y: Some(&y),
            };
            let (x, report) = solve_forward_monotone(&spec, &domain, &ladder)?;
            out.csv("forward.csv", "forward-paths", |w| {
                write_samples(w, "x", &bundle.grid, &[&x])
            });
            let upper = x
                .scenarios
                .iter()
                .map(|s| gbsde_core::gcore::mean(&s.iter().map(|p| p[steps]).collect::<Vec<_>>()))
                .fold(f64::NEG_INFINITY, f64::max);
            r.put("upper_expectation_x_t", upper);
            r.put("sup_abs_x", x.sup_abs());
            report
        }
    };
    r.put("levels", format_list(&report.levels));
    r.put("deltas", format_list(&report.deltas));
    r.put("converged", report.converged);
    out.report(r);
    Ok(Outcome::ok(out))
}

fn write_field(w: &mut Vec<u8>, geometry: &gbsde_core::LatticeGeometry, x: &NodeField) -> std::io::Result<()> {
    writeln!(w, "t,b,x")?;
    for (k, t) in geometry.times().iter().enumerate() {
        for (i, b) in geometry.nodes().iter().enumerate() {
            writeln!(w, "{t},{b},{}", x.layers[k][i])?;
        }
    }
    Ok(())
}

/// Columns `scenario,sample,t` followed by one column per process.
fn write_samples(w: &mut Vec<u8>, names: &str, grid: &TimeGrid, procs: &[&ProcessSamples]) -> std::io::Result<()> {
    writeln!(w, "scenario,sample,t,{names}")?;
    for s in 0..procs[0].n_scenarios() {
        for m in 0..procs[0].n_samples(s) {
            for (k, t) in grid.times().iter().enumerate() {
                write!(w, "{s},{m},{t}")?;
                for p in procs {
                    write!(w, ",{}", p.scenarios[s][m][k])?;
                }
                writeln!(w)?;
            }
        }
    }
    Ok(())
}

fn rbsde(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let (geometry, band) = cfg.geometry()?;
    let spec = cfg.backward_spec(&geometry)?;
    let mut out = Artifacts::default();
    let mut r = Report::default();
    let (defect, contact_tol) = match cfg.backend {
        Backend::Lattice => {
            let (sol, ladder) = solve_rbsde_ladder(&spec, &geometry, &band, None, &ladder_config(cfg))?;
            out.csv("rbsde.csv", "rbsde-lattice", |w| sol.write_csv(w));
            r.put("y0", sol.y0());
            r.put("terminal_lift", sol.terminal_lift);
            r.put("levels", format_list(&ladder.levels));
            r.put("ladder_converged", ladder.converged);
            (sol.defect, 2.0 * geometry.dx())
        }
        Backend::Scenario => {
            let bundle = bundle(cfg)?;
            let sol = solve_rbsde_penalized(&spec, &bundle, cfg.rbsde.epsilon, None, &RegressionConfig::default())?;
            out.csv("rbsde.csv", "rbsde-paths", |w| {
                write_samples(w, "y,z,da", &bundle.grid, &[&sol.y, &sol.z, &sol.da])
            });
            r.put("y0", sol.y0);
            r.put("epsilon", cfg.rbsde.epsilon);
            // the penalty lets Y dip below L by O(ε)
            (sol.defect, 2.0 * cfg.rbsde.epsilon.sqrt())
        }
    };
    r.put("defect", defect.defect);
    r.put("pathwise_defect", defect.pathwise);
    r.put("a_total", defect.a_total);
    r.put("contact_gap", defect.contact_gap);
    r.put("contact_tolerance", contact_tol);
    out.report(r);
    Ok(Outcome::ok(out))
}

fn rfbsde(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    if cfg.backend != Backend::Lattice {
        return Err(CliError::Config("rfbsde runs on the lattice backend only".into()));
    }
    let (geometry, band) = cfg.geometry()?;
    let problem = cfg.coupled_problem(&geometry)?;
    let mut icfg = IterationConfig::new(cfg.tolerances.tol, cfg.tolerances.max_outer);
    icfg.slack_factor = cfg.tolerances.slack_factor;
    icfg.ladder.max_levels = cfg.tolerances.ladder_levels;
    icfg.ladder.slack_factor = cfg.tolerances.slack_factor;
    let (sol, report) = solve_rfbgsde(&problem, &geometry, &band, &icfg)?;
    let residuals = residual_check(&problem, &sol)?;
    let mut out = Artifacts::default();
    out.csv("iterations.csv", "rfbsde-iterations", |w| report.write_csv(w));
    out.csv("solution.csv", "rfbsde-solution", |w| {
        writeln!(w, "t,b,x,y,z,da,s,u")?;
        let bw = &sol.backward;
        for (k, t) in geometry.times().iter().enumerate() {
            for (i, b) in geometry.nodes().iter().enumerate() {
                writeln!(
                    w,
                    "{t},{b},{},{},{},{},{},{}",
                    sol.x.layers[k][i],
                    bw.y.layers[k][i],
                    bw.z.layers[k][i],
                    bw.da.layers[k][i],
                    sol.s.layers[k][i],
                    sol.u.layers[k][i]
                )?;
            }
        }
        Ok(())
    });
    let mut text = Vec::new();
    report.write_text(&mut text).expect("writing to memory");
    let mut r = Report(String::from_utf8(text).expect("utf-8 report"));
    r.put("problem", &cfg.problem.builtin);
    r.put("y0", sol.y0());
    r.put("x0", sol.x0());
    r.put("residual_backward", residuals.backward);
    r.put("residual_forward", residuals.forward);
    r.put("floor_gap", residuals.floor_gap);
    r.put("defect", residuals.defect);
    out.report(r);
    let failure = if !report.converged {
        Some(CliError::NotConverged(format!(
            "no convergence within {} outer iterations",
            cfg.tolerances.max_outer
        )))
    } else if !report.z_norm_guard() {
        Some(CliError::Audit("Z-norm exceeded 4x its first-iteration value".into()))
    } else {
        None
    };
    Ok(Outcome {
        artifacts: out,
        failure,
    })
}
