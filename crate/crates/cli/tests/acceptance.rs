//! Acceptance criteria, one line each on stderr. Lines bypass the test
//! harness capture so they appear in plain `cargo test` output.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gbsde_core::approx::{
    audit_ladder, level_schedule, monotone_ladder, CandidateGrid, GrowthBoundedFunction, InfConvApprox,
};
use gbsde_core::gcore::{sublinear_expectation, EmpiricalLaw, MeasureFamily, TimeGrid};
use gbsde_core::glattice::{solve_gheat, LatticeConfig, LatticeGeometry};
use gbsde_core::gpaths::{bang_bang_family, ito_identity_residuals, qv_envelope, simulate_family};
use gbsde_core::rbsde::{solve_rbsde_lattice, BackwardSpec, Barrier, Terminal};
use gbsde_core::rfbsde::{problems, residual_check, solve_rfbgsde, IterationConfig};
use gbsde_core::VolatilityBand;
use oracles::{picard_coupled, snell_brute_force, sup_distance, CoupledCoefficients};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn band() -> VolatilityBand {
    VolatilityBand::new(0.5, 1.0).unwrap()
}

fn lattice(steps: usize) -> (LatticeGeometry, VolatilityBand) {
    let band = band();
    (
        LatticeGeometry::new(&band, &LatticeConfig::new(1.0, steps)).unwrap(),
        band,
    )
}

fn axioms() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut order_ok = true;
    for _ in 0..1000 {
        let outcomes = 12;
        let members = rng.random_range(1..6);
        let laws = (0..members)
            .map(|_| {
                let w: Vec<f64> = (0..outcomes).map(|_| rng.random_range(0.01..1.0)).collect();
                let total: f64 = w.iter().sum();
                EmpiricalLaw::new((0..outcomes).zip(w).map(|(o, p)| (o, p / total)).collect()).unwrap()
            })
            .collect();
        let family = MeasureFamily::new(laws).unwrap();
        let x: Vec<f64> = (0..outcomes).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y: Vec<f64> = (0..outcomes).map(|_| rng.random_range(-10.0..10.0)).collect();
        let e = |v: &[f64]| sublinear_expectation(&family, |&o: &usize| v[o]);
        let (ex, ey) = (e(&x), e(&y));
        // monotonicity against a pointwise larger payoff
        let above: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b.abs()).collect();
        order_ok &= ex <= e(&above) + 1e-12;
        let c = rng.random_range(-5.0..5.0);
        worst = worst.max((e(&vec![c; outcomes]) - c).abs());
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        worst = worst.max(e(&sum) - ex - ey);
        let lambda = rng.random_range(0.0..20.0);
        let scaled: Vec<f64> = x.iter().map(|a| lambda * a).collect();
        worst = worst.max((e(&scaled) - lambda * ex).abs());
        // translation by constants
        let shifted: Vec<f64> = x.iter().map(|a| a + c).collect();
        worst = worst.max((e(&shifted) - ex - c).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        order_ok && worst <= 1e-12 && secs < 5.0,
        format!("1000 pairs, worst axiom residual {worst:.2e}, monotone {order_ok}, {secs:.2}s"),
    )
}

fn moments() -> Verdict {
    let start = Instant::now();
    let band = band();
    let cfg = LatticeConfig::new(1.0, 200);
    let up = solve_gheat(|x| x * x, &band, &cfg).unwrap().root_value();
    let down = -solve_gheat(|x| -x * x, &band, &cfg).unwrap().root_value();
    let first = solve_gheat(|x| x, &band, &cfg).unwrap();
    let mean_gap = first.root_value().abs();
    let secs = start.elapsed().as_secs_f64();
    let rel_up = (up - band.var_hi()).abs() / band.var_hi();
    let rel_down = (down - band.var_lo()).abs() / band.var_lo();

    // collapsed band against a classical explicit heat scheme
    let sigma = 0.75;
    let flat = VolatilityBand::collapsed(sigma).unwrap();
    let phi = |x: f64| (2.0 * x).cos() + x.abs();
    let g = solve_gheat(phi, &flat, &cfg).unwrap();
    let geo = &g.geometry;
    let (dt, dx) = (geo.dt(), geo.dx());
    let mut u: Vec<f64> = geo.nodes().iter().map(|&x| phi(x)).collect();
    let mut collapse: f64 = 0.0;
    for k in (0..geo.steps()).rev() {
        let m = u.len();
        let next: Vec<f64> = (0..m)
            .map(|i| {
                let d2 = if i == 0 || i == m - 1 {
                    0.0
                } else {
                    (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (dx * dx)
                };
                u[i] + dt * 0.5 * sigma * sigma * d2
            })
            .collect();
        u = next;
        collapse = collapse.max(sup_distance(&[u.clone()], &[g.values.layers[k].clone()]));
    }
    verdict(
        rel_up <= 0.02 && rel_down <= 0.02 && mean_gap <= geo.dx() && collapse <= 1e-12 && secs < 2.0,
        format!(
            "E[B^2] = {up:.5} ({:.2}%), -E[-B^2] = {down:.5} ({:.2}%), |E[B]| = {mean_gap:.1e}, collapse {collapse:.1e}, {secs:.2}s",
            100.0 * rel_up,
            100.0 * rel_down
        ),
    )
}

fn quadratic_variation() -> Verdict {
    let band = band();
    let grid = TimeGrid::uniform(1.0, 200).unwrap();
    let controls = bang_bang_family(&grid, &band, 3).unwrap();
    let bundle = simulate_family(&controls, 400, 5).unwrap();
    let (lo, hi) = qv_envelope(&grid, &band);
    let outside = bundle
        .scenarios
        .iter()
        .flat_map(|sc| sc.qv.iter().zip(lo.iter().zip(&hi)))
        .filter(|(q, (l, h))| q < l || q > h)
        .count();
    let (against_qv, discrete) = ito_identity_residuals(&bundle).unwrap();
    let b_sq_max = bundle
        .scenarios
        .iter()
        .flat_map(|sc| sc.b.iter().flatten())
        .fold(0.0f64, |m, b| m.max(b * b));
    let bound = 5.0 * grid.max_dt() * b_sq_max;
    let mean_residual = against_qv
        .iter()
        .map(|s| gbsde_core::gcore::mean(s).abs())
        .fold(0.0, f64::max);
    let exact = discrete.iter().flatten().fold(0.0f64, |m, r| m.max(r.abs()));
    verdict(
        outside == 0 && mean_residual <= bound && exact <= 1e-12 * (1.0 + b_sq_max),
        format!(
            "{} controls, {outside} QV points outside the band, Ito residual mean {mean_residual:.2e} <= {bound:.2e}, discrete identity {exact:.1e}",
            controls.len()
        ),
    )
}

fn square_oracle(x: f64, n: f64) -> f64 {
    let y = x.signum() * x.abs().min(n / 2.0);
    y * y + n * (x - y).abs()
}

fn ladder() -> Verdict {
    let start = Instant::now();
    let grid = CandidateGrid::default();
    let points: Vec<Vec<f64>> = (0..=40).map(|i| vec![-2.0 + 0.1 * i as f64]).collect();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = points.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect();
    // growth constants hold on [-2, 2]; x² has no global linear bound
    let cases = [
        ("x^2", GrowthBoundedFunction::new(1, 4.0 / 3.0, |_, v| v[0] * v[0])),
        (
            "|x|^1.5",
            GrowthBoundedFunction::new(1, 1.0, |_, v| v[0].abs().powf(1.5)),
        ),
        (
            "tanh(sqrt|x|)+x/2",
            GrowthBoundedFunction::new(1, 1.0, |_, v| v[0].abs().sqrt().tanh() + 0.5 * v[0]),
        ),
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    let mut oracle_err: f64 = 0.0;
    for (name, f) in &cases {
        let levels = level_schedule(f.growth(), 6);
        let audit = audit_ladder(f, &levels, 0.0, &points, &pairs, &grid).unwrap();
        // strong convergence along x_n = x + 1/n
        let gaps: Vec<f64> = levels
            .iter()
            .map(|&n| {
                let a = InfConvApprox::new(f.clone(), n, grid.clone()).unwrap();
                points
                    .iter()
                    .map(|x| (a.eval(0.0, &[x[0] + 1.0 / n]) - f.eval(0.0, x)).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        let shrinking = gaps.windows(2).all(|w| w[1] <= w[0] + 1e-12) && gaps[gaps.len() - 1] < 0.25 * gaps[0];
        let case_ok = audit.growth_excess <= 1e-12
            && audit.monotone_violation <= 1e-12
            && audit.excess_over_base <= 1e-12
            && audit.lipschitz_ok()
            && shrinking;
        ok &= case_ok;
        notes.push(format!("{name} {}", if case_ok { "ok" } else { "FAILED" }));
        if *name == "x^2" {
            let table = monotone_ladder(f, &levels, 0.0, &points, &grid).unwrap();
            for (n, row) in levels.iter().zip(&table.values) {
                for (x, v) in points.iter().zip(row) {
                    oracle_err = oracle_err.max((v - square_oracle(x[0], *n)).abs());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        ok && oracle_err <= 1e-9 && secs < 5.0,
        format!("{}, x^2 oracle error {oracle_err:.1e}, {secs:.2}s", notes.join(", ")),
    )
}

fn put(b: f64) -> f64 {
    (1.0 - b.exp()).max(0.0)
}

fn reflected() -> Verdict {
    let rate = 0.2;
    let discount = GrowthBoundedFunction::new(3, rate, move |_, v| -rate * v[1])
        .with_lipschitz(rate)
        .ignoring(0);
    let spec = BackwardSpec::with_driver(Terminal::of_b(put), discount, Barrier::new(1.0, |_, b, _| put(b))).unwrap();
    let (geo, band) = lattice(3);
    let sol = solve_rbsde_lattice(&spec, &geo, &band, None).unwrap();
    // two inner passes at this step: the continuation is scaled by 1 − a + a²
    let a = rate * geo.dt();
    let oracle = snell_brute_force(&band, geo.dt(), geo.dx(), 3, 1.0 - a + a * a, |_, b| put(b), put);
    let snell_gap = (sol.y0() - oracle).abs();

    let (geo, band) = lattice(200);
    let sol = solve_rbsde_lattice(&spec, &geo, &band, None).unwrap();
    let scale = sol.y.sup_abs();
    let tol = 2.0 * geo.dx();
    let mut contact: f64 = 0.0;
    for k in 0..=geo.steps() {
        for i in 0..geo.n_nodes() {
            if sol.da.layers[k][i] > 0.0 {
                contact = contact.max(sol.y.layers[k][i] - sol.barrier.layers[k][i]);
            }
        }
    }
    verdict(
        snell_gap <= 1e-12 && sol.defect.a_total > 0.0 && sol.defect.defect <= 1e-3 * scale && contact <= tol,
        format!(
            "3-step Snell gap {snell_gap:.1e}, N=200 defect {:.2e} <= {:.2e}, contact gap {contact:.2e} <= {tol:.2e}, A_T {:.3}",
            sol.defect.defect,
            1e-3 * scale,
            sol.defect.a_total
        ),
    )
}

fn chains_and_envelopes() -> Verdict {
    let (geo, band) = lattice(100);
    let p = problems::coupled_tanh();
    let (sol, rep) = solve_rfbgsde(&p, &geo, &band, &IterationConfig::new(1e-5, 20)).unwrap();
    let chain = rep.records.iter().map(|r| r.mono_x.max(r.mono_y)).fold(0.0, f64::max);
    let envelope = rep
        .records
        .iter()
        .map(|r| (-r.margin_s).max(-r.margin_u))
        .fold(f64::NEG_INFINITY, f64::max);
    let y0_over_u = sol.y_lower.max_excess_over(&sol.u);
    verdict(
        chain <= rep.slack && envelope <= rep.slack && y0_over_u <= 0.0,
        format!(
            "{} iterations, worst chain violation {chain:.2e}, worst envelope breach {envelope:.2e}, slack {:.2e}, max(Y0 - U) {y0_over_u:.2e}",
            rep.records.len(),
            rep.slack
        ),
    )
}

fn picard_gap(p: &gbsde_core::CoupledProblem, tol: f64, c: &CoupledCoefficients) -> (f64, bool) {
    let (geo, band) = lattice(100);
    let (sol, rep) = solve_rfbgsde(p, &geo, &band, &IterationConfig::new(tol, 40)).unwrap();
    let (x, y) = picard_coupled(c, &geo, &band, 200);
    (
        sup_distance(&x, &sol.x.layers).max(sup_distance(&y, &sol.backward.y.layers)),
        rep.converged,
    )
}

fn convergence() -> Verdict {
    let start = Instant::now();
    let (geo, band) = lattice(100);
    let p = problems::coupled_tanh();
    let (sol, rep) = solve_rfbgsde(&p, &geo, &band, &IterationConfig::new(1e-5, 20)).unwrap();
    let res = residual_check(&p, &sol).unwrap();
    let b = |x: f64, y: f64| 0.3 * y.atan() - 0.1 * x;
    let f = |x: f64, y: f64, z: f64| 0.3 * x.atan() - 0.2 * y + 0.1 * z.abs();
    let xi = |b: f64| b;
    let c = CoupledCoefficients {
        x0: 0.0,
        b: &b,
        sigma: 1.0,
        f: &f,
        terminal: &xi,
        floor: -1.0,
    };
    let (gap, lip_converged) = picard_gap(&problems::lipschitz_coupled(), 1e-6, &c);
    let secs = start.elapsed().as_secs_f64();
    let at = rep.converged_at;
    verdict(
        at.is_some_and(|n| n <= 20)
            && res.backward <= 1e-4
            && res.forward <= 1e-4
            && lip_converged
            && gap <= 1e-4
            && secs < 60.0,
        format!(
            "tanh converged at {at:?}, residuals {:.1e}/{:.1e}, Lipschitz case vs Picard {gap:.1e}, {secs:.1}s",
            res.backward, res.forward
        ),
    )
}

fn z_bound() -> Verdict {
    let (geo, band) = lattice(100);
    let mut ok = true;
    let mut notes = Vec::new();
    for name in problems::NAMES {
        let p = problems::builtin(name).unwrap();
        let (_, rep) = solve_rfbgsde(&p, &geo, &band, &IterationConfig::new(1e-5, 20)).unwrap();
        let first = rep.records[0].z_norm;
        let worst = rep.records.iter().map(|r| r.z_norm).fold(0.0, f64::max);
        ok &= rep.z_norm_guard();
        notes.push(format!("{name} max/first {:.3}", worst / first));
    }
    verdict(ok, notes.join(", "))
}

fn gbsde(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gbsde")).args(args).output().unwrap()
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    std::fs::write(
        &cfg,
        "seed = 42\n[grid]\nsteps = 40\n[family]\ndepth = 2\nsamples = 300\n[problem]\nbuiltin = \"decoupled\"\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let mut ok = true;
    let mut compared = 0;
    for (sub, backend) in [
        ("paths", "lattice"),
        ("rbsde", "scenario"),
        ("forward", "scenario"),
        ("rfbsde", "lattice"),
    ] {
        let first = tmp.path().join(format!("{sub}-first"));
        let replay = tmp.path().join(format!("{sub}-replay"));
        let run = gbsde(&[
            sub,
            "--config",
            cfg,
            "--backend",
            backend,
            "--out",
            first.to_str().unwrap(),
        ]);
        let manifest = first.join("manifest.toml");
        let audit = gbsde(&[
            "audit",
            "--config",
            manifest.to_str().unwrap(),
            "--out",
            replay.to_str().unwrap(),
        ]);
        let (a, b) = (csv_files(&first), csv_files(&replay));
        compared += a.len();
        ok &= run.status.success() && audit.status.success() && !a.is_empty() && a == b;
    }
    verdict(
        ok,
        format!("{compared} CSV files replayed from manifests byte for byte"),
    )
}

#[test]
fn acceptance() {
    type Check = fn() -> Verdict;
    let criteria: [(&str, Check); 9] = [
        ("sublinear expectation axioms", axioms),
        ("G-normal moments and band collapse", moments),
        ("quadratic variation bounds and Ito identity", quadratic_variation),
        ("inf-convolution ladder audits", ladder),
        ("reflected solve against Snell envelope", reflected),
        ("monotone chains and envelopes", chains_and_envelopes),
        ("coupled convergence and fixed point", convergence),
        ("Z-norm bound", z_bound),
        ("determinism from manifests", determinism),
    ];
    let mut stderr = std::io::stderr();
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        writeln!(stderr, "criterion {}: {tag} {name}: {}", i + 1, v.detail).unwrap();
        if !v.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
