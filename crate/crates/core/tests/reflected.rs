mod oracles;

use gbsde_core::approx::GrowthBoundedFunction;
use gbsde_core::gcore::TimeGrid;
use gbsde_core::glattice::{LatticeConfig, LatticeGeometry};
use gbsde_core::gpaths::{bang_bang_family, simulate_family};
use gbsde_core::rbsde::{
    solve_bsde_lattice, solve_rbsde_lattice, solve_rbsde_penalized, BackwardSpec, Barrier, RegressionConfig, Terminal,
    TerminalPolicy,
};
use gbsde_core::VolatilityBand;
use oracles::snell_brute_force;

fn band() -> VolatilityBand {
    VolatilityBand::new(0.5, 1.0).unwrap()
}

fn put(b: f64) -> f64 {
    (1.0 - b.exp()).max(0.0)
}

fn discounting(rate: f64) -> GrowthBoundedFunction {
    GrowthBoundedFunction::new(3, rate, move |_, v| -rate * v[1])
        .with_lipschitz(rate)
        .ignoring(0)
}

#[test]
fn three_step_lattice_equals_brute_force_snell() {
    let band = band();
    let geo = LatticeGeometry::new(&band, &LatticeConfig::new(1.0, 3)).unwrap();
    let (dt, dx) = (geo.dt(), geo.dx());
    // two inner passes at this step size: the continuation is scaled by 1 − a + a²
    let a = 0.2 * dt;
    let spec = BackwardSpec::with_driver(
        Terminal::of_b(put),
        discounting(0.2),
        Barrier::new(1.0, |_, b, _| put(b)),
    )
    .unwrap();
    let sol = solve_rbsde_lattice(&spec, &geo, &band, None).unwrap();
    let oracle = snell_brute_force(&band, dt, dx, 3, 1.0 - a + a * a, |_, b| put(b), put);
    assert!((sol.y0() - oracle).abs() < 1e-12, "{} vs {oracle}", sol.y0());
    assert_eq!(sol.defect.defect, 0.0);

    let spec = BackwardSpec::with_driver(
        Terminal::of_b(|b| b),
        GrowthBoundedFunction::zero(3),
        Barrier::constant(0.0),
    )
    .unwrap()
    .with_policy(TerminalPolicy::ProjectOntoBarrier);
    let sol = solve_rbsde_lattice(&spec, &geo, &band, None).unwrap();
    let oracle = snell_brute_force(&band, dt, dx, 3, 1.0, |_, _| 0.0, |b| b.max(0.0));
    assert!((sol.y0() - oracle).abs() < 1e-12);
    assert!(sol.y.layers.iter().flatten().all(|v| *v >= 0.0));
}

#[test]
fn active_barrier_at_two_hundred_steps() {
    let band = band();
    let geo = LatticeGeometry::new(&band, &LatticeConfig::new(1.0, 200)).unwrap();
    let spec = BackwardSpec::with_driver(
        Terminal::of_b(put),
        discounting(0.2),
        Barrier::new(1.0, |_, b, _| put(b)),
    )
    .unwrap();
    let sol = solve_rbsde_lattice(&spec, &geo, &band, None).unwrap();
    assert!(sol.defect.a_total > 0.0);
    assert!(sol.defect.defect <= 1e-3 * sol.y.sup_abs());
    let tol = 2.0 * geo.dx();
    assert!(sol.defect.complementarity_holds(tol));
    for k in 0..=200 {
        for i in 0..geo.n_nodes() {
            assert!(sol.y.layers[k][i] >= sol.barrier.layers[k][i]);
            if sol.da.layers[k][i] > 0.0 {
                assert!(sol.y.layers[k][i] - sol.barrier.layers[k][i] <= tol);
            }
        }
    }
}

#[test]
fn inactive_barrier_is_the_plain_equation() {
    let band = band();
    let geo = LatticeGeometry::new(&band, &LatticeConfig::new(1.0, 120)).unwrap();
    let f = GrowthBoundedFunction::new(3, 0.3, |_, v| 0.1 * v[2].abs() - 0.2 * v[1].sin())
        .with_lipschitz(0.2)
        .ignoring(0);
    let g = GrowthBoundedFunction::new(3, 0.1, |_, v| 0.1 * v[1].tanh())
        .with_lipschitz(0.1)
        .ignoring(0);
    let xi = Terminal::of_b(|b| b.cos());
    let spec = BackwardSpec::new(xi.clone(), f.clone(), g.clone(), Barrier::inactive(), 0.3).unwrap();
    let sol = solve_rbsde_lattice(&spec, &geo, &band, None).unwrap();
    let (y, _) = solve_bsde_lattice(&xi, &f, &g, &geo, &band, None).unwrap();
    assert_eq!(sol.da.sup_abs(), 0.0);
    assert!(sol.y.sup_distance(&y) <= 1e-12);
}

#[test]
fn penalized_backend_cross_checks() {
    let band = band();
    let grid = TimeGrid::uniform(1.0, 50).unwrap();
    let bundle = simulate_family(&bang_bang_family(&grid, &band, 2).unwrap(), 4000, 17).unwrap();
    let reg = RegressionConfig::default();

    let low = BackwardSpec::with_driver(
        Terminal::of_b(|b| b * b),
        GrowthBoundedFunction::zero(3),
        Barrier::constant(-5.0),
    )
    .unwrap();
    let pen = solve_rbsde_penalized(&low, &bundle, 1e-3, None, &reg).unwrap();
    let geo = LatticeGeometry::new(&band, &LatticeConfig::new(1.0, 200)).unwrap();
    let lat = solve_rbsde_lattice(&low, &geo, &band, None).unwrap();
    assert!(
        (pen.y0 - lat.y0()).abs() <= 0.05 * lat.y0().abs(),
        "{} vs {}",
        pen.y0,
        lat.y0()
    );

    let active = BackwardSpec::with_driver(
        Terminal::of_b(put),
        discounting(0.2),
        Barrier::new(1.0, |_, b, _| put(b)),
    )
    .unwrap();
    let y0: Vec<f64> = [0.04, 0.02, 0.01]
        .iter()
        .map(|&eps| solve_rbsde_penalized(&active, &bundle, eps, None, &reg).unwrap().y0)
        .collect();
    assert!(y0.windows(2).all(|w| w[0] <= w[1]), "{y0:?}");
}
