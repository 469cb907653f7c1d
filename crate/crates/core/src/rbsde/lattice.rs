use std::io::Write;

use rayon::prelude::*;

use super::diagnostics::{martingale_defect_lattice, DefectReport};
use super::{envelope_driver, BackwardSpec, Barrier, Terminal, TerminalPolicy};
use crate::approx::GrowthBoundedFunction;
use crate::error::{Error, Result};
use crate::gcore::VolatilityBand;
use crate::glattice::{check_stability, second_difference, LatticeGeometry, NodeField};

/// Lattice solution of a reflected G-BSDE. All fields have `steps + 1`
/// layers; `da[k]` is the reflection added at `t_k` (zero on the last layer).
#[derive(Debug, Clone)]
pub struct LatticeSolution {
    pub geometry: LatticeGeometry,
    pub band: VolatilityBand,
    /// State argument used for the drivers at every node (`B` when no `X`
    /// was supplied).
    pub x: NodeField,
    pub y: NodeField,
    pub z: NodeField,
    pub da: NodeField,
    pub barrier: NodeField,
    /// `da[k][i] > 0`.
    pub floor_contact: Vec<Vec<bool>>,
    /// Largest `L_T − ξ` removed by [`TerminalPolicy::ProjectOntoBarrier`].
    pub terminal_lift: f64,
    pub defect: DefectReport,
}

impl LatticeSolution {
    pub fn y0(&self) -> f64 {
        self.y.layers[0][self.geometry.root()]
    }

    /// Columns `t,b,x,y,z,da`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,b,x,y,z,da")?;
        for (k, t) in self.geometry.times().iter().enumerate() {
            for (i, b) in self.geometry.nodes().iter().enumerate() {
                writeln!(
                    out,
                    "{t},{b},{},{},{},{}",
                    self.x.layers[k][i], self.y.layers[k][i], self.z.layers[k][i], self.da.layers[k][i]
                )?;
            }
        }
        Ok(())
    }
}

/// Centered difference quotient of `next`, one-sided on the boundary.
pub(crate) fn node_gradient(next: &[f64], dx: f64) -> Vec<f64> {
    let n = next.len();
    (0..n)
        .map(|i| {
            if i == 0 {
                (next[1] - next[0]) / dx
            } else if i + 1 == n {
                (next[n - 1] - next[n - 2]) / dx
            } else {
                (next[i + 1] - next[i - 1]) / (2.0 * dx)
            }
        })
        .collect()
}

/// `Y_{k+1} + Δt f + Δt max_{σ²} σ²(D²/2 + g)` at one node for a given `y`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn driver_update(
    spec: &BackwardSpec,
    band: &VolatilityBand,
    t: f64,
    dt: f64,
    next: f64,
    d2: f64,
    x: f64,
    y: f64,
    z: f64,
) -> f64 {
    let arg = [x, y, z];
    let a = 0.5 * d2 + spec.driver_g.eval(t, &arg);
    let gen = (band.var_lo() * a).max(band.var_hi() * a);
    next + dt * (spec.driver_f.eval(t, &arg) + gen)
}

/// Unreflected continuation value `ỹ` and `z` for layer `k` from layer `k+1`.
pub(crate) fn continuation(
    spec: &BackwardSpec,
    band: &VolatilityBand,
    t: f64,
    dt: f64,
    dx: f64,
    next: &[f64],
    x: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d2 = second_difference(next, dx);
    let z = node_gradient(next, dx);
    let passes = BackwardSpec::picard_passes(dt);
    let y = (0..next.len())
        .into_par_iter()
        .map(|i| {
            let mut y = next[i] + dt * band.g(d2[i]);
            for _ in 0..passes {
                y = driver_update(spec, band, t, dt, next[i], d2[i], x[i], y, z[i]);
            }
            y
        })
        .collect();
    (y, z)
}

fn state_field(geometry: &LatticeGeometry, x: Option<&NodeField>) -> Result<NodeField> {
    match x {
        None => Ok(geometry.tabulate(|_, b| b)),
        Some(x) => {
            if x.layers.len() != geometry.steps() + 1 || x.layers.iter().any(|l| l.len() != geometry.n_nodes()) {
                return Err(Error::GridMismatch("state field does not match the lattice".into()));
            }
            Ok(x.clone())
        }
    }
}

pub(crate) fn barrier_field(barrier: &Barrier, geometry: &LatticeGeometry, x: &NodeField) -> Result<NodeField> {
    let nodes = geometry.nodes();
    let layers: Vec<Vec<f64>> = geometry
        .times()
        .iter()
        .zip(&x.layers)
        .map(|(&t, xs)| nodes.iter().zip(xs).map(|(&b, &xv)| barrier.eval(t, b, xv)).collect())
        .collect();
    let cap = barrier.cap();
    if let Some(v) = layers.iter().flatten().find(|v| **v > cap + 1e-12 * cap.abs().max(1.0)) {
        return Err(Error::Audit(format!("barrier value {v} exceeds declared bound {cap}")));
    }
    Ok(NodeField { layers })
}

fn terminal_layer(
    spec: &BackwardSpec,
    geometry: &LatticeGeometry,
    x_last: &[f64],
    barrier_last: Option<&[f64]>,
) -> Result<(Vec<f64>, f64)> {
    let mut xi: Vec<f64> = geometry
        .nodes()
        .iter()
        .zip(x_last)
        .map(|(&b, &x)| spec.terminal.eval(b, x))
        .collect();
    if let Some(i) = xi.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step: geometry.steps(),
            what: format!("terminal value at node {i}"),
        });
    }
    let mut lift = 0.0f64;
    if let Some(l) = barrier_last {
        for (i, (v, lv)) in xi.iter_mut().zip(l).enumerate() {
            if *v < *lv {
                match spec.terminal_policy {
                    TerminalPolicy::Reject => {
                        return Err(Error::TerminalBelowBarrier {
                            state: geometry.nodes()[i],
                            terminal: *v,
                            barrier: *lv,
                        })
                    }
                    TerminalPolicy::ProjectOntoBarrier => {
                        lift = lift.max(lv - *v);
                        *v = *lv;
                    }
                }
            }
        }
    }
    Ok((xi, lift))
}

/// Backward induction with nodewise reflection `Y_k = max(ỹ_k, L_k)`.
///
/// `x` is the forward state on the lattice nodes; without it the drivers,
/// terminal and barrier see `x = B`. The drivers must be declared Lipschitz
/// (run them through the inf-convolution ladder otherwise).
pub fn solve_rbsde_lattice(
    spec: &BackwardSpec,
    geometry: &LatticeGeometry,
    band: &VolatilityBand,
    x: Option<&NodeField>,
) -> Result<LatticeSolution> {
    if !spec.drivers_lipschitz() {
        return Err(Error::DriverNotLipschitz);
    }
    let (dt, dx) = (geometry.dt(), geometry.dx());
    check_stability(band, dt, dx)?;
    let x = state_field(geometry, x)?;
    let barrier = barrier_field(&spec.barrier, geometry, &x)?;
    let n = geometry.steps();
    let n_nodes = geometry.n_nodes();
    let (terminal, terminal_lift) = terminal_layer(spec, geometry, &x.layers[n], Some(&barrier.layers[n]))?;

    let mut y = vec![Vec::new(); n + 1];
    let mut z = vec![Vec::new(); n + 1];
    let mut da = vec![vec![0.0; n_nodes]; n + 1];
    z[n] = node_gradient(&terminal, dx);
    y[n] = terminal;
    for k in (0..n).rev() {
        let t = geometry.times()[k];
        let (cont, zk) = continuation(spec, band, t, dt, dx, &y[k + 1], &x.layers[k]);
        let mut yk = Vec::with_capacity(n_nodes);
        for (i, c) in cont.into_iter().enumerate() {
            if !c.is_finite() {
                return Err(Error::NonFinite {
                    step: k,
                    what: format!("backward value at node {i}"),
                });
            }
            let l = barrier.layers[k][i];
            if c < l {
                da[k][i] = l - c;
                yk.push(l);
            } else {
                yk.push(c);
            }
        }
        y[k] = yk;
        z[k] = zk;
    }
    let floor_contact = da.iter().map(|l| l.iter().map(|v| *v > 0.0).collect()).collect();
    let mut sol = LatticeSolution {
        geometry: geometry.clone(),
        band: *band,
        x,
        y: NodeField { layers: y },
        z: NodeField { layers: z },
        da: NodeField { layers: da },
        barrier,
        floor_contact,
        terminal_lift,
        defect: DefectReport::default(),
    };
    sol.defect = martingale_defect_lattice(&sol);
    Ok(sol)
}

/// The plain (unreflected) G-BSDE on the lattice; returns `(Y, Z)`.
pub fn solve_bsde_lattice(
    terminal: &Terminal,
    driver_f: &GrowthBoundedFunction,
    driver_g: &GrowthBoundedFunction,
    geometry: &LatticeGeometry,
    band: &VolatilityBand,
    x: Option<&NodeField>,
) -> Result<(NodeField, NodeField)> {
    let spec = BackwardSpec::new(
        terminal.clone(),
        driver_f.clone(),
        driver_g.clone(),
        Barrier::inactive(),
        driver_f.growth(),
    )?;
    if !spec.drivers_lipschitz() {
        return Err(Error::DriverNotLipschitz);
    }
    let (dt, dx) = (geometry.dt(), geometry.dx());
    check_stability(band, dt, dx)?;
    let x = state_field(geometry, x)?;
    let n = geometry.steps();
    let (terminal, _) = terminal_layer(&spec, geometry, &x.layers[n], None)?;
    let mut y = vec![Vec::new(); n + 1];
    let mut z = vec![Vec::new(); n + 1];
    z[n] = node_gradient(&terminal, dx);
    y[n] = terminal;
    for k in (0..n).rev() {
        let (yk, zk) = continuation(&spec, band, geometry.times()[k], dt, dx, &y[k + 1], &x.layers[k]);
        y[k] = yk;
        z[k] = zk;
    }
    Ok((NodeField { layers: y }, NodeField { layers: z }))
}

/// Lower start `Y⁰` (driver `−K(1+|y|+|z|)`, terminal `ξ`) and upper envelope
/// `U` (driver `K(1+|y|+|z|)`, terminal `|ξ|`), both reflected at `L`.
#[derive(Debug, Clone)]
pub struct Envelopes {
    pub lower: LatticeSolution,
    pub upper: LatticeSolution,
    /// `max (Y⁰ − U)`; non-positive up to the slack.
    pub worst_gap: f64,
}

pub fn envelope_pair(
    k: f64,
    terminal: &Terminal,
    barrier: &Barrier,
    policy: TerminalPolicy,
    geometry: &LatticeGeometry,
    band: &VolatilityBand,
    x: Option<&NodeField>,
) -> Result<Envelopes> {
    let zero = GrowthBoundedFunction::zero(3);
    let lower_spec = BackwardSpec::new(
        terminal.clone(),
        envelope_driver(k, -1.0),
        zero.clone(),
        barrier.clone(),
        k,
    )?
    .with_policy(policy);
    let inner = terminal.clone();
    let abs_terminal = Terminal::new(move |b, x| inner.eval(b, x).abs());
    let upper_spec =
        BackwardSpec::new(abs_terminal, envelope_driver(k, 1.0), zero, barrier.clone(), k)?.with_policy(policy);
    let lower = solve_rbsde_lattice(&lower_spec, geometry, band, x)?;
    let upper = solve_rbsde_lattice(&upper_spec, geometry, band, x)?;
    let worst_gap = lower.y.max_excess_over(&upper.y);
    let slack = 10.0 * geometry.dt() * (1.0 + upper.y.sup_abs());
    if worst_gap > slack {
        return Err(Error::EnvelopeBreach {
            iteration: 0,
            what: "lower start above upper envelope",
            magnitude: worst_gap,
            slack,
        });
    }
    Ok(Envelopes {
        lower,
        upper,
        worst_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glattice::{solve_gheat, LatticeConfig};

    fn band() -> VolatilityBand {
        VolatilityBand::new(0.5, 1.0).unwrap()
    }

    fn geo(steps: usize) -> LatticeGeometry {
        LatticeGeometry::new(&band(), &LatticeConfig::new(1.0, steps)).unwrap()
    }

    fn lipschitz_zero() -> GrowthBoundedFunction {
        GrowthBoundedFunction::zero(3)
    }

    #[test]
    fn odd_payoff_has_zero_value() {
        let spec = BackwardSpec::with_driver(Terminal::of_b(|b| b), lipschitz_zero(), Barrier::inactive()).unwrap();
        let g = geo(100);
        let sol = solve_rbsde_lattice(&spec, &g, &band(), None).unwrap();
        assert!(sol.y0().abs() <= g.dx());
        assert!(sol.da.sup_abs() == 0.0);
    }

    #[test]
    fn square_payoff_matches_gheat() {
        let spec = BackwardSpec::with_driver(Terminal::of_b(|b| b * b), lipschitz_zero(), Barrier::inactive()).unwrap();
        let g = geo(200);
        let sol = solve_rbsde_lattice(&spec, &g, &band(), None).unwrap();
        assert!((sol.y0() - 1.0).abs() < 0.02);
        let heat = solve_gheat(|x| x * x, &band(), &LatticeConfig::new(1.0, 200)).unwrap();
        assert!(sol.y.sup_distance(&heat.values) < 1e-12);
    }

    #[test]
    fn zero_barrier_reflects() {
        let spec = BackwardSpec::with_driver(Terminal::of_b(|b| b), lipschitz_zero(), Barrier::constant(0.0))
            .unwrap()
            .with_policy(TerminalPolicy::ProjectOntoBarrier);
        let sol = solve_rbsde_lattice(&spec, &geo(50), &band(), None).unwrap();
        assert!(sol.y.layers.iter().flatten().all(|v| *v >= 0.0));
        assert!(sol.terminal_lift > 0.0);
        let rejecting = spec.clone().with_policy(TerminalPolicy::Reject);
        assert!(matches!(
            solve_rbsde_lattice(&rejecting, &geo(50), &band(), None),
            Err(Error::TerminalBelowBarrier { .. })
        ));
    }

    #[test]
    fn active_reflection_and_contact() {
        // put-like barrier above the continuation value on part of the grid
        let barrier = Barrier::new(1.0, |_, b, _| (1.0 - b.exp()).max(0.0));
        let f = GrowthBoundedFunction::new(3, 0.2, |_, v| -0.2 * v[1])
            .with_lipschitz(0.2)
            .ignoring(0);
        let spec = BackwardSpec::with_driver(Terminal::of_b(|b| (1.0 - b.exp()).max(0.0)), f, barrier).unwrap();
        let sol = solve_rbsde_lattice(&spec, &geo(100), &band(), None).unwrap();
        assert!(sol.da.sup_abs() > 0.0);
        for k in 0..=100 {
            for i in 0..sol.geometry.n_nodes() {
                assert!(sol.y.layers[k][i] >= sol.barrier.layers[k][i]);
                if sol.floor_contact[k][i] {
                    assert_eq!(sol.y.layers[k][i], sol.barrier.layers[k][i]);
                }
            }
        }
        assert_eq!(sol.defect.defect, 0.0);
    }

    #[test]
    fn driver_comparison() {
        let g = geo(80);
        let lo = GrowthBoundedFunction::new(3, 0.3, |_, v| -0.3 * v[2].abs())
            .with_lipschitz(0.3)
            .ignoring(0);
        let hi = GrowthBoundedFunction::new(3, 0.3, |_, v| 0.1 + 0.2 * v[1].tanh())
            .with_lipschitz(0.2)
            .ignoring(0);
        let xi = Terminal::of_b(|b| b.sin());
        let s1 = solve_rbsde_lattice(
            &BackwardSpec::with_driver(xi.clone(), lo, Barrier::constant(-0.5))
                .unwrap()
                .with_policy(TerminalPolicy::ProjectOntoBarrier),
            &g,
            &band(),
            None,
        )
        .unwrap();
        let s2 = solve_rbsde_lattice(
            &BackwardSpec::with_driver(xi, hi, Barrier::constant(-0.5))
                .unwrap()
                .with_policy(TerminalPolicy::ProjectOntoBarrier),
            &g,
            &band(),
            None,
        )
        .unwrap();
        assert!(s1.y.max_excess_over(&s2.y) <= 0.0);
    }

    #[test]
    fn non_lipschitz_driver_is_rejected() {
        let f = GrowthBoundedFunction::new(3, 1.0, |_, v| v[1].abs().sqrt()).ignoring(0);
        let spec = BackwardSpec::with_driver(Terminal::of_b(|b| b), f, Barrier::inactive()).unwrap();
        assert!(matches!(
            solve_rbsde_lattice(&spec, &geo(10), &band(), None),
            Err(Error::DriverNotLipschitz)
        ));
        let bad_barrier = Barrier::new(0.0, |_, b, _| b);
        let spec = BackwardSpec::with_driver(Terminal::of_b(|b| b), lipschitz_zero(), bad_barrier).unwrap();
        assert!(matches!(
            solve_rbsde_lattice(&spec, &geo(10), &band(), None),
            Err(Error::Audit(_))
        ));
    }

    #[test]
    fn envelopes_are_ordered() {
        let g = geo(100);
        let e = envelope_pair(
            0.1,
            &Terminal::of_b(|b| b * b),
            &Barrier::inactive(),
            TerminalPolicy::Reject,
            &g,
            &band(),
            None,
        )
        .unwrap();
        assert!(e.worst_gap <= 0.0);
        let root = g.root();
        let gaps: Vec<f64> = (0..=100)
            .map(|k| e.upper.y.layers[k][root] - e.lower.y.layers[k][root])
            .collect();
        // the gap grows with the remaining horizon
        assert!(gaps.windows(2).all(|w| w[0] >= w[1]));
        let zero = envelope_pair(
            0.0,
            &Terminal::of_b(|_| 0.0),
            &Barrier::inactive(),
            TerminalPolicy::Reject,
            &g,
            &band(),
            None,
        )
        .unwrap();
        assert_eq!(zero.lower.y.sup_abs(), 0.0);
        assert_eq!(zero.upper.y.sup_abs(), 0.0);
        let signed = envelope_pair(
            0.2,
            &Terminal::of_b(|b| b),
            &Barrier::inactive(),
            TerminalPolicy::Reject,
            &g,
            &band(),
            None,
        )
        .unwrap();
        assert!(signed.worst_gap <= 0.0);
    }
}
