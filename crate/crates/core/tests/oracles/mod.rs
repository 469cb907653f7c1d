//! Independent reference solvers used by the integration tests. They share
//! nothing with the library beyond the lattice geometry.
#![allow(dead_code)]

use gbsde_core::glattice::LatticeGeometry;
use gbsde_core::VolatilityBand;

/// Discrete Snell envelope at the root of a lattice with `steps ≤ 3`, by
/// enumerating every bang-bang Markov control and every stopping rule on the
/// nodes reachable from the root, then every path of the trinomial tree.
///
/// `discount` multiplies the continuation value at each step; `barrier(k, b)`
/// is the stopping reward and `terminal(b)` the reward at the horizon.
pub fn snell_brute_force(
    band: &VolatilityBand,
    dt: f64,
    dx: f64,
    steps: usize,
    discount: f64,
    barrier: impl Fn(usize, f64) -> f64,
    terminal: impl Fn(f64) -> f64,
) -> f64 {
    assert!(steps <= 3);
    // node (k, j) with offset j in -k..=k has index k² + (j + k)
    let n_inner: usize = (0..steps).map(|k| 2 * k + 1).sum();
    // expected reward along the tree for one (control, stopping rule) pair;
    // the recursion visits each of the 3^steps paths once
    fn value(k: usize, j: i64, s: &Setting, barrier: &dyn Fn(usize, f64) -> f64, terminal: &dyn Fn(f64) -> f64) -> f64 {
        let b = j as f64 * s.dx;
        if k == s.steps {
            return terminal(b);
        }
        let idx = k * k + (j + k as i64) as usize;
        if s.stops >> idx & 1 == 1 {
            return barrier(k, b);
        }
        let var = s.vars[(s.controls >> idx & 1) as usize];
        let p = var * s.dt / (2.0 * s.dx * s.dx);
        let cont = p * value(k + 1, j - 1, s, barrier, terminal)
            + (1.0 - 2.0 * p) * value(k + 1, j, s, barrier, terminal)
            + p * value(k + 1, j + 1, s, barrier, terminal);
        s.discount * cont
    }
    struct Setting {
        steps: usize,
        dt: f64,
        dx: f64,
        discount: f64,
        vars: [f64; 2],
        controls: u32,
        stops: u32,
    }
    let mut best = f64::NEG_INFINITY;
    for controls in 0..(1u32 << n_inner) {
        for stops in 0..(1u32 << n_inner) {
            let s = Setting {
                steps,
                dt,
                dx,
                discount,
                vars: [band.var_lo(), band.var_hi()],
                controls,
                stops,
            };
            best = best.max(value(0, 0, &s, &barrier, &terminal));
        }
    }
    best
}

/// Per-layer inputs of the direct coupled solver.
pub struct CoupledCoefficients<'a> {
    pub x0: f64,
    pub b: &'a dyn Fn(f64, f64) -> f64,
    pub sigma: f64,
    pub f: &'a dyn Fn(f64, f64, f64) -> f64,
    pub terminal: &'a dyn Fn(f64) -> f64,
    pub floor: f64,
}

fn g_of(band: &VolatilityBand, a: f64) -> f64 {
    0.5 * (band.var_hi() * a.max(0.0) + band.var_lo() * a.min(0.0))
}

/// Plain Picard iteration `Y ← backward(X)`, `X ← forward(Y)` from `X = x₀`,
/// `Y = 0`, on the same lattice discretization (reflection at a constant
/// floor, `σ` constant, `h = g = 0`).
pub fn picard_coupled(
    c: &CoupledCoefficients,
    geo: &LatticeGeometry,
    band: &VolatilityBand,
    iterations: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = geo.steps();
    let m = geo.n_nodes();
    let (dt, dx) = (geo.dt(), geo.dx());
    let nodes = geo.nodes();
    let root = nodes[geo.root()];
    let passes = if dt > 0.01 { 2 } else { 1 };
    let r = band.var_hi() * dt / (dx * dx);
    let mut x: Vec<Vec<f64>> = vec![nodes.iter().map(|b| c.x0 + c.sigma * (b - root)).collect(); n + 1];
    let mut y: Vec<Vec<f64>> = vec![vec![0.0; m]; n + 1];
    for _ in 0..iterations {
        let mut ny = vec![vec![0.0; m]; n + 1];
        ny[n] = nodes.iter().map(|&b| (c.terminal)(b).max(c.floor)).collect();
        for k in (0..n).rev() {
            let nx = &ny[k + 1].clone();
            for i in 0..m {
                let (d2, z) = if i == 0 {
                    (0.0, (nx[1] - nx[0]) / dx)
                } else if i == m - 1 {
                    (0.0, (nx[m - 1] - nx[m - 2]) / dx)
                } else {
                    (
                        (nx[i + 1] - 2.0 * nx[i] + nx[i - 1]) / (dx * dx),
                        (nx[i + 1] - nx[i - 1]) / (2.0 * dx),
                    )
                };
                let e = nx[i] + dt * g_of(band, d2);
                let mut v = e;
                for _ in 0..passes {
                    v = e + dt * (c.f)(x[k][i], v, z);
                }
                ny[k][i] = v.max(c.floor);
            }
        }
        let mut nxs = vec![vec![0.0; m]; n + 1];
        nxs[0] = x[0].clone();
        for k in 0..n {
            for j in 0..m {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for i in j.saturating_sub(1)..=(j + 1).min(m - 1) {
                    let w = if i == 0 || i == m - 1 {
                        if i == j {
                            1.0
                        } else {
                            0.0
                        }
                    } else if i == j {
                        1.0 - r
                    } else {
                        0.5 * r
                    };
                    if w > 0.0 {
                        let base = nxs[k][i] + (c.b)(nxs[k][i], ny[k][i]) * dt;
                        acc += w * (base + c.sigma * (nodes[j] - nodes[i]));
                        wsum += w;
                    }
                }
                nxs[k + 1][j] = acc / wsum;
            }
        }
        let change = sup_distance(&nxs, &x).max(sup_distance(&ny, &y));
        x = nxs;
        y = ny;
        if change < 1e-13 {
            break;
        }
    }
    (x, y)
}

pub fn sup_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .fold(0.0, |m, (u, v)| m.max((u - v).abs()))
}
