use super::lattice::LatticeSolution;
use super::penalized::PathSolution;
use crate::gcore::{mean, VolatilityBand};
use crate::glattice::{pathwise_max_sum, running_sum_expectation, LatticeGeometry, NodeField};

/// Complementarity diagnostics of a reflected solution.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DefectReport {
    /// `max_t Ê[Σ_{k<t} (Y_k − L_k)ΔA_k]` from the root.
    pub defect: f64,
    /// Largest pathwise `Σ_k |Y_k − L_k| ΔA_k`; bounds the defect.
    pub pathwise: f64,
    /// Largest pathwise `A_T`.
    pub a_total: f64,
    /// Largest `Y − L` where `ΔA > 0`.
    pub contact_gap: f64,
}

impl DefectReport {
    /// `Σ (Y − L)⁺ΔA ≤ tol · A_T` and every contact within `tol` of the
    /// barrier.
    pub fn complementarity_holds(&self, tol: f64) -> bool {
        self.pathwise <= tol * self.a_total && self.contact_gap <= tol
    }
}

fn lattice_report(
    geometry: &LatticeGeometry,
    band: &VolatilityBand,
    y: &NodeField,
    barrier: &NodeField,
    da: &NodeField,
) -> DefectReport {
    let root = geometry.root();
    let n = geometry.steps();
    let mut contact_gap = 0.0f64;
    let mut terms = Vec::with_capacity(n);
    let mut abs_terms = Vec::with_capacity(n);
    for k in 0..n {
        let mut row = Vec::with_capacity(geometry.n_nodes());
        let mut abs_row = Vec::with_capacity(geometry.n_nodes());
        for ((yv, lv), a) in y.layers[k].iter().zip(&barrier.layers[k]).zip(&da.layers[k]) {
            let gap = yv - lv;
            if *a > 0.0 {
                contact_gap = contact_gap.max(gap);
            }
            row.push(gap * a);
            abs_row.push(gap.abs() * a);
        }
        terms.push(row);
        abs_terms.push(abs_row);
    }
    let defect = if terms.iter().flatten().all(|v| *v >= 0.0) {
        // non-negative terms: the running sum is largest at the horizon
        running_sum_expectation(geometry, band, &terms)
            .first()
            .map_or(0.0, |w| w[root])
    } else {
        (1..=n)
            .map(|t| running_sum_expectation(geometry, band, &terms[..t])[0][root])
            .fold(0.0, f64::max)
    };
    let pathwise = pathwise_max_sum(&abs_terms).first().map_or(0.0, |w| w[root]);
    let a_total = pathwise_max_sum(&da.layers[..n]).first().map_or(0.0, |w| w[root]);
    DefectReport {
        defect,
        pathwise,
        a_total,
        contact_gap,
    }
}

/// Defect of a lattice solution.
pub fn martingale_defect_lattice(sol: &LatticeSolution) -> DefectReport {
    lattice_report(&sol.geometry, &sol.band, &sol.y, &sol.barrier, &sol.da)
}

/// Defect of a scenario solution, with `Ê` the maximum of the scenario means.
pub fn martingale_defect_paths(sol: &PathSolution) -> DefectReport {
    let mut report = DefectReport::default();
    for (s, paths) in sol.y.scenarios.iter().enumerate() {
        let len = paths.first().map_or(0, |p| p.len().saturating_sub(1));
        let mut running = vec![0.0; paths.len()];
        for k in 0..len {
            for (m, path) in paths.iter().enumerate() {
                let gap = path[k] - sol.barrier.scenarios[s][m][k];
                running[m] += gap * sol.da.scenarios[s][m][k];
            }
            report.defect = report.defect.max(mean(&running));
        }
        for (m, path) in paths.iter().enumerate() {
            let (mut abs_sum, mut a) = (0.0, 0.0);
            for (k, y) in path.iter().enumerate().take(len) {
                let gap = y - sol.barrier.scenarios[s][m][k];
                let d = sol.da.scenarios[s][m][k];
                abs_sum += gap.abs() * d;
                a += d;
                if d > 0.0 {
                    report.contact_gap = report.contact_gap.max(gap);
                }
            }
            report.pathwise = report.pathwise.max(abs_sum);
            report.a_total = report.a_total.max(a);
        }
    }
    report
}

/// Moves every reflection increment one layer later; a counterexample for the
/// defect diagnostic.
pub fn shift_increments_late(da: &NodeField) -> NodeField {
    let mut layers = vec![vec![0.0; da.layers[0].len()]; da.layers.len()];
    layers[1..].clone_from_slice(&da.layers[..da.layers.len() - 1]);
    NodeField { layers }
}

/// Empirical constant `C` in `A_T ≤ C (sup|Y| + M T)`.
pub fn a_bound_ratio(sol: &LatticeSolution, growth: f64) -> f64 {
    let denom = sol.y.sup_abs() + growth * sol.geometry.grid().horizon();
    if denom > 0.0 {
        sol.defect.a_total / denom
    } else {
        0.0
    }
}
