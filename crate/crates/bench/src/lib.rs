//! Benchmark fixtures shared by the criterion targets.

use gbsde_core::{LatticeConfig, LatticeGeometry, VolatilityBand};

/// Band `[0.5, 1]` with a lattice of `steps` steps on `[0, 1]`.
pub fn unit_lattice(steps: usize) -> (LatticeGeometry, VolatilityBand) {
    let band = VolatilityBand::new(0.5, 1.0).expect("valid band");
    let geometry = LatticeGeometry::new(&band, &LatticeConfig::new(1.0, steps)).expect("stable lattice");
    (geometry, band)
}
