//! Shared fixtures for the benchmarks.

use fbi_core::{Ensemble, SimSpec};

/// The standard ensemble (10 vanillas, 5 variants each, C = 1000, k = 5,
/// 2000 inputs) at a fixed seed.
pub fn standard_ensemble() -> Ensemble {
    Ensemble::generate(&SimSpec {
        seed: 2024,
        ..SimSpec::default()
    })
    .expect("default spec is valid")
}
