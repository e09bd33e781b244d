//! Fixtures shared by the benchmarks.

use cil_core::sim::{generate_single_treatment, SimDesign};
use cil_core::Dataset;

/// Single-treatment simulated data with `j` controls, six of them active.
pub fn fixture(n: usize, j: usize) -> Dataset {
    generate_single_treatment(&SimDesign::single(n, j, 6, 3, 1.0), 11).expect("valid design").0
}
