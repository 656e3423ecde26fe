//! Desk-scale experiments: toy task pairs, interpolation-path scans,
//! α-sweeps, and the performance drop rate.

pub mod mlp;
pub mod path;
pub mod pdr;
pub mod sweep;
pub mod toy;

pub use path::{scan_models, scan_path, PathPoint, PathScan};
pub use pdr::{compute_pdr, RobustnessReport};
pub use sweep::{fixed_merge_average, run_sweep, run_sweep_with, SweepRecord, SweepResult};
pub use toy::{build_toy_pair, ToyTaskPair, ToyTasks};

/// Median of `values` (sorted in place); the mean of the middle pair for
/// even lengths.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}
