//! Loss along the straight line between two fine-tuned checkpoints.

use serde::{Deserialize, Serialize};

use super::toy::{combined_loss, ToyTaskPair, ToyTasks};
use crate::error::{Error, Result};
use crate::tensor::{lerp, TensorMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub loss_task1: f64,
    pub loss_task2: f64,
    pub combined: f64,
}

/// Losses at `lerp(model_t1, model_t2, λ)` on an ascending grid, so `λ = 1`
/// is `model_t1` and `λ = 0` is `model_t2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathScan {
    pub points: Vec<PathPoint>,
}

/// `grid_size` evenly spaced values from 0 to 1, both ends exact.
pub fn lambda_grid(grid_size: usize) -> Result<Vec<f64>> {
    if grid_size < 2 {
        return Err(Error::Evaluation(format!("grid size must be at least 2, got {grid_size}")));
    }
    let last = (grid_size - 1) as f64;
    Ok((0..grid_size).map(|i| i as f64 / last).collect())
}

impl PathScan {
    pub fn lambdas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.lambda).collect()
    }

    /// Highest combined loss on the path over the higher endpoint's.
    pub fn barrier(&self) -> f64 {
        let first = self.points.first().expect("grid has at least two points");
        let last = self.points.last().expect("grid has at least two points");
        let peak = self.points.iter().map(|p| p.combined).fold(f64::NEG_INFINITY, f64::max);
        peak / first.combined.max(last.combined)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            w.serialize(p).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

/// Scans the segment between two arbitrary checkpoints under `tasks`.
pub fn scan_models(tasks: &ToyTasks, t1: &TensorMap, t2: &TensorMap, grid_size: usize) -> Result<PathScan> {
    let points = lambda_grid(grid_size)?
        .into_iter()
        .map(|lambda| {
            let losses = tasks.losses(&lerp(t1, t2, lambda)?)?;
            Ok(PathPoint {
                lambda,
                loss_task1: losses[0],
                loss_task2: losses[1],
                combined: combined_loss(&losses),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathScan { points })
}

pub fn scan_path(pair: &ToyTaskPair, grid_size: usize) -> Result<PathScan> {
    scan_models(&pair.tasks, &pair.model_t1, &pair.model_t2, grid_size)
}
