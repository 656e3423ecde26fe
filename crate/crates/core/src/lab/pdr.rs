//! Performance drop rate under adversarial attack.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub metric_no_attack: f64,
    pub metric_attack: f64,
    /// Percentage drop, `100 · (no_attack - attack) / no_attack`.
    pub pdr: f64,
}

pub fn compute_pdr(metric_no_attack: f64, metric_attack: f64) -> Result<RobustnessReport> {
    for m in [metric_no_attack, metric_attack] {
        if !(m.is_finite() && m >= 0.0) {
            return Err(Error::InvalidMetric(m));
        }
    }
    if metric_no_attack <= 0.0 {
        return Err(Error::PdrUndefined(metric_no_attack));
    }
    Ok(RobustnessReport {
        metric_no_attack,
        metric_attack,
        pdr: 100.0 * (metric_no_attack - metric_attack) / metric_no_attack,
    })
}

/// One published `(no-attack, attack, PDR)` triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdrFixture {
    pub table: String,
    pub attack_method: String,
    pub models: String,
    pub dataset: String,
    pub mixup: String,
    pub no_attack: f64,
    pub attack: f64,
    pub pdr: f64,
}

pub fn read_pdr_fixtures(path: impl AsRef<Path>) -> Result<Vec<PdrFixture>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pdr_fixtures(&text)
}

pub fn parse_pdr_fixtures(text: &str) -> Result<Vec<PdrFixture>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<PdrFixture>, _>>()
        .map_err(|e| Error::Evaluation(format!("fixture csv: {e}")))
}
