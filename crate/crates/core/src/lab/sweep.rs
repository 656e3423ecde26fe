//! α-sweeps: one sampled coefficient and merge per alpha, each scored by an
//! evaluator, with the best combined average selected.

use serde::{Deserialize, Serialize};

use super::toy::ToyTaskPair;
use crate::checkpoint::{digest_of, Digest};
use crate::error::{Error, Result};
use crate::manifest::MergeManifest;
use crate::merge::{merge, MergeRecipe};
use crate::sampler::{make_sweep, SamplingRecord, SweepSchedule};
use crate::tensor::TensorMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub sampling: SamplingRecord,
    pub digest: Digest,
    /// Per-task scores; absent when evaluation failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub average: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub method: String,
    pub records: Vec<SweepRecord>,
    /// Index of the best combined average; `None` when every evaluation
    /// failed.
    pub selected: Option<usize>,
}

impl SweepResult {
    pub fn selected_record(&self) -> Option<&SweepRecord> {
        self.selected.map(|i| &self.records[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// One row per record: `alpha, lambda_m, task1.., avg`. Failed
    /// evaluations leave the score cells empty.
    pub fn to_csv(&self, task_names: &[String]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["alpha".to_string(), "lambda_m".to_string()];
        header.extend(task_names.iter().cloned());
        header.push("avg".into());
        w.write_record(&header).expect("in-memory write");
        for r in &self.records {
            let mut row = vec![r.sampling.alpha.to_string(), r.sampling.lambda_m.to_string()];
            match &r.scores {
                Some(s) => row.extend(s.iter().map(f64::to_string)),
                None => row.extend(task_names.iter().map(|_| String::new())),
            }
            row.push(r.average.map(|a| a.to_string()).unwrap_or_default());
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    /// Fixed-width table with the same columns as [`SweepResult::to_csv`];
    /// the selected row is marked with `*`.
    pub fn to_table(&self, task_names: &[String]) -> String {
        let mut out = format!("{:>6}  {:>9}", "alpha", "lambda_m");
        for t in task_names {
            out.push_str(&format!("  {t:>10}"));
        }
        out.push_str(&format!("  {:>8}\n", "avg"));
        for (i, r) in self.records.iter().enumerate() {
            out.push_str(&format!("{:>6}  {:>9.6}", r.sampling.alpha, r.sampling.lambda_m));
            for k in 0..task_names.len() {
                match &r.scores {
                    Some(s) => out.push_str(&format!("  {:>10.2}", s[k])),
                    None => out.push_str(&format!("  {:>10}", "-")),
                }
            }
            match r.average {
                Some(a) => out.push_str(&format!("  {a:>8.2}")),
                None => out.push_str(&format!("  {:>8}", "failed")),
            }
            if self.selected == Some(i) {
                out.push_str(" *");
            }
            out.push('\n');
        }
        out
    }
}

/// Index of the highest average; equal averages go to the smaller alpha,
/// then to the earlier record.
fn select(records: &[SweepRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        let Some(avg) = r.average else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let cur = records[b].average.expect("selected records are scored");
                avg > cur || (avg == cur && r.sampling.alpha < records[b].sampling.alpha)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Runs the sweep on arbitrary inputs. `on_merge` sees every merged
/// checkpoint with its manifest before evaluation (e.g. to write them out);
/// an error from it aborts the sweep, while an evaluator error is recorded
/// on that alpha's record and the sweep continues.
pub fn run_sweep_with<S, E>(
    schedule: &SweepSchedule,
    template: &MergeRecipe,
    base: Option<&TensorMap>,
    models: &[&TensorMap],
    mut on_merge: S,
    mut evaluate: E,
) -> Result<SweepResult>
where
    S: FnMut(usize, &TensorMap, &MergeManifest) -> Result<()>,
    E: FnMut(&TensorMap) -> Result<Vec<f64>>,
{
    if !template.method.is_m3() {
        return Err(Error::Recipe(format!(
            "sweeps need an M³ method, got {}",
            template.method
        )));
    }
    let mut records = Vec::with_capacity(schedule.alphas.len());
    for (i, sampling) in make_sweep(schedule)?.into_iter().enumerate() {
        let recipe = template.clone().with_sampling(sampling);
        let (merged, manifest) = merge(&recipe, base, models)?;
        on_merge(i, &merged, &manifest)?;
        let record = match evaluate(&merged) {
            Ok(scores) if !scores.is_empty() && scores.iter().all(|s| s.is_finite()) => SweepRecord {
                sampling,
                digest: digest_of(&merged),
                average: Some(scores.iter().sum::<f64>() / scores.len() as f64),
                scores: Some(scores),
                error: None,
            },
            Ok(scores) => SweepRecord {
                sampling,
                digest: digest_of(&merged),
                scores: None,
                average: None,
                error: Some(format!("unusable scores {scores:?}")),
            },
            Err(e) => SweepRecord {
                sampling,
                digest: digest_of(&merged),
                scores: None,
                average: None,
                error: Some(e.to_string()),
            },
        };
        records.push(record);
    }
    Ok(SweepResult {
        method: template.method.name().to_string(),
        selected: select(&records),
        records,
    })
}

/// Sweeps a toy pair, scoring each merge on both held-out tasks.
pub fn run_sweep(pair: &ToyTaskPair, schedule: &SweepSchedule, template: &MergeRecipe) -> Result<SweepResult> {
    run_sweep_with(
        schedule,
        template,
        Some(&pair.pretrained),
        &[&pair.model_t1, &pair.model_t2],
        |_, _, _| Ok(()),
        |m| pair.tasks.scores(m).map(|s| s.to_vec()),
    )
}

/// Combined score of `template` merged at a fixed coefficient.
pub fn fixed_merge_average(pair: &ToyTaskPair, template: &MergeRecipe, lambda_m: f64) -> Result<f64> {
    let recipe = template.clone().with_lambda(lambda_m);
    let (merged, _) = merge(&recipe, Some(&pair.pretrained), &[&pair.model_t1, &pair.model_t2])?;
    let s = pair.tasks.scores(&merged)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}
