//! Seeded toy task pairs: a pretext-trained network and two fine-tunes of
//! it on distinct synthetic regression tasks.

use serde::{Deserialize, Serialize};

use super::mlp::{Dataset, Mlp, TrainSchedule, HEADS, INPUT_DIM};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, CounterRng};
use crate::tensor::{check_congruent, TensorMap};

pub const TRAIN_SIZE: usize = 128;
pub const HELD_OUT_SIZE: usize = 128;
const COMPONENTS: usize = 3;

pub const PRETEXT: TrainSchedule = TrainSchedule {
    steps: 400,
    learning_rate: 0.05,
    momentum: 0.9,
};

pub const FINE_TUNE: TrainSchedule = TrainSchedule {
    steps: 300,
    learning_rate: 0.05,
    momentum: 0.9,
};

/// Target `Σ_k a_k sin(w_k · x + b_k)` with `a_k = 1 / (k + 1)`.
#[derive(Debug, Clone, PartialEq)]
struct SineSum {
    freqs: [[f64; INPUT_DIM]; COMPONENTS],
    phases: [f64; COMPONENTS],
}

impl SineSum {
    fn random(rng: &mut CounterRng) -> Self {
        let mut freqs = [[0.0; INPUT_DIM]; COMPONENTS];
        for row in &mut freqs {
            for w in row.iter_mut() {
                *w = 1.5 * rng.next_normal();
            }
        }
        let phases = [0; COMPONENTS].map(|_| 2.0 * std::f64::consts::PI * rng.next_f64());
        SineSum { freqs, phases }
    }

    /// The first `terms` components only.
    fn eval(&self, x: &[f64; INPUT_DIM], terms: usize) -> f64 {
        (0..terms)
            .map(|k| {
                let z: f64 = self.freqs[k].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.phases[k];
                z.sin() / (k + 1) as f64
            })
            .sum()
    }
}

/// The two synthetic tasks of a pair. Both share the input distribution
/// (uniform on `[-1, 1]^3`); head `t` of the network answers task `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTasks {
    pub seed: u64,
    /// Coarse versions of both targets, used for the shared pretext phase.
    pub pretext: Dataset,
    pub train: Dataset,
    pub held_out: Dataset,
}

fn sample_inputs(rng: &mut CounterRng, n: usize) -> Vec<[f64; INPUT_DIM]> {
    (0..n)
        .map(|_| [0; INPUT_DIM].map(|_| 2.0 * rng.next_f64() - 1.0))
        .collect()
}

impl ToyTasks {
    /// Task definitions and data splits for `seed`, without any training.
    pub fn generate(seed: u64) -> Self {
        let mut rng = CounterRng::new(derive_seed(seed, 1), 0);
        let targets = [SineSum::random(&mut rng), SineSum::random(&mut rng)];
        let label = |xs: &[[f64; INPUT_DIM]], terms: usize| -> Vec<[f64; HEADS]> {
            xs.iter()
                .map(|x| [targets[0].eval(x, terms), targets[1].eval(x, terms)])
                .collect()
        };
        let train_x = sample_inputs(&mut rng, TRAIN_SIZE);
        let held_x = sample_inputs(&mut rng, HELD_OUT_SIZE);
        ToyTasks {
            seed,
            pretext: Dataset {
                targets: label(&train_x, 1),
                inputs: train_x.clone(),
            },
            train: Dataset {
                targets: label(&train_x, COMPONENTS),
                inputs: train_x,
            },
            held_out: Dataset {
                targets: label(&held_x, COMPONENTS),
                inputs: held_x,
            },
        }
    }

    /// Held-out mean squared error of each task.
    pub fn losses(&self, model: &TensorMap) -> Result<[f64; HEADS]> {
        let losses = Mlp::from_tensors(model)?.head_mse(&self.held_out);
        if losses.iter().all(|l| l.is_finite()) {
            Ok(losses)
        } else {
            Err(Error::Evaluation(format!("non-finite loss for `{}`", model.id())))
        }
    }

    /// Held-out target variance of each task.
    pub fn variances(&self) -> [f64; HEADS] {
        let n = self.held_out.len() as f64;
        let mut out = [0.0; HEADS];
        for (k, v) in out.iter_mut().enumerate() {
            let mean = self.held_out.targets.iter().map(|y| y[k]).sum::<f64>() / n;
            *v = self.held_out.targets.iter().map(|y| (y[k] - mean).powi(2)).sum::<f64>() / n;
        }
        out
    }

    /// Per-task scores in `(0, 100]`: `100 · var / (var + mse)`, so 100 is
    /// a perfect fit and 50 is as good as predicting the mean.
    pub fn scores(&self, model: &TensorMap) -> Result<[f64; HEADS]> {
        let losses = self.losses(model)?;
        let vars = self.variances();
        Ok([0, 1].map(|k| 100.0 * vars[k] / (vars[k] + losses[k])))
    }
}

/// Mean of the per-task losses.
pub fn combined_loss(losses: &[f64; HEADS]) -> f64 {
    losses.iter().sum::<f64>() / HEADS as f64
}

/// Where each checkpoint of a pair came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub seed: u64,
    pub init_seed: u64,
    pub pretrained_id: String,
    pub pretext_steps: usize,
    pub fine_tune_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTaskPair {
    pub pretrained: TensorMap,
    pub model_t1: TensorMap,
    pub model_t2: TensorMap,
    pub tasks: ToyTasks,
    pub lineage: Lineage,
}

/// Trains the pretext network and both fine-tunes for `seed`.
///
/// Fine-tuning starts from the `f32`-rounded pretext weights, i.e. exactly
/// the stored `pretrained` checkpoint.
pub fn build_toy_pair(seed: u64) -> Result<ToyTaskPair> {
    let tasks = ToyTasks::generate(seed);
    let init_seed = derive_seed(seed, 0);
    let mut pre = Mlp::init(init_seed);
    pre.train(&tasks.pretext, [1.0, 1.0], &PRETEXT, seed)?;
    let pre = pre.quantized();
    let prefix = format!("toy{seed}");
    let pretrained = pre.to_tensors(&format!("{prefix}/pretrained"))?;

    let fine_tune = |head: usize| -> Result<TensorMap> {
        let mut weights = [0.0; HEADS];
        weights[head] = 1.0;
        let mut m = pre.clone();
        m.train(&tasks.train, weights, &FINE_TUNE, seed)?;
        m.to_tensors(&format!("{prefix}/t{}", head + 1))
    };
    let model_t1 = fine_tune(0)?;
    let model_t2 = fine_tune(1)?;
    check_congruent(&pretrained, &model_t1)?;
    check_congruent(&pretrained, &model_t2)?;
    Ok(ToyTaskPair {
        lineage: Lineage {
            seed,
            init_seed,
            pretrained_id: pretrained.id().to_string(),
            pretext_steps: PRETEXT.steps,
            fine_tune_steps: FINE_TUNE.steps,
        },
        pretrained,
        model_t1,
        model_t2,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::digest_of;

    #[test]
    fn tasks_are_deterministic_and_distinct() {
        let a = ToyTasks::generate(4);
        assert_eq!(a, ToyTasks::generate(4));
        assert_ne!(a, ToyTasks::generate(5));
        let differ = a.train.targets.iter().filter(|y| (y[0] - y[1]).abs() > 1e-3).count();
        assert!(differ > TRAIN_SIZE / 2);
    }

    #[test]
    fn pair_is_deterministic_and_fine_tunes_help() {
        let p = build_toy_pair(3).unwrap();
        let q = build_toy_pair(3).unwrap();
        for (a, b) in [(&p.pretrained, &q.pretrained), (&p.model_t1, &q.model_t1), (&p.model_t2, &q.model_t2)] {
            assert_eq!(digest_of(a), digest_of(b));
        }
        let pre = p.tasks.losses(&p.pretrained).unwrap();
        let t1 = p.tasks.losses(&p.model_t1).unwrap();
        let t2 = p.tasks.losses(&p.model_t2).unwrap();
        assert!(t1[0] < pre[0], "{t1:?} vs {pre:?}");
        assert!(t2[1] < pre[1], "{t2:?} vs {pre:?}");
        assert_eq!(p.lineage.pretrained_id, p.pretrained.id());
    }

    #[test]
    fn scores_are_bounded() {
        let p = build_toy_pair(1).unwrap();
        for s in p.tasks.scores(&p.model_t1).unwrap() {
            assert!(s > 0.0 && s <= 100.0);
        }
    }
}
