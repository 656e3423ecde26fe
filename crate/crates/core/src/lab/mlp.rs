//! A small two-hidden-layer tanh network with one linear output head per
//! task, trained in `f64` by full-batch gradient descent.

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{Tensor, TensorMap};

pub const INPUT_DIM: usize = 3;
pub const HIDDEN: usize = 32;
pub const HEADS: usize = 2;

/// Tensor names and shapes, in flat parameter order.
pub const LAYOUT: [(&str, [usize; 2]); 6] = [
    ("l1.weight", [HIDDEN, INPUT_DIM]),
    ("l1.bias", [HIDDEN, 1]),
    ("l2.weight", [HIDDEN, HIDDEN]),
    ("l2.bias", [HIDDEN, 1]),
    ("l3.weight", [HEADS, HIDDEN]),
    ("l3.bias", [HEADS, 1]),
];

pub const NUM_PARAMS: usize =
    HIDDEN * INPUT_DIM + HIDDEN + HIDDEN * HIDDEN + HIDDEN + HEADS * HIDDEN + HEADS;

// Offsets into the flat parameter vector.
const W1: usize = 0;
const B1: usize = W1 + HIDDEN * INPUT_DIM;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + HIDDEN * HIDDEN;
const W3: usize = B2 + HIDDEN;
const B3: usize = W3 + HEADS * HIDDEN;

fn tensor_shape(shape: [usize; 2]) -> Vec<usize> {
    if shape[1] == 1 {
        vec![shape[0]]
    } else {
        shape.to_vec()
    }
}

/// Supervised data: `inputs[i]` maps to `targets[i][head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<[f64; INPUT_DIM]>,
    pub targets: Vec<[f64; HEADS]>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Network parameters as one flat `f64` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub params: Vec<f64>,
}

impl Mlp {
    /// Scaled-normal initialisation (variance `1 / fan_in`), zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = CounterRng::new(seed, 0);
        let mut params = vec![0.0; NUM_PARAMS];
        for (range, fan_in) in [
            (W1..B1, INPUT_DIM),
            (W2..B2, HIDDEN),
            (W3..B3, HIDDEN),
        ] {
            let scale = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.next_normal() * scale;
            }
        }
        Mlp { params }
    }

    pub fn from_tensors(map: &TensorMap) -> Result<Self> {
        let mut params = Vec::with_capacity(NUM_PARAMS);
        for (name, shape) in LAYOUT {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Evaluation(format!("missing tensor `{name}`")))?;
            let want = tensor_shape(shape);
            if t.shape() != want.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    left: t.shape().to_vec(),
                    right: want,
                });
            }
            params.extend(t.data().iter().map(|&x| x as f64));
        }
        if map.len() != LAYOUT.len() {
            return Err(Error::Evaluation(format!(
                "expected {} tensors, found {}",
                LAYOUT.len(),
                map.len()
            )));
        }
        Ok(Mlp { params })
    }

    /// Rounds the parameters to `f32` storage.
    pub fn to_tensors(&self, id: &str) -> Result<TensorMap> {
        let mut map = TensorMap::new(id);
        let mut at = 0;
        for (name, shape) in LAYOUT {
            let n = shape[0] * shape[1];
            let data = self.params[at..at + n].iter().map(|&x| x as f32).collect();
            map.insert(name, Tensor::new(name, tensor_shape(shape), data)?);
            at += n;
        }
        Ok(map)
    }

    /// Rounds every parameter through `f32`, so the network evaluates the
    /// same as its stored checkpoint.
    pub fn quantized(&self) -> Self {
        Mlp {
            params: self.params.iter().map(|&x| x as f32 as f64).collect(),
        }
    }

    fn hidden(&self, x: &[f64; INPUT_DIM], h1: &mut [f64; HIDDEN], h2: &mut [f64; HIDDEN]) {
        let p = &self.params;
        for j in 0..HIDDEN {
            let row = &p[W1 + j * INPUT_DIM..W1 + (j + 1) * INPUT_DIM];
            let z: f64 = p[B1 + j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            h1[j] = z.tanh();
        }
        for j in 0..HIDDEN {
            let row = &p[W2 + j * HIDDEN..W2 + (j + 1) * HIDDEN];
            let z: f64 = p[B2 + j] + row.iter().zip(h1.iter()).map(|(w, v)| w * v).sum::<f64>();
            h2[j] = z.tanh();
        }
    }

    pub fn forward(&self, x: &[f64; INPUT_DIM]) -> [f64; HEADS] {
        let mut h1 = [0.0; HIDDEN];
        let mut h2 = [0.0; HIDDEN];
        self.hidden(x, &mut h1, &mut h2);
        self.head(&h2)
    }

    fn head(&self, h2: &[f64; HIDDEN]) -> [f64; HEADS] {
        let p = &self.params;
        let mut out = [0.0; HEADS];
        for (k, o) in out.iter_mut().enumerate() {
            let row = &p[W3 + k * HIDDEN..W3 + (k + 1) * HIDDEN];
            *o = p[B3 + k] + row.iter().zip(h2).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }

    /// Mean squared error of each head over `data`.
    pub fn head_mse(&self, data: &Dataset) -> [f64; HEADS] {
        let mut sums = [0.0; HEADS];
        for (x, y) in data.inputs.iter().zip(&data.targets) {
            let out = self.forward(x);
            for k in 0..HEADS {
                sums[k] += (out[k] - y[k]).powi(2);
            }
        }
        sums.map(|s| s / data.len() as f64)
    }

    /// Training loss `Σ_k w_k · mse_k`.
    pub fn loss(&self, data: &Dataset, weights: [f64; HEADS]) -> f64 {
        self.head_mse(data).iter().zip(weights).map(|(m, w)| m * w).sum()
    }

    /// Loss and its gradient with respect to every parameter, by backprop.
    pub fn loss_and_grad(&self, data: &Dataset, weights: [f64; HEADS]) -> (f64, Vec<f64>) {
        let p = &self.params;
        let n = data.len() as f64;
        let mut grad = vec![0.0; NUM_PARAMS];
        let mut loss = 0.0;
        let mut h1 = [0.0; HIDDEN];
        let mut h2 = [0.0; HIDDEN];
        for (x, y) in data.inputs.iter().zip(&data.targets) {
            self.hidden(x, &mut h1, &mut h2);
            let out = self.head(&h2);
            let mut g2 = [0.0; HIDDEN];
            for k in 0..HEADS {
                let r = out[k] - y[k];
                loss += weights[k] * r * r / n;
                let go = 2.0 * weights[k] * r / n;
                if go == 0.0 {
                    continue;
                }
                grad[B3 + k] += go;
                for j in 0..HIDDEN {
                    grad[W3 + k * HIDDEN + j] += go * h2[j];
                    g2[j] += go * p[W3 + k * HIDDEN + j];
                }
            }
            let mut g1 = [0.0; HIDDEN];
            for j in 0..HIDDEN {
                let gz = g2[j] * (1.0 - h2[j] * h2[j]);
                if gz == 0.0 {
                    continue;
                }
                grad[B2 + j] += gz;
                let row = W2 + j * HIDDEN;
                for i in 0..HIDDEN {
                    grad[row + i] += gz * h1[i];
                    g1[i] += gz * p[row + i];
                }
            }
            for j in 0..HIDDEN {
                let gz = g1[j] * (1.0 - h1[j] * h1[j]);
                grad[B1 + j] += gz;
                for i in 0..INPUT_DIM {
                    grad[W1 + j * INPUT_DIM + i] += gz * x[i];
                }
            }
        }
        (loss, grad)
    }

    /// Heavy-ball gradient descent on the full batch; returns the final
    /// loss. Fails with [`Error::Diverged`] as soon as the loss stops being
    /// finite.
    pub fn train(&mut self, data: &Dataset, weights: [f64; HEADS], schedule: &TrainSchedule, seed: u64) -> Result<f64> {
        let mut velocity = vec![0.0; NUM_PARAMS];
        for _ in 0..schedule.steps {
            let (l, g) = self.loss_and_grad(data, weights);
            if !l.is_finite() {
                return Err(Error::Diverged { seed });
            }
            for ((p, v), g) in self.params.iter_mut().zip(&mut velocity).zip(&g) {
                *v = schedule.momentum * *v - schedule.learning_rate * g;
                *p += *v;
            }
        }
        let l = self.loss(data, weights);
        if !l.is_finite() || self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { seed });
        }
        Ok(l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_data(seed: u64, n: usize) -> Dataset {
        let mut rng = CounterRng::new(seed, 9);
        let inputs: Vec<[f64; 3]> = (0..n)
            .map(|_| [0; 3].map(|_| 2.0 * rng.next_f64() - 1.0))
            .collect();
        let targets = inputs
            .iter()
            .map(|x| [(2.0 * x[0]).sin() + x[1] * x[2], x[0] * x[0] - x[2]])
            .collect();
        Dataset { inputs, targets }
    }

    #[test]
    fn layout_adds_up() {
        let total: usize = LAYOUT.iter().map(|(_, s)| s[0] * s[1]).sum();
        assert_eq!(total, NUM_PARAMS);
        assert_eq!(B3 + HEADS, NUM_PARAMS);
    }

    #[test]
    fn tensor_round_trip_is_f32_quantisation() {
        let m = Mlp::init(3);
        let map = m.to_tensors("m").unwrap();
        assert_eq!(map.num_params(), NUM_PARAMS);
        assert_eq!(map.get("l1.bias").unwrap().shape(), &[HIDDEN]);
        let back = Mlp::from_tensors(&map).unwrap();
        assert_eq!(back, m.quantized());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = toy_data(1, 16);
        let mut m = Mlp::init(5);
        for p in &mut m.params[B1..B2] {
            *p += 0.1;
        }
        let (_, g) = m.loss_and_grad(&data, [1.0, 0.5]);
        let h = 1e-6;
        for i in (0..NUM_PARAMS).step_by(37) {
            let mut plus = m.clone();
            plus.params[i] += h;
            let mut minus = m.clone();
            minus.params[i] -= h;
            let fd = (plus.loss(&data, [1.0, 0.5]) - minus.loss(&data, [1.0, 0.5])) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: analytic {} vs fd {fd}", g[i]);
        }
    }

    #[test]
    fn training_reduces_loss() {
        let data = toy_data(2, 64);
        let mut m = Mlp::init(1);
        let before = m.loss(&data, [1.0, 1.0]);
        let schedule = TrainSchedule {
            steps: 200,
            learning_rate: 0.05,
            momentum: 0.9,
        };
        let after = m.train(&data, [1.0, 1.0], &schedule, 1).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn divergence_reports_seed() {
        let data = toy_data(2, 8);
        let mut m = Mlp::init(1);
        let schedule = TrainSchedule {
            steps: 200,
            learning_rate: 1e6,
            momentum: 0.9,
        };
        assert!(matches!(
            m.train(&data, [1.0, 1.0], &schedule, 77),
            Err(Error::Diverged { seed: 77 })
        ));
    }
}
