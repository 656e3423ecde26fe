//! Deterministic sampling of the interpolation coefficient from a symmetric
//! Beta distribution, and the α-sweep schedule.
//!
//! A draw is `X / (X + Y)` with `X, Y ~ Gamma(α, 1)` generated by the
//! Marsaglia–Tsang squeeze method (boosted by `U^(1/α)` when `α < 1`). The
//! ratio is snapped to the grid `k / 2^53`; a draw that lands on 0 or 1 is
//! discarded and the whole draw is repeated on the next substream of the
//! same seed. On that grid `1 - λ` is exact, so swapping the two merged
//! models and replacing `λ` with `1 - λ` reproduces the same weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, CounterRng};

/// Alphas of the default sweep, one draw each.
pub const DEFAULT_ALPHAS: [f64; 7] = [0.2, 0.4, 0.5, 1.0, 2.0, 3.0, 5.0];

const GRID: f64 = (1u64 << 53) as f64;

/// Shape of the symmetric distribution `Beta(α, α)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaShape {
    alpha: f64,
}

impl BetaShape {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha.is_finite() && alpha > 0.0 {
            Ok(BetaShape { alpha })
        } else {
            Err(Error::InvalidAlpha(alpha))
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Closed-form variance `1 / (4 (2α + 1))`.
    pub fn variance(&self) -> f64 {
        1.0 / (4.0 * (2.0 * self.alpha + 1.0))
    }
}

/// Provenance of one coefficient draw: `(alpha, seed)` regenerate
/// `lambda_m` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingRecord {
    pub alpha: f64,
    pub seed: u64,
    pub lambda_m: f64,
}

impl SamplingRecord {
    /// Builds a record from known values without drawing, e.g. to carry a
    /// published `(λ_m, α)` pair. Only the ranges are validated.
    pub fn fixture(alpha: f64, seed: u64, lambda_m: f64) -> Result<Self> {
        BetaShape::new(alpha)?;
        if !(lambda_m > 0.0 && lambda_m < 1.0) {
            return Err(Error::LambdaOutOfRange(lambda_m));
        }
        Ok(SamplingRecord {
            alpha,
            seed,
            lambda_m,
        })
    }

    /// True when `(alpha, seed)` regenerate this record's coefficient.
    pub fn is_reproducible(&self) -> bool {
        BetaShape::new(self.alpha)
            .map(|shape| sample_lambda(shape, self.seed).lambda_m == self.lambda_m)
            .unwrap_or(false)
    }
}

fn gamma_draw(rng: &mut CounterRng, alpha: f64) -> f64 {
    if alpha < 1.0 {
        let boost = libm::pow(rng.next_open01(), 1.0 / alpha);
        return gamma_draw(rng, alpha + 1.0) * boost;
    }
    let d = alpha - 1.0 / 3.0;
    let c = 1.0 / libm::sqrt(9.0 * d);
    loop {
        let x = rng.next_normal();
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u = rng.next_open01();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 {
            return d * v;
        }
        if libm::log(u) < 0.5 * x2 + d * (1.0 - v + libm::log(v)) {
            return d * v;
        }
    }
}

/// Draws `λ_m ~ Beta(α, α)` strictly inside `(0, 1)`, reproducibly from
/// `seed`.
pub fn sample_lambda(shape: BetaShape, seed: u64) -> SamplingRecord {
    let mut substream = 0u64;
    loop {
        let mut rng = CounterRng::new(seed, substream);
        let x = gamma_draw(&mut rng, shape.alpha);
        let y = gamma_draw(&mut rng, shape.alpha);
        let ratio = x / (x + y);
        if ratio.is_finite() {
            let k = (ratio * GRID).round();
            if k > 0.0 && k < GRID {
                return SamplingRecord {
                    alpha: shape.alpha,
                    seed,
                    lambda_m: k / GRID,
                };
            }
        }
        substream += 1;
    }
}

/// Density of `Beta(α, α)` at `x`, for validation and plotting.
pub fn beta_pdf(shape: BetaShape, x: f64) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::PdfDomain(x));
    }
    let a = shape.alpha;
    let log_beta = 2.0 * libm::lgamma(a) - libm::lgamma(2.0 * a);
    Ok(libm::exp((a - 1.0) * (libm::log(x) + libm::log1p(-x)) - log_beta))
}

/// Alphas to sweep and the root seed the per-alpha seeds derive from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSchedule {
    pub alphas: Vec<f64>,
    pub base_seed: u64,
}

impl SweepSchedule {
    pub fn new(alphas: Vec<f64>, base_seed: u64) -> Self {
        SweepSchedule { alphas, base_seed }
    }

    pub fn with_default_alphas(base_seed: u64) -> Self {
        SweepSchedule::new(DEFAULT_ALPHAS.to_vec(), base_seed)
    }

    /// Seed used for the draw at position `index`.
    pub fn seed_for(&self, index: usize) -> u64 {
        derive_seed(self.base_seed, index as u64)
    }
}

/// One draw per alpha, in schedule order.
pub fn make_sweep(schedule: &SweepSchedule) -> Result<Vec<SamplingRecord>> {
    if schedule.alphas.is_empty() {
        return Err(Error::EmptySchedule);
    }
    let shapes = schedule
        .alphas
        .iter()
        .map(|&a| BetaShape::new(a))
        .collect::<Result<Vec<_>>>()?;
    Ok(shapes
        .into_iter()
        .enumerate()
        .map(|(i, shape)| sample_lambda(shape, schedule.seed_for(i)))
        .collect())
}
