//! Merging procedures: averaging, task arithmetic, TIES, their Beta-mixup
//! (M³) reformulations, and DARE drop-and-rescale.
//!
//! All procedures are pure. Deltas are formed in `f64` from the stored
//! `f32` values and the merged checkpoint is rounded once on write.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::checkpoint::{digest_of, digest_of_delta};
use crate::error::{Error, Result};
use crate::manifest::{InputRecord, InputRole, ManifestMethod, MergeManifest, OutputRecord, SamplingBlock};
use crate::rng::{derive_seed, CounterRng};
use crate::sampler::SamplingRecord;
use crate::tensor::{self, build_like, check_congruent, DeltaSet, TensorMap};

/// Scaling terms searched for task arithmetic and TIES.
pub const SCALING_GRID: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
/// Retain ratios searched for TIES.
pub const RETAIN_GRID: [f64; 3] = [0.5, 0.7, 0.9];
/// Drop rate used when DARE is combined with the other methods.
pub const DEFAULT_DROP_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Average,
    TaskArithmetic,
    Ties,
    M3Average,
    M3TaskArithmetic,
    M3Ties,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 6] = [
        MergeMethod::Average,
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
        MergeMethod::M3Average,
        MergeMethod::M3TaskArithmetic,
        MergeMethod::M3Ties,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::Average => "average",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::M3Average => "m3_average",
            MergeMethod::M3TaskArithmetic => "m3_task_arithmetic",
            MergeMethod::M3Ties => "m3_ties",
        }
    }

    pub fn is_m3(self) -> bool {
        matches!(
            self,
            MergeMethod::M3Average | MergeMethod::M3TaskArithmetic | MergeMethod::M3Ties
        )
    }

    /// Methods defined on deltas against a pretrained base.
    pub fn needs_base(self) -> bool {
        !matches!(self, MergeMethod::Average | MergeMethod::M3Average)
    }

    pub fn uses_scaling(self) -> bool {
        matches!(
            self,
            MergeMethod::TaskArithmetic | MergeMethod::Ties | MergeMethod::M3Ties
        )
    }

    pub fn uses_retain_ratio(self) -> bool {
        matches!(self, MergeMethod::Ties | MergeMethod::M3Ties)
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    /// Accepts `snake_case` or `kebab-case` names.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        MergeMethod::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Recipe(format!("unknown merge method `{s}`")))
    }
}

/// DARE settings: drop each delta element with probability `drop_rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsifyConfig {
    pub drop_rate: f64,
    pub seed: u64,
}

impl SparsifyConfig {
    pub fn new(drop_rate: f64, seed: u64) -> Result<Self> {
        let cfg = SparsifyConfig { drop_rate, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if (0.0..1.0).contains(&self.drop_rate) {
            Ok(())
        } else {
            Err(Error::InvalidDropRate(self.drop_rate))
        }
    }

    /// Config applied to the `index`-th model of a merge, so that models with
    /// identical tensor names receive independent masks.
    pub fn for_model(&self, index: usize) -> SparsifyConfig {
        SparsifyConfig {
            drop_rate: self.drop_rate,
            seed: derive_seed(self.seed, index as u64),
        }
    }
}

/// Method plus every hyperparameter needed to reproduce a merge.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    pub lambda_m: Option<f64>,
    pub scaling_term: Option<f64>,
    pub retain_ratio: Option<f64>,
    pub dare: Option<SparsifyConfig>,
    pub sampling: Option<SamplingRecord>,
}

impl MergeRecipe {
    pub fn new(method: MergeMethod) -> Self {
        MergeRecipe {
            method,
            lambda_m: None,
            scaling_term: None,
            retain_ratio: None,
            dare: None,
            sampling: None,
        }
    }

    /// Uses an explicit coefficient with no sampling provenance.
    pub fn with_lambda(mut self, lambda_m: f64) -> Self {
        self.lambda_m = Some(lambda_m);
        self.sampling = None;
        self
    }

    /// Uses a sampled coefficient and records where it came from.
    pub fn with_sampling(mut self, rec: SamplingRecord) -> Self {
        self.lambda_m = Some(rec.lambda_m);
        self.sampling = Some(rec);
        self
    }

    pub fn with_scaling(mut self, scaling: f64) -> Self {
        self.scaling_term = Some(scaling);
        self
    }

    pub fn with_retain_ratio(mut self, ratio: f64) -> Self {
        self.retain_ratio = Some(ratio);
        self
    }

    pub fn with_dare(mut self, cfg: SparsifyConfig) -> Self {
        self.dare = Some(cfg);
        self
    }

    /// Checks that exactly the fields the method needs are present and in
    /// range.
    pub fn validate(&self) -> Result<()> {
        let m = self.method;
        let bad = |msg: String| Err(Error::Recipe(msg));
        if m.is_m3() {
            match self.lambda_m {
                None => return bad(format!("{m} requires lambda_m")),
                Some(l) if !(l > 0.0 && l < 1.0) => return Err(Error::LambdaOutOfRange(l)),
                Some(l) => {
                    if let Some(rec) = &self.sampling {
                        if rec.lambda_m != l {
                            return bad(format!(
                                "lambda_m {l} disagrees with sampled value {}",
                                rec.lambda_m
                            ));
                        }
                    }
                }
            }
        } else if self.lambda_m.is_some() || self.sampling.is_some() {
            return bad(format!("{m} takes no lambda_m or sampling record"));
        }
        match (m.uses_scaling(), self.scaling_term) {
            (true, None) => return bad(format!("{m} requires scaling_term")),
            (false, Some(_)) => return bad(format!("{m} takes no scaling_term")),
            (true, Some(s)) if !s.is_finite() => return bad(format!("scaling_term {s} is not finite")),
            _ => {}
        }
        match (m.uses_retain_ratio(), self.retain_ratio) {
            (true, None) => return bad(format!("{m} requires retain_ratio")),
            (false, Some(_)) => return bad(format!("{m} takes no retain_ratio")),
            (true, Some(r)) if !(r > 0.0 && r <= 1.0) => return Err(Error::InvalidRetainRatio(r)),
            _ => {}
        }
        if let Some(cfg) = &self.dare {
            cfg.validate()?;
        }
        Ok(())
    }

    /// Additionally requires scaling and retain ratio to come from the
    /// hyperparameter search grids.
    pub fn validate_grid(&self) -> Result<()> {
        self.validate()?;
        if let Some(s) = self.scaling_term {
            if !SCALING_GRID.contains(&s) {
                return Err(Error::Recipe(format!("scaling_term {s} not in search grid")));
            }
        }
        if let Some(r) = self.retain_ratio {
            if !RETAIN_GRID.contains(&r) {
                return Err(Error::Recipe(format!("retain_ratio {r} not in search grid")));
            }
        }
        Ok(())
    }

    /// Every grid point for a non-M³ method, scaling-major.
    pub fn grid(method: MergeMethod) -> Vec<MergeRecipe> {
        let scalings: &[f64] = if method.uses_scaling() { &SCALING_GRID } else { &[f64::NAN] };
        let ratios: &[f64] = if method.uses_retain_ratio() { &RETAIN_GRID } else { &[f64::NAN] };
        let mut out = Vec::new();
        for &s in scalings {
            for &r in ratios {
                let mut recipe = MergeRecipe::new(method);
                if !s.is_nan() {
                    recipe.scaling_term = Some(s);
                }
                if !r.is_nan() {
                    recipe.retain_ratio = Some(r);
                }
                out.push(recipe);
            }
        }
        out
    }
}

fn check_open_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda < 1.0 {
        Ok(())
    } else {
        Err(Error::LambdaOutOfRange(lambda))
    }
}

fn join_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    ids.into_iter().collect::<Vec<_>>().join(",")
}

/// Where per-model deltas come from: fine-tuned checkpoints minus the base,
/// or stored delta sets.
#[derive(Clone, Copy)]
enum DeltaSource<'a> {
    Models(&'a [&'a TensorMap]),
    Deltas(&'a [&'a DeltaSet]),
}

impl<'a> DeltaSource<'a> {
    fn len(&self) -> usize {
        match self {
            DeltaSource::Models(m) => m.len(),
            DeltaSource::Deltas(d) => d.len(),
        }
    }

    fn check(&self, base: &TensorMap) -> Result<()> {
        match self {
            DeltaSource::Models(models) => models.iter().try_for_each(|m| check_congruent(base, m)),
            DeltaSource::Deltas(deltas) => deltas.iter().try_for_each(|d| {
                if d.base_id() != base.id() {
                    return Err(Error::BaseMismatch {
                        expected: base.id().to_string(),
                        found: d.base_id().to_string(),
                    });
                }
                check_congruent(base, d.tensors())
            }),
        }
    }

    /// Per-model `f64` deltas of tensor `name`.
    fn deltas(&self, base: &TensorMap, name: &str) -> Vec<Vec<f64>> {
        let b = base.get(name).expect("congruence checked").data();
        match self {
            DeltaSource::Models(models) => models
                .iter()
                .map(|m| {
                    let t = m.get(name).expect("congruence checked").data();
                    t.iter().zip(b).map(|(&x, &y)| x as f64 - y as f64).collect()
                })
                .collect(),
            DeltaSource::Deltas(deltas) => deltas
                .iter()
                .map(|d| {
                    let t = d.tensors().get(name).expect("congruence checked").data();
                    t.iter().map(|&x| x as f64).collect()
                })
                .collect(),
        }
    }

    fn ids(&self) -> String {
        match self {
            DeltaSource::Models(m) => join_ids(m.iter().map(|t| t.id())),
            DeltaSource::Deltas(d) => join_ids(d.iter().map(|t| t.tensors().id())),
        }
    }
}

/// `base + offset` per element, where `offset` is computed per tensor.
fn offset_base<F>(id: String, base: &TensorMap, src: DeltaSource<'_>, mut offset: F) -> Result<TensorMap>
where
    F: FnMut(&[Vec<f64>]) -> Vec<f64>,
{
    src.check(base)?;
    build_like(id, base, |name, tb| {
        let deltas = src.deltas(base, name);
        let off = offset(&deltas);
        Ok(tb.data().iter().zip(off).map(|(&b, o)| b as f64 + o).collect())
    })
}

/// `(θ1 + θ2) / 2`.
pub fn average_merge(theta1: &TensorMap, theta2: &TensorMap) -> Result<TensorMap> {
    check_congruent(theta1, theta2)?;
    build_like(format!("average({},{})", theta1.id(), theta2.id()), theta1, |name, t1| {
        let t2 = theta2.get(name).expect("congruence checked");
        Ok(t1
            .data()
            .iter()
            .zip(t2.data())
            .map(|(&a, &b)| 0.5 * a as f64 + 0.5 * b as f64)
            .collect())
    })
}

fn task_arithmetic_from(base: &TensorMap, src: DeltaSource<'_>, scaling: f64) -> Result<TensorMap> {
    if src.len() == 0 {
        return Err(Error::Recipe("task arithmetic needs at least one model".into()));
    }
    let id = format!("task_arithmetic({};{})", base.id(), src.ids());
    offset_base(id, base, src, |deltas| {
        let mut sum = vec![0.0f64; deltas[0].len()];
        for d in deltas {
            for (s, &x) in sum.iter_mut().zip(d) {
                *s += x;
            }
        }
        sum.into_iter().map(|s| scaling * s).collect()
    })
}

/// `base + scaling · Σ_i (θ_i − base)`.
pub fn task_arithmetic(base: &TensorMap, models: &[&TensorMap], scaling: f64) -> Result<TensorMap> {
    task_arithmetic_from(base, DeltaSource::Models(models), scaling)
}

/// `λ_m · θ1 + (1 − λ_m) · θ2` for `λ_m` strictly inside `(0, 1)`.
pub fn m3_average(theta1: &TensorMap, theta2: &TensorMap, lambda_m: f64) -> Result<TensorMap> {
    check_open_lambda(lambda_m)?;
    let merged = tensor::lerp(theta1, theta2, lambda_m)?;
    Ok(merged.with_id(format!("m3_average({},{})", theta1.id(), theta2.id())))
}

fn m3_offsets_from(base: &TensorMap, src: DeltaSource<'_>, lambda_m: f64, label: &str) -> Result<TensorMap> {
    check_open_lambda(lambda_m)?;
    if src.len() != 2 {
        return Err(Error::Recipe(format!("{label} merges exactly two models")));
    }
    let mu = 1.0 - lambda_m;
    let id = format!("{label}({};{})", base.id(), src.ids());
    offset_base(id, base, src, |deltas| {
        deltas[0]
            .iter()
            .zip(&deltas[1])
            .map(|(&d1, &d2)| lambda_m * d1 + mu * d2)
            .collect()
    })
}

/// `base + λ_m · δ1 + (1 − λ_m) · δ2` with `δ_i = θ_i − base`.
pub fn m3_task_arithmetic(
    base: &TensorMap,
    theta1: &TensorMap,
    theta2: &TensorMap,
    lambda_m: f64,
) -> Result<TensorMap> {
    m3_offsets_from(base, DeltaSource::Models(&[theta1, theta2]), lambda_m, "m3_task_arithmetic")
}

fn name_stream(name: &str) -> u64 {
    let h = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// DARE: zero each element independently with probability `p` and scale the
/// survivors by `1 / (1 − p)`.
///
/// Each tensor draws from its own substream keyed by a hash of its name, so
/// masks do not depend on which other tensors are present.
pub fn dare_sparsify(d: &DeltaSet, cfg: &SparsifyConfig) -> Result<DeltaSet> {
    cfg.validate()?;
    let id = format!("dare({},p={})", d.tensors().id(), cfg.drop_rate);
    if cfg.drop_rate == 0.0 {
        return Ok(DeltaSet::new(d.base_id(), d.tensors().clone().with_id(id)));
    }
    let keep_scale = 1.0 / (1.0 - cfg.drop_rate);
    let tensors = build_like(id, d.tensors(), |name, t| {
        let mut rng = CounterRng::new(cfg.seed, name_stream(name));
        Ok(t
            .data()
            .iter()
            .map(|&x| {
                if rng.next_f64() < cfg.drop_rate {
                    0.0
                } else {
                    x as f64 * keep_scale
                }
            })
            .collect())
    })?;
    Ok(DeltaSet::new(d.base_id(), tensors))
}

/// Intermediates of TIES: per-task trimmed deltas and trim masks, plus the
/// elected sign of every parameter. Maps are keyed by tensor name.
#[derive(Debug, Clone, PartialEq)]
pub struct TiesWork {
    pub trimmed: Vec<BTreeMap<String, Vec<f64>>>,
    pub retained: Vec<BTreeMap<String, Vec<bool>>>,
    pub signs: BTreeMap<String, Vec<i8>>,
}

/// Number of entries kept out of `n`: `⌈ratio · n⌉`, with products that are
/// integers up to rounding noise (e.g. `0.7 · 100`) taken as exact.
pub fn retained_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * r.max(1.0) { r } else { x.ceil() };
    (k as usize).min(n)
}

/// Mask of the `⌈ratio · n⌉` largest magnitudes; equal magnitudes are kept
/// in ascending index order.
pub fn trim_mask(values: &[f64], ratio: f64) -> Vec<bool> {
    let k = retained_count(ratio, values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .abs()
            .partial_cmp(&values[i].abs())
            .expect("finite deltas")
            .then(i.cmp(&j))
    });
    let mut mask = vec![false; values.len()];
    for &i in &order[..k] {
        mask[i] = true;
    }
    mask
}

/// Sign of the summed trimmed deltas per parameter: `+1` on an exact tie,
/// `0` where every trimmed delta is zero.
pub fn elect_signs(trimmed: &[Vec<f64>]) -> Vec<i8> {
    let n = trimmed.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            if trimmed.iter().all(|t| t[i] == 0.0) {
                0
            } else if trimmed.iter().map(|t| t[i]).sum::<f64>() >= 0.0 {
                1
            } else {
                -1
            }
        })
        .collect()
}

fn agrees(value: f64, sign: i8) -> bool {
    (sign > 0 && value > 0.0) || (sign < 0 && value < 0.0)
}

/// Merged offsets for one tensor. Classic TIES averages the sign-agreeing
/// retained deltas; with `lambda_m`, a parameter kept by both of two tasks
/// is interpolated instead and a parameter kept by one passes through.
fn disjoint_merge(trimmed: &[Vec<f64>], signs: &[i8], lambda_m: Option<f64>) -> Vec<f64> {
    signs
        .iter()
        .enumerate()
        .map(|(i, &s)| match lambda_m {
            None => {
                let (sum, count) = trimmed
                    .iter()
                    .map(|t| t[i])
                    .filter(|&v| agrees(v, s))
                    .fold((0.0, 0usize), |(acc, c), v| (acc + v, c + 1));
                if count == 0 {
                    0.0
                } else {
                    sum / count as f64
                }
            }
            Some(l) => {
                let (a, b) = (trimmed[0][i], trimmed[1][i]);
                match (agrees(a, s), agrees(b, s)) {
                    (true, true) => l * a + (1.0 - l) * b,
                    (true, false) => a,
                    (false, true) => b,
                    (false, false) => 0.0,
                }
            }
        })
        .collect()
}

fn ties_work_from(base: &TensorMap, src: DeltaSource<'_>, retain_ratio: f64) -> Result<TiesWork> {
    if !(retain_ratio > 0.0 && retain_ratio <= 1.0) {
        return Err(Error::InvalidRetainRatio(retain_ratio));
    }
    if src.len() == 0 {
        return Err(Error::Recipe("TIES needs at least one model".into()));
    }
    src.check(base)?;
    let tasks = src.len();
    let mut work = TiesWork {
        trimmed: vec![BTreeMap::new(); tasks],
        retained: vec![BTreeMap::new(); tasks],
        signs: BTreeMap::new(),
    };
    for name in base.names() {
        let deltas = src.deltas(base, name);
        let mut trimmed = Vec::with_capacity(tasks);
        for (t, d) in deltas.into_iter().enumerate() {
            let mask = trim_mask(&d, retain_ratio);
            let kept: Vec<f64> = d.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
            work.retained[t].insert(name.to_string(), mask);
            trimmed.push(kept);
        }
        work.signs.insert(name.to_string(), elect_signs(&trimmed));
        for (t, kept) in trimmed.into_iter().enumerate() {
            work.trimmed[t].insert(name.to_string(), kept);
        }
    }
    Ok(work)
}

/// Trim and sign-election stages of TIES, exposed for inspection.
pub fn ties_work(base: &TensorMap, models: &[&TensorMap], retain_ratio: f64) -> Result<TiesWork> {
    ties_work_from(base, DeltaSource::Models(models), retain_ratio)
}

fn ties_from(
    base: &TensorMap,
    src: DeltaSource<'_>,
    retain_ratio: f64,
    scaling: f64,
    lambda_m: Option<f64>,
) -> Result<TensorMap> {
    let label = if let Some(l) = lambda_m {
        check_open_lambda(l)?;
        if src.len() != 2 {
            return Err(Error::Recipe("m3_ties merges exactly two models".into()));
        }
        "m3_ties"
    } else {
        "ties"
    };
    let work = ties_work_from(base, src, retain_ratio)?;
    build_like(format!("{label}({};{})", base.id(), src.ids()), base, |name, tb| {
        let trimmed: Vec<Vec<f64>> = work.trimmed.iter().map(|t| t[name].clone()).collect();
        let merged = disjoint_merge(&trimmed, &work.signs[name], lambda_m);
        Ok(tb
            .data()
            .iter()
            .zip(merged)
            .map(|(&b, m)| b as f64 + scaling * m)
            .collect())
    })
}

/// TIES-Merging: trim each task delta per tensor to its largest
/// `⌈retain_ratio · n⌉` magnitudes, elect a sign per parameter, average the
/// agreeing deltas, and add the scaled result to the base.
pub fn ties_merge(
    base: &TensorMap,
    models: &[&TensorMap],
    retain_ratio: f64,
    scaling: f64,
) -> Result<TensorMap> {
    ties_from(base, DeltaSource::Models(models), retain_ratio, scaling, None)
}

/// TIES with the disjoint mean over two doubly-retained deltas replaced by
/// `λ_m · δ1 + (1 − λ_m) · δ2`.
pub fn ties_m3_merge(
    base: &TensorMap,
    theta1: &TensorMap,
    theta2: &TensorMap,
    retain_ratio: f64,
    scaling: f64,
    lambda_m: f64,
) -> Result<TensorMap> {
    ties_from(
        base,
        DeltaSource::Models(&[theta1, theta2]),
        retain_ratio,
        scaling,
        Some(lambda_m),
    )
}

fn dispatch_deltas(recipe: &MergeRecipe, base: &TensorMap, src: DeltaSource<'_>) -> Result<TensorMap> {
    let m = recipe.method;
    let scaling = recipe.scaling_term.unwrap_or(1.0);
    let retain = recipe.retain_ratio.unwrap_or(1.0);
    match m {
        MergeMethod::Average => m3_offsets_from(base, src, 0.5, "average"),
        MergeMethod::M3Average | MergeMethod::M3TaskArithmetic => {
            m3_offsets_from(base, src, recipe.lambda_m.expect("validated"), m.name())
        }
        MergeMethod::TaskArithmetic => task_arithmetic_from(base, src, scaling),
        MergeMethod::Ties => ties_from(base, src, retain, scaling, None),
        MergeMethod::M3Ties => ties_from(base, src, retain, scaling, recipe.lambda_m),
    }
}

fn check_model_count(method: MergeMethod, n: usize) -> Result<()> {
    let ok = match method {
        MergeMethod::Average | MergeMethod::M3Average | MergeMethod::M3TaskArithmetic | MergeMethod::M3Ties => n == 2,
        MergeMethod::TaskArithmetic | MergeMethod::Ties => n >= 1,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Recipe(format!("{method} cannot merge {n} model(s)")))
    }
}

fn manifest_for(
    recipe: &MergeRecipe,
    inputs: Vec<InputRecord>,
    merged: &TensorMap,
) -> MergeManifest {
    MergeManifest {
        toolkit: MergeManifest::toolkit_string(),
        method: ManifestMethod::from(recipe.method),
        inputs,
        scaling_term: recipe.scaling_term,
        retain_ratio: recipe.retain_ratio,
        dare: recipe.dare,
        sampling: recipe.lambda_m.map(|l| match recipe.sampling {
            Some(rec) => SamplingBlock::from(rec),
            None => SamplingBlock::explicit(l),
        }),
        output: OutputRecord {
            id: merged.id().to_string(),
            digest: digest_of(merged),
        },
        created_unix: None,
    }
}

fn input_records(base: Option<&TensorMap>, models: &[&TensorMap]) -> Vec<InputRecord> {
    base.map(|b| InputRecord::new(InputRole::Base, b.id(), digest_of(b)))
        .into_iter()
        .chain(models.iter().map(|m| InputRecord::new(InputRole::Model, m.id(), digest_of(m))))
        .collect()
}

/// Runs `recipe` on full checkpoints and returns the merged checkpoint with
/// its provenance manifest.
///
/// With DARE enabled (drop rate above zero), each model's delta against
/// `base` is sparsified first and the method then runs in delta space; a
/// zero drop rate leaves the inputs untouched.
pub fn merge(
    recipe: &MergeRecipe,
    base: Option<&TensorMap>,
    models: &[&TensorMap],
) -> Result<(TensorMap, MergeManifest)> {
    recipe.validate()?;
    check_model_count(recipe.method, models.len())?;
    let m = recipe.method;
    let sparsify = recipe.dare.filter(|c| c.drop_rate > 0.0);
    if (m.needs_base() || sparsify.is_some()) && base.is_none() {
        return Err(Error::Recipe(format!("{m} requires a base checkpoint")));
    }

    let merged = match (sparsify, base) {
        (Some(cfg), Some(base)) => {
            let deltas = models
                .iter()
                .enumerate()
                .map(|(j, model)| dare_sparsify(&tensor::delta(model, base)?, &cfg.for_model(j)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&DeltaSet> = deltas.iter().collect();
            dispatch_deltas(recipe, base, DeltaSource::Deltas(&refs))?
        }
        _ => match m {
            MergeMethod::Average => average_merge(models[0], models[1])?,
            MergeMethod::M3Average => m3_average(models[0], models[1], recipe.lambda_m.expect("validated"))?,
            _ => dispatch_deltas(recipe, base.expect("checked"), DeltaSource::Models(models))?,
        },
    };
    let manifest = manifest_for(recipe, input_records(base, models), &merged);
    Ok((merged, manifest))
}

/// Runs `recipe` on stored delta sets against `base`. Deltas are sparsified
/// first when DARE is enabled.
pub fn merge_deltas(
    recipe: &MergeRecipe,
    base: &TensorMap,
    deltas: &[&DeltaSet],
) -> Result<(TensorMap, MergeManifest)> {
    recipe.validate()?;
    check_model_count(recipe.method, deltas.len())?;
    let merged = match recipe.dare.filter(|c| c.drop_rate > 0.0) {
        Some(cfg) => {
            let sparse = deltas
                .iter()
                .enumerate()
                .map(|(j, d)| dare_sparsify(d, &cfg.for_model(j)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&DeltaSet> = sparse.iter().collect();
            dispatch_deltas(recipe, base, DeltaSource::Deltas(&refs))?
        }
        None => dispatch_deltas(recipe, base, DeltaSource::Deltas(deltas))?,
    };
    let inputs = std::iter::once(InputRecord::new(InputRole::Base, base.id(), digest_of(base)))
        .chain(
            deltas
                .iter()
                .map(|d| InputRecord::new(InputRole::Delta, d.tensors().id(), digest_of_delta(d))),
        )
        .collect();
    let manifest = manifest_for(recipe, inputs, &merged);
    Ok((merged, manifest))
}

fn check_replay_inputs(manifest: &MergeManifest, supplied: &[InputRecord]) -> Result<()> {
    if supplied != manifest.inputs {
        return Err(Error::Recipe(
            "supplied inputs do not match the manifest's recorded inputs".into(),
        ));
    }
    Ok(())
}

/// Re-runs a merge manifest against the given inputs after checking that
/// they are the recorded ones (same roles, order, and digests). The result
/// carries the recorded output id, so its digest matches the manifest's.
pub fn replay(manifest: &MergeManifest, base: Option<&TensorMap>, models: &[&TensorMap]) -> Result<TensorMap> {
    let recipe = manifest.recipe()?;
    check_replay_inputs(manifest, &input_records(base, models))?;
    let (merged, _) = merge(&recipe, base, models)?;
    Ok(merged.with_id(manifest.output.id.clone()))
}

/// [`replay`] for manifests produced by [`merge_deltas`].
pub fn replay_deltas(manifest: &MergeManifest, base: &TensorMap, deltas: &[&DeltaSet]) -> Result<TensorMap> {
    let recipe = manifest.recipe()?;
    let (merged, produced) = merge_deltas(&recipe, base, deltas)?;
    check_replay_inputs(manifest, &produced.inputs)?;
    Ok(merged.with_id(manifest.output.id.clone()))
}

/// Gives a merge result a new id and updates its manifest to match.
pub fn rename_output(merged: TensorMap, manifest: &mut MergeManifest, id: &str) -> TensorMap {
    let merged = merged.with_id(id);
    manifest.output = OutputRecord {
        id: id.to_string(),
        digest: digest_of(&merged),
    };
    merged
}
