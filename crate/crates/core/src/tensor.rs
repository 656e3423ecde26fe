//! Named tensor collections and the interpolation algebra every merge is
//! built from.
//!
//! Values are stored as `f32`. Every operation accumulates in `f64` and
//! rounds once when the result is written back, so algebraic identities
//! between the operations hold to within a single `f32` rounding.

use std::collections::btree_map;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Storage precision of tensor values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ElementKind {
    #[default]
    F32,
}

impl ElementKind {
    /// Tag used in checkpoint headers.
    pub fn tag(self) -> &'static str {
        match self {
            ElementKind::F32 => "F32",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "F32" => Some(ElementKind::F32),
            _ => None,
        }
    }

    pub fn size_in_bytes(self) -> usize {
        match self {
            ElementKind::F32 => 4,
        }
    }
}

/// A dense row-major tensor of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking the element count against the shape and
    /// rejecting NaN or infinite values. `name` is only used for errors.
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                name: name.to_string(),
                shape,
                expected,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: name.to_string(),
                index,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rounds `values` to `f32` once, failing on overflow to infinity.
    pub(crate) fn from_f64(name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(values.len());
        for (index, v) in values.into_iter().enumerate() {
            let x = v as f32;
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    name: name.to_string(),
                    index,
                });
            }
            data.push(x);
        }
        Tensor::new(name, shape, data)
    }
}

/// An ordered collection of named tensors plus the identity string of the
/// checkpoint it represents. Iteration is lexicographic by name.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorMap {
    id: String,
    entries: BTreeMap<String, Tensor>,
}

impl TensorMap {
    pub fn new(id: impl Into<String>) -> Self {
        TensorMap {
            id: id.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn element_kind(&self) -> ElementKind {
        ElementKind::F32
    }

    /// Inserts a tensor, replacing any previous tensor under the same name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), tensor)
    }

    /// Convenience for building maps from raw parts.
    pub fn insert_raw(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<()> {
        let name = name.into();
        let tensor = Tensor::new(&name, shape, data)?;
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, Tensor> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters across all tensors.
    pub fn num_params(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }
}

impl<'a> IntoIterator for &'a TensorMap {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = btree_map::Iter<'a, String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

/// Parameter offsets of a fine-tuned checkpoint relative to a named base.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet {
    base_id: String,
    tensors: TensorMap,
}

impl DeltaSet {
    pub fn new(base_id: impl Into<String>, tensors: TensorMap) -> Self {
        DeltaSet {
            base_id: base_id.into(),
            tensors,
        }
    }

    pub fn base_id(&self) -> &str {
        &self.base_id
    }

    pub fn tensors(&self) -> &TensorMap {
        &self.tensors
    }

    pub fn into_tensors(self) -> TensorMap {
        self.tensors
    }
}

/// One parameter where two deltas pull in opposite directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Conflict {
    pub tensor: String,
    pub index: usize,
    pub delta1: f32,
    pub delta2: f32,
    /// Interpolation weight on the first delta at which the two cancel.
    pub cancel_at: f64,
}

impl Conflict {
    /// `lambda * delta1 + (1 - lambda) * delta2`, the merged offset of this
    /// parameter along the interpolation path.
    pub fn offset_at(&self, lambda: f64) -> f64 {
        lambda * self.delta1 as f64 + (1.0 - lambda) * self.delta2 as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConflictProfile {
    pub entries: Vec<Conflict>,
    /// Number of parameters examined, conflicting or not.
    pub scanned: usize,
}

/// Fails unless `a` and `b` have the same tensor names with equal shapes.
pub fn check_congruent(a: &TensorMap, b: &TensorMap) -> Result<()> {
    let left: BTreeSet<&str> = a.names().collect();
    let right: BTreeSet<&str> = b.names().collect();
    if left != right {
        return Err(Error::NameMismatch {
            only_left: left.difference(&right).map(|s| s.to_string()).collect(),
            only_right: right.difference(&left).map(|s| s.to_string()).collect(),
        });
    }
    for (name, ta) in a {
        let tb = &b.entries[name];
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
    }
    Ok(())
}

/// Builds a map with the names and shapes of `template`, filling each tensor
/// from the `f64` values returned by `fill`.
pub(crate) fn build_like<F>(id: String, template: &TensorMap, mut fill: F) -> Result<TensorMap>
where
    F: FnMut(&str, &Tensor) -> Result<Vec<f64>>,
{
    let mut out = TensorMap::new(id);
    for (name, t) in template {
        let values = fill(name, t)?;
        debug_assert_eq!(values.len(), t.len());
        out.entries
            .insert(name.clone(), Tensor::from_f64(name, t.shape.clone(), values)?);
    }
    Ok(out)
}

/// `lambda * a + (1 - lambda) * b` elementwise, for `lambda` in `[0, 1]`.
///
/// The endpoints return the corresponding input bit-for-bit.
pub fn lerp(a: &TensorMap, b: &TensorMap, lambda: f64) -> Result<TensorMap> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    check_congruent(a, b)?;
    let id = format!("lerp({},{},{})", a.id, b.id, lambda);
    if lambda == 1.0 {
        return Ok(a.clone().with_id(id));
    }
    if lambda == 0.0 {
        return Ok(b.clone().with_id(id));
    }
    let mu = 1.0 - lambda;
    build_like(id, a, |name, ta| {
        let tb = &b.entries[name];
        Ok(ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| lambda * x as f64 + mu * y as f64)
            .collect())
    })
}

/// `fine - base`, tagged with the identity of `base`.
pub fn delta(fine: &TensorMap, base: &TensorMap) -> Result<DeltaSet> {
    check_congruent(fine, base)?;
    let id = format!("delta({}-{})", fine.id, base.id);
    let tensors = build_like(id, fine, |name, tf| {
        let tb = &base.entries[name];
        Ok(tf
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| x as f64 - y as f64)
            .collect())
    })?;
    Ok(DeltaSet::new(base.id.clone(), tensors))
}

fn check_delta_against(base: &TensorMap, d: &DeltaSet) -> Result<()> {
    if d.base_id != base.id {
        return Err(Error::BaseMismatch {
            expected: base.id.clone(),
            found: d.base_id.clone(),
        });
    }
    check_congruent(base, &d.tensors)
}

/// `base + Σ coefficient_j · delta_j` elementwise.
pub fn apply_deltas(base: &TensorMap, weighted: &[(f64, &DeltaSet)]) -> Result<TensorMap> {
    for (_, d) in weighted {
        check_delta_against(base, d)?;
    }
    if weighted.is_empty() {
        return Ok(base.clone());
    }
    let id = format!("apply({})", base.id);
    build_like(id, base, |name, tb| {
        let mut acc = vec![0.0f64; tb.len()];
        for (c, d) in weighted {
            let td = &d.tensors.entries[name];
            for (a, &x) in acc.iter_mut().zip(&td.data) {
                *a += c * x as f64;
            }
        }
        Ok(tb
            .data
            .iter()
            .zip(acc)
            .map(|(&b, a)| b as f64 + a)
            .collect())
    })
}

/// Lists every parameter where the two deltas have strictly opposite signs,
/// with the weight `|d2| / (|d1| + |d2|)` at which they cancel exactly.
pub fn conflict_profile(d1: &DeltaSet, d2: &DeltaSet) -> Result<ConflictProfile> {
    if d1.base_id != d2.base_id {
        return Err(Error::BaseMismatch {
            expected: d1.base_id.clone(),
            found: d2.base_id.clone(),
        });
    }
    check_congruent(&d1.tensors, &d2.tensors)?;
    let mut profile = ConflictProfile::default();
    for (name, t1) in &d1.tensors {
        let t2 = &d2.tensors.entries[name];
        profile.scanned += t1.len();
        for (index, (&x, &y)) in t1.data.iter().zip(&t2.data).enumerate() {
            if x == 0.0 || y == 0.0 || (x > 0.0) == (y > 0.0) {
                continue;
            }
            let (ax, ay) = ((x as f64).abs(), (y as f64).abs());
            profile.entries.push(Conflict {
                tensor: name.clone(),
                index,
                delta1: x,
                delta2: y,
                cancel_at: ay / (ax + ay),
            });
        }
    }
    Ok(profile)
}
