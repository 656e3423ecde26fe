//! Provenance manifests written next to every produced checkpoint.
//!
//! A manifest is UTF-8 JSON with a closed schema (unknown fields are
//! rejected). It records the operation, every input with its content
//! digest, all hyperparameters, the coefficient sampling block for M³
//! merges, and the digest of the produced checkpoint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{digest_of, digest_of_delta, Digest};
use crate::error::{Error, Result};
use crate::merge::{MergeMethod, MergeRecipe, SparsifyConfig};
use crate::sampler::SamplingRecord;
use crate::tensor::{DeltaSet, TensorMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestMethod {
    Average,
    TaskArithmetic,
    Ties,
    M3Average,
    M3TaskArithmetic,
    M3Ties,
    /// `fine − base` delta extraction.
    Delta,
    /// Standalone DARE on a delta file.
    DareSparsify,
}

impl ManifestMethod {
    pub fn as_merge(self) -> Option<MergeMethod> {
        Some(match self {
            ManifestMethod::Average => MergeMethod::Average,
            ManifestMethod::TaskArithmetic => MergeMethod::TaskArithmetic,
            ManifestMethod::Ties => MergeMethod::Ties,
            ManifestMethod::M3Average => MergeMethod::M3Average,
            ManifestMethod::M3TaskArithmetic => MergeMethod::M3TaskArithmetic,
            ManifestMethod::M3Ties => MergeMethod::M3Ties,
            ManifestMethod::Delta | ManifestMethod::DareSparsify => return None,
        })
    }
}

impl From<MergeMethod> for ManifestMethod {
    fn from(m: MergeMethod) -> Self {
        match m {
            MergeMethod::Average => ManifestMethod::Average,
            MergeMethod::TaskArithmetic => ManifestMethod::TaskArithmetic,
            MergeMethod::Ties => ManifestMethod::Ties,
            MergeMethod::M3Average => ManifestMethod::M3Average,
            MergeMethod::M3TaskArithmetic => ManifestMethod::M3TaskArithmetic,
            MergeMethod::M3Ties => ManifestMethod::M3Ties,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputRole {
    Base,
    Model,
    Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputRecord {
    pub role: InputRole,
    pub id: String,
    pub digest: Digest,
}

impl InputRecord {
    pub fn new(role: InputRole, id: &str, digest: Digest) -> Self {
        InputRecord {
            role,
            id: id.to_string(),
            digest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputRecord {
    pub id: String,
    pub digest: Digest,
}

/// The coefficient used by an M³ merge. `alpha` and `seed` are present when
/// the coefficient was sampled and absent when it was given explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub lambda_m: f64,
}

impl SamplingBlock {
    pub fn explicit(lambda_m: f64) -> Self {
        SamplingBlock {
            alpha: None,
            seed: None,
            lambda_m,
        }
    }

    pub fn record(&self) -> Option<SamplingRecord> {
        Some(SamplingRecord {
            alpha: self.alpha?,
            seed: self.seed?,
            lambda_m: self.lambda_m,
        })
    }
}

impl From<SamplingRecord> for SamplingBlock {
    fn from(r: SamplingRecord) -> Self {
        SamplingBlock {
            alpha: Some(r.alpha),
            seed: Some(r.seed),
            lambda_m: r.lambda_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeManifest {
    pub toolkit: String,
    pub method: ManifestMethod,
    pub inputs: Vec<InputRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling_term: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retain_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dare: Option<SparsifyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingBlock>,
    pub output: OutputRecord,
    /// Seconds since the Unix epoch; left empty by the library so that
    /// manifests are reproducible byte-for-byte.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
}

fn schema(path: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_string(),
        message: message.into(),
    }
}

impl MergeManifest {
    pub fn toolkit_string() -> String {
        format!("mixmerge {}", env!("CARGO_PKG_VERSION"))
    }

    /// Enforces the cross-field rules the JSON shape alone cannot express.
    pub fn validate(&self) -> Result<()> {
        let method = self.method;
        let is_m3 = method.as_merge().is_some_and(MergeMethod::is_m3);
        match (&self.sampling, is_m3) {
            (Some(_), false) => {
                return Err(schema("sampling", format!("{method:?} merges carry no sampling block")))
            }
            (None, true) => return Err(schema("sampling", "required for M³ merges")),
            (Some(s), true) => {
                if s.alpha.is_some() != s.seed.is_some() {
                    return Err(schema("sampling", "alpha and seed must appear together"));
                }
                if let Some(a) = s.alpha {
                    if !(a.is_finite() && a > 0.0) {
                        return Err(schema("sampling.alpha", "must be positive"));
                    }
                }
                if !(s.lambda_m > 0.0 && s.lambda_m < 1.0) {
                    return Err(schema("sampling.lambda_m", "must lie in (0, 1)"));
                }
            }
            (None, false) => {}
        }
        if let Some(m) = method.as_merge() {
            if m.uses_scaling() != self.scaling_term.is_some() {
                return Err(schema("scaling_term", format!("presence does not match method {m}")));
            }
            if m.uses_retain_ratio() != self.retain_ratio.is_some() {
                return Err(schema("retain_ratio", format!("presence does not match method {m}")));
            }
            if let Some(r) = self.retain_ratio {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(schema("retain_ratio", "must lie in (0, 1]"));
                }
            }
        } else {
            if self.scaling_term.is_some() {
                return Err(schema("scaling_term", "not used by this operation"));
            }
            if self.retain_ratio.is_some() {
                return Err(schema("retain_ratio", "not used by this operation"));
            }
            if method == ManifestMethod::DareSparsify && self.dare.is_none() {
                return Err(schema("dare", "required for dare_sparsify"));
            }
            if method == ManifestMethod::Delta && self.dare.is_some() {
                return Err(schema("dare", "not used by delta extraction"));
            }
        }
        if let Some(d) = &self.dare {
            if !(0.0..1.0).contains(&d.drop_rate) {
                return Err(schema("dare.drop_rate", "must lie in [0, 1)"));
            }
        }
        if self.inputs.is_empty() {
            return Err(schema("inputs", "at least one input is required"));
        }
        Ok(())
    }

    /// The merge recipe this manifest records.
    pub fn recipe(&self) -> Result<MergeRecipe> {
        self.validate()?;
        let method = self
            .method
            .as_merge()
            .ok_or_else(|| schema("method", format!("{:?} is not a merge", self.method)))?;
        let mut recipe = MergeRecipe::new(method);
        recipe.scaling_term = self.scaling_term;
        recipe.retain_ratio = self.retain_ratio;
        recipe.dare = self.dare;
        if let Some(s) = &self.sampling {
            recipe = match s.record() {
                Some(rec) => recipe.with_sampling(rec),
                None => recipe.with_lambda(s.lambda_m),
            };
        }
        Ok(recipe)
    }

    /// Manifest for `out = fine - base`.
    pub fn for_delta(fine: &TensorMap, base: &TensorMap, out: &DeltaSet) -> Self {
        MergeManifest {
            toolkit: Self::toolkit_string(),
            method: ManifestMethod::Delta,
            inputs: vec![
                InputRecord::new(InputRole::Model, fine.id(), digest_of(fine)),
                InputRecord::new(InputRole::Base, base.id(), digest_of(base)),
            ],
            scaling_term: None,
            retain_ratio: None,
            dare: None,
            sampling: None,
            output: OutputRecord {
                id: out.tensors().id().to_string(),
                digest: digest_of_delta(out),
            },
            created_unix: None,
        }
    }

    /// Manifest for DARE applied to a stored delta set.
    pub fn for_sparsify(input: &DeltaSet, cfg: SparsifyConfig, out: &DeltaSet) -> Self {
        MergeManifest {
            toolkit: Self::toolkit_string(),
            method: ManifestMethod::DareSparsify,
            inputs: vec![InputRecord::new(InputRole::Delta, input.tensors().id(), digest_of_delta(input))],
            scaling_term: None,
            retain_ratio: None,
            dare: Some(cfg),
            sampling: None,
            output: OutputRecord {
                id: out.tensors().id().to_string(),
                digest: digest_of_delta(out),
            },
            created_unix: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let manifest: MergeManifest = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            schema(&path, e.into_inner().to_string())
        })?;
        manifest.validate()?;
        Ok(manifest)
    }
}

pub fn write_manifest(m: &MergeManifest, path: impl AsRef<Path>) -> Result<()> {
    m.validate()?;
    let path = path.as_ref();
    let mut text = m.to_json();
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<MergeManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MergeManifest::from_json(&text)
}
