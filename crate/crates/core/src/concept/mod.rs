//! Concept-embedding bundles: `K` synonym/antonym embedding pairs for one
//! target concept plus the neutral (empty prompt) embedding.
//!
//! Bundle layout (a safetensors container):
//!
//! | tensor            | meaning                                       |
//! |-------------------|-----------------------------------------------|
//! | `syn/<i>`         | synonym `i`, `L × n`                          |
//! | `ant/<i>`         | antonym `i`, `L × n`                          |
//! | `ant/<i>/absent`  | zero-length flag: slot `i` has no antonym     |
//! | `neutral`         | embedding of the empty prompt, `L × n`        |
//!
//! Metadata keys: `concept`, `encoder_id`, `k`.

mod fetch;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::container::{self, DType, Tensor, TensorMap};
use crate::error::{Error, Result};

pub use fetch::{fetch_concept_bundle, EmbeddingClient};

pub const DEFAULT_K: usize = 5;
pub const MAX_K: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSpec {
    pub concept_label: String,
    pub encoder_id: String,
    pub synonyms: Vec<DMatrix<f64>>,
    /// `None` marks a slot without an antonym; the neutral embedding stands in.
    pub antonyms: Vec<Option<DMatrix<f64>>>,
    pub neutral: DMatrix<f64>,
    /// On-disk dtype used when the bundle is written.
    pub dtype: DType,
}

impl ConceptSpec {
    pub fn new(
        concept_label: impl Into<String>,
        synonyms: Vec<DMatrix<f64>>,
        antonyms: Vec<Option<DMatrix<f64>>>,
        neutral: DMatrix<f64>,
    ) -> Result<Self> {
        let spec = Self {
            concept_label: concept_label.into(),
            encoder_id: "unspecified".into(),
            synonyms,
            antonyms,
            neutral,
            dtype: DType::F32,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn k(&self) -> usize {
        self.synonyms.len()
    }

    /// `(L, n)` shared by every embedding.
    pub fn embedding_shape(&self) -> (usize, usize) {
        self.neutral.shape()
    }

    /// Anchor for pair `i`: the antonym, or the neutral embedding when absent.
    pub fn antonym_or_neutral(&self, i: usize) -> Result<&DMatrix<f64>> {
        match self.antonyms.get(i) {
            Some(Some(antonym)) => Ok(antonym),
            Some(None) => Ok(&self.neutral),
            None => Err(Error::IndexOutOfRange {
                index: i,
                len: self.k(),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.synonyms.len();
        if k != self.antonyms.len() {
            return Err(Error::UnevenPairs {
                synonyms: k,
                antonyms: self.antonyms.len(),
            });
        }
        if !(1..=MAX_K).contains(&k) {
            return Err(Error::InvalidBundle(format!("K = {k} outside 1..={MAX_K}")));
        }
        let shape = self.neutral.shape();
        let all = self
            .synonyms
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("syn/{i}"), m))
            .chain(
                self.antonyms
                    .iter()
                    .enumerate()
                    .filter_map(|(i, m)| m.as_ref().map(|m| (format!("ant/{i}"), m))),
            )
            .chain(std::iter::once(("neutral".to_string(), &self.neutral)));
        for (name, m) in all {
            if m.shape() != shape {
                return Err(Error::ShapeDisagreement(format!(
                    "`{name}` is {:?}, neutral is {:?}",
                    m.shape(),
                    shape
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput(format!("embedding `{name}`")));
            }
        }
        Ok(())
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let mut synonyms = BTreeMap::new();
        let mut antonyms = BTreeMap::new();
        let mut absent = BTreeMap::new();
        let mut neutral = None;
        for (name, tensor) in map.iter() {
            let index = |s: &str| -> Result<usize> {
                s.parse()
                    .map_err(|_| Error::InvalidBundle(format!("bad slot index in `{name}`")))
            };
            if name == "neutral" {
                neutral = Some(tensor.to_matrix()?);
            } else if let Some(i) = name.strip_prefix("syn/") {
                synonyms.insert(index(i)?, tensor.to_matrix()?);
            } else if let Some(i) = name.strip_prefix("ant/").and_then(|s| s.strip_suffix("/absent")) {
                absent.insert(index(i)?, ());
            } else if let Some(i) = name.strip_prefix("ant/") {
                antonyms.insert(index(i)?, tensor.to_matrix()?);
            } else {
                return Err(Error::InvalidBundle(format!("unexpected tensor `{name}`")));
            }
        }
        let neutral = neutral.ok_or(Error::MissingNeutral)?;

        let k = synonyms.len();
        if synonyms.keys().copied().ne(0..k) {
            return Err(Error::InvalidBundle("synonym slots must be numbered 0..K".into()));
        }
        if let Some(i) = antonyms.keys().find(|i| absent.contains_key(i)) {
            return Err(Error::InvalidBundle(format!(
                "slot {i} has both an antonym and an absent flag"
            )));
        }
        let slots = antonyms.len() + absent.len();
        if slots != k {
            return Err(Error::UnevenPairs {
                synonyms: k,
                antonyms: slots,
            });
        }
        let mut antonym_slots = Vec::with_capacity(k);
        for i in 0..k {
            match (antonyms.remove(&i), absent.contains_key(&i)) {
                (Some(m), _) => antonym_slots.push(Some(m)),
                (None, true) => antonym_slots.push(None),
                (None, false) => {
                    return Err(Error::InvalidBundle(format!("antonym slot {i} is missing")))
                }
            }
        }
        if let Some(declared) = map.metadata_value("k") {
            if declared.parse::<usize>().ok() != Some(k) {
                return Err(Error::InvalidBundle(format!(
                    "metadata declares k = {declared} but the bundle has {k} pairs"
                )));
            }
        }
        let dtype = map.get("neutral").map(Tensor::dtype).unwrap_or(DType::F32);
        let spec = Self {
            concept_label: map.metadata_value("concept").unwrap_or_default().to_string(),
            encoder_id: map
                .metadata_value("encoder_id")
                .unwrap_or("unspecified")
                .to_string(),
            synonyms: synonyms.into_values().collect(),
            antonyms: antonym_slots,
            neutral,
            dtype,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_tensor_map(&self) -> Result<TensorMap> {
        self.validate()?;
        let mut map = TensorMap::new();
        for (i, m) in self.synonyms.iter().enumerate() {
            map.insert(format!("syn/{i}"), Tensor::from_matrix(self.dtype, m)?)?;
        }
        for (i, m) in self.antonyms.iter().enumerate() {
            match m {
                Some(m) => map.insert(format!("ant/{i}"), Tensor::from_matrix(self.dtype, m)?)?,
                None => map.insert(format!("ant/{i}/absent"), Tensor::flag())?,
            }
        }
        map.insert("neutral", Tensor::from_matrix(self.dtype, &self.neutral)?)?;
        map.insert_metadata("concept", &self.concept_label);
        map.insert_metadata("encoder_id", &self.encoder_id);
        map.insert_metadata("k", self.k().to_string());
        Ok(map)
    }
}

pub fn load_concept_spec(path: impl AsRef<Path>) -> Result<ConceptSpec> {
    ConceptSpec::from_tensor_map(&container::read_file(path)?)
}

pub fn write_concept_spec(spec: &ConceptSpec, path: impl AsRef<Path>) -> Result<()> {
    container::write_file(path, &spec.to_tensor_map()?)
}

/// Embeddings of unrelated prompts, used only to measure collateral drift.
#[derive(Debug, Clone, PartialEq)]
pub struct BenignProbeSet {
    pub probes: Vec<DMatrix<f64>>,
}

impl BenignProbeSet {
    /// Every 2-D tensor in the container, in file order.
    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let probes = map
            .iter()
            .filter(|(_, t)| t.shape().len() == 2)
            .map(|(_, t)| t.to_matrix())
            .collect::<Result<Vec<_>>>()?;
        if probes.is_empty() {
            return Err(Error::InvalidBundle("probe bundle contains no embeddings".into()));
        }
        Ok(Self { probes })
    }

    pub fn to_tensor_map(&self) -> Result<TensorMap> {
        let mut map = TensorMap::new();
        for (i, p) in self.probes.iter().enumerate() {
            map.insert(format!("probe/{i}"), Tensor::from_matrix(DType::F32, p)?)?;
        }
        Ok(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_map(&container::read_file(path)?)
    }

    /// Checks every probe against the concept's `(L, n)`.
    pub fn check_against(&self, spec: &ConceptSpec) -> Result<()> {
        let shape = spec.embedding_shape();
        match self.probes.iter().position(|p| p.shape() != shape) {
            Some(i) => Err(Error::ShapeDisagreement(format!(
                "probe {i} is {:?}, concept embeddings are {:?}",
                self.probes[i].shape(),
                shape
            ))),
            None => Ok(()),
        }
    }
}
