//! LoRA adapter model: tensor-name resolution, delta composition, scaling and
//! weighted merging.
//!
//! Orientation: `A` (down) is `r × n_in` and `B` (up) is `m_out × r`, exactly
//! as stored on disk, so [`compose_delta`] yields the `m_out × n_in` update.
//! The editing math works on the transpose (`n_in × m_out`, see
//! [`math_delta`]) so that an `L × n_in` embedding projects as `c · W`.
//! [`BaseWeights`] are transposed into that orientation on load.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use globset::{Glob, GlobSetBuilder};
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::container::{self, DType, Tensor, TensorMap};
use crate::error::{Error, Result};
use crate::svd;

/// Cross-attention key/value projections, the layers that consume text embeddings.
pub const DEFAULT_TARGET_PATTERNS: [&str; 2] = ["*attn2*to_k*", "*attn2*to_v*"];

/// How the stored alpha turns into the multiplier folded into `B·A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScaleConvention {
    /// `alpha / rank`; the convention of every mainstream trainer.
    AlphaOverRank,
    /// No alpha tensor on disk; the product is used as-is.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NamingFamily {
    /// `<prefix>.lora_down.weight` / `<prefix>.lora_up.weight`
    DownUp,
    /// `<prefix>.lora_A.weight` / `<prefix>.lora_B.weight`
    LoraAB,
}

impl NamingFamily {
    fn suffixes(self) -> (&'static str, &'static str) {
        match self {
            NamingFamily::DownUp => (".lora_down.weight", ".lora_up.weight"),
            NamingFamily::LoraAB => (".lora_A.weight", ".lora_B.weight"),
        }
    }
}

/// On-disk dtypes of a layer's tensors, restored on save.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDtypes {
    pub down: DType,
    pub up: DType,
    pub alpha: DType,
}

impl Default for LayerDtypes {
    fn default() -> Self {
        Self {
            down: DType::F32,
            up: DType::F32,
            alpha: DType::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    /// Canonical identifier shared with [`BaseWeights`].
    pub name: String,
    /// Tensor-name prefix as found on disk.
    pub key_prefix: String,
    pub family: NamingFamily,
    /// `A`, `r × n`.
    pub down: DMatrix<f64>,
    /// `B`, `m × r`.
    pub up: DMatrix<f64>,
    pub stored_alpha: f64,
    pub convention: ScaleConvention,
    pub dtypes: LayerDtypes,
}

impl LoraLayer {
    /// A layer in the `lora_down`/`lora_up` family with an explicit alpha.
    pub fn new(
        name: impl Into<String>,
        down: DMatrix<f64>,
        up: DMatrix<f64>,
        stored_alpha: f64,
    ) -> Result<Self> {
        let name = name.into();
        let layer = Self {
            key_prefix: format!("lora_unet_{name}"),
            name,
            family: NamingFamily::DownUp,
            down,
            up,
            stored_alpha,
            convention: ScaleConvention::AlphaOverRank,
            dtypes: LayerDtypes::default(),
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn rank(&self) -> usize {
        self.down.nrows()
    }

    pub fn in_features(&self) -> usize {
        self.down.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.up.nrows()
    }

    pub fn scale(&self) -> f64 {
        scale_factor(self.stored_alpha, self.rank(), self.convention)
    }

    pub fn validate(&self) -> Result<()> {
        let rank = self.down.nrows();
        if rank == 0 {
            return Err(Error::InvalidAdapter(format!("`{}` has rank 0", self.name)));
        }
        if self.up.ncols() != rank {
            return Err(Error::ShapeMismatch(format!(
                "`{}`: B is {}×{} but A has {} rows",
                self.name,
                self.up.nrows(),
                self.up.ncols(),
                rank
            )));
        }
        if rank > self.in_features().min(self.out_features()) {
            return Err(Error::InvalidAdapter(format!(
                "`{}`: rank {} exceeds min({}, {})",
                self.name,
                rank,
                self.out_features(),
                self.in_features()
            )));
        }
        if !(self.stored_alpha >= 0.0 && self.stored_alpha.is_finite()) {
            return Err(Error::InvalidAdapter(format!(
                "`{}`: alpha {} must be finite and non-negative",
                self.name, self.stored_alpha
            )));
        }
        Ok(())
    }

    /// Replaces the factors so that `scale · B·A == delta` (`m × n`), keeping
    /// the layer's rank, naming and dtypes.
    pub fn with_delta(&self, delta: &DMatrix<f64>, rank: usize) -> Result<Self> {
        let (up, down) = svd::factorize(delta, rank)?;
        let mut layer = self.clone();
        if layer.scale() == 0.0 {
            // alpha = 0 cannot carry a non-zero delta; switch to a unit scale.
            layer.stored_alpha = rank as f64;
            layer.convention = ScaleConvention::AlphaOverRank;
        } else if layer.convention == ScaleConvention::AlphaOverRank && rank != layer.rank() {
            // keep the effective scale when the rank changes
            layer.stored_alpha = layer.scale() * rank as f64;
        }
        let root = layer_scale_root(&layer, rank);
        layer.up = up / root;
        layer.down = down / root;
        layer.validate()?;
        Ok(layer)
    }
}

fn layer_scale_root(layer: &LoraLayer, rank: usize) -> f64 {
    scale_factor(layer.stored_alpha, rank, layer.convention).sqrt()
}

/// Multiplier folded into `B·A`: `alpha / rank` under the alpha-over-rank
/// convention, else 1.
pub fn scale_factor(stored_alpha: f64, rank: usize, convention: ScaleConvention) -> f64 {
    match convention {
        ScaleConvention::AlphaOverRank => stored_alpha / rank.max(1) as f64,
        ScaleConvention::Unit => 1.0,
    }
}

/// `scale · B · A`, shaped `m × n`.
pub fn compose_delta(layer: &LoraLayer) -> Result<DMatrix<f64>> {
    if layer.up.ncols() != layer.down.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "`{}`: B is {}×{} but A is {}×{}",
            layer.name,
            layer.up.nrows(),
            layer.up.ncols(),
            layer.down.nrows(),
            layer.down.ncols()
        )));
    }
    Ok(&layer.up * &layer.down * layer.scale())
}

/// Delta in embedding orientation, `n × m`.
pub fn math_delta(layer: &LoraLayer) -> Result<DMatrix<f64>> {
    Ok(compose_delta(layer)?.transpose())
}

/// Maps on-disk names from the common trainers onto one identifier:
/// separators become `_` and the UNet/PEFT wrapper prefixes are dropped.
pub fn canonical_layer_name(key: &str) -> String {
    let mut name = key.replace('.', "_");
    for prefix in ["base_model_model_", "lora_unet_", "unet_"] {
        if let Some(rest) = name.strip_prefix(prefix) {
            name = rest.to_string();
        }
    }
    name
}

#[derive(Debug, Clone, Default)]
pub struct LoraAdapter {
    pub layers: BTreeMap<String, LoraLayer>,
    /// Tensors that are not 2-D LoRA factor pairs, written back unchanged.
    pub extras: TensorMap,
    pub base_model_hint: Option<String>,
    pub metadata: Option<BTreeMap<String, String>>,
    /// Non-fatal findings from loading, e.g. missing alpha tensors.
    pub warnings: Vec<String>,
}

#[derive(Default)]
struct PendingLayer<'a> {
    family: Option<NamingFamily>,
    down: Option<&'a Tensor>,
    up: Option<&'a Tensor>,
    alpha: Option<&'a Tensor>,
    keys: Vec<(&'a str, &'a Tensor)>,
}

fn split_key(key: &str) -> Option<(&str, &'static str)> {
    const SUFFIXES: [&str; 5] = [
        ".lora_down.weight",
        ".lora_up.weight",
        ".lora_A.weight",
        ".lora_B.weight",
        ".alpha",
    ];
    SUFFIXES
        .iter()
        .find_map(|s| key.strip_suffix(s).map(|prefix| (prefix, *s)))
}

impl LoraAdapter {
    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let mut pending: BTreeMap<&str, PendingLayer> = BTreeMap::new();
        let mut extras = Vec::new();
        for (key, tensor) in map.iter() {
            let Some((prefix, suffix)) = split_key(key) else {
                extras.push((key.to_string(), tensor.clone()));
                continue;
            };
            let entry = pending.entry(prefix).or_default();
            entry.keys.push((key, tensor));
            let family = match suffix {
                ".lora_down.weight" => {
                    entry.down = Some(tensor);
                    Some(NamingFamily::DownUp)
                }
                ".lora_up.weight" => {
                    entry.up = Some(tensor);
                    Some(NamingFamily::DownUp)
                }
                ".lora_A.weight" => {
                    entry.down = Some(tensor);
                    Some(NamingFamily::LoraAB)
                }
                ".lora_B.weight" => {
                    entry.up = Some(tensor);
                    Some(NamingFamily::LoraAB)
                }
                _ => {
                    entry.alpha = Some(tensor);
                    None
                }
            };
            if let Some(family) = family {
                if entry.family.is_some_and(|f| f != family) {
                    return Err(Error::InvalidAdapter(format!(
                        "`{prefix}` mixes lora_down/lora_up with lora_A/lora_B"
                    )));
                }
                entry.family = Some(family);
            }
        }

        let mut adapter = LoraAdapter {
            metadata: map.metadata().cloned(),
            base_model_hint: map
                .metadata_value("ss_sd_model_name")
                .or_else(|| map.metadata_value("base_model"))
                .map(str::to_string),
            ..Default::default()
        };
        for (prefix, p) in pending {
            let (Some(family), Some(down), Some(up)) = (p.family, p.down, p.up) else {
                if p.down.is_some() || p.up.is_some() {
                    return Err(Error::InvalidAdapter(format!(
                        "`{prefix}` has only one of its two LoRA factors"
                    )));
                }
                // alpha without factors
                extras.extend(p.keys.iter().map(|(k, t)| (k.to_string(), (*t).clone())));
                continue;
            };
            if down.shape().len() != 2 || up.shape().len() != 2 {
                // convolutional LoRA, carried through untouched
                extras.extend(p.keys.iter().map(|(k, t)| (k.to_string(), (*t).clone())));
                continue;
            }
            let name = canonical_layer_name(prefix);
            let (stored_alpha, convention, alpha_dtype) = match p.alpha {
                Some(t) => (t.to_scalar()?, ScaleConvention::AlphaOverRank, t.dtype()),
                None => {
                    adapter.warnings.push(format!(
                        "layer `{name}` has no alpha tensor; using scale 1.0"
                    ));
                    (down.shape()[0] as f64, ScaleConvention::Unit, DType::F32)
                }
            };
            let layer = LoraLayer {
                key_prefix: prefix.to_string(),
                family,
                down: down.to_matrix()?,
                up: up.to_matrix()?,
                stored_alpha,
                convention,
                dtypes: LayerDtypes {
                    down: down.dtype(),
                    up: up.dtype(),
                    alpha: alpha_dtype,
                },
                name: name.clone(),
            };
            layer.validate()?;
            if adapter.layers.insert(name.clone(), layer).is_some() {
                return Err(Error::InvalidAdapter(format!(
                    "two tensor prefixes canonicalize to `{name}`"
                )));
            }
        }
        adapter.extras = TensorMap::from_entries_unchecked(extras);
        Ok(adapter)
    }

    /// Layers in canonical-name order, then passthrough tensors in load order.
    pub fn to_tensor_map(&self) -> Result<TensorMap> {
        let mut map = TensorMap::new();
        for layer in self.layers.values() {
            let (down_suffix, up_suffix) = layer.family.suffixes();
            map.insert(
                format!("{}{}", layer.key_prefix, down_suffix),
                Tensor::from_matrix(layer.dtypes.down, &layer.down)?,
            )?;
            map.insert(
                format!("{}{}", layer.key_prefix, up_suffix),
                Tensor::from_matrix(layer.dtypes.up, &layer.up)?,
            )?;
            if layer.convention == ScaleConvention::AlphaOverRank {
                map.insert(
                    format!("{}.alpha", layer.key_prefix),
                    Tensor::from_f64(layer.dtypes.alpha, vec![], &[layer.stored_alpha])?,
                )?;
            }
        }
        for (name, tensor) in self.extras.iter() {
            map.insert(name, tensor.clone())?;
        }
        map.set_metadata(self.metadata.clone());
        Ok(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_map(&container::read_file(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::write_file(path, &self.to_tensor_map()?)
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }
}

/// Sorted names of the layers matching any of `patterns` (shell-style globs).
pub fn resolve_target_layers<S: AsRef<str>>(
    adapter: &LoraAdapter,
    patterns: &[S],
) -> Result<Vec<String>> {
    let owned: Vec<String> = patterns.iter().map(|p| p.as_ref().to_string()).collect();
    let mut builder = GlobSetBuilder::new();
    for pattern in &owned {
        let glob = Glob::new(pattern)
            .map_err(|e| Error::invalid_config("patterns", format!("`{pattern}`: {e}")))?;
        builder.add(glob);
    }
    let set = builder
        .build()
        .map_err(|e| Error::invalid_config("patterns", e.to_string()))?;
    let matched: Vec<String> = adapter
        .layers
        .keys()
        .filter(|name| set.is_match(name.as_str()))
        .cloned()
        .collect();
    if matched.is_empty() {
        return Err(Error::NoLayersMatched(owned));
    }
    Ok(matched)
}

/// Weighted sum of composed deltas, re-factorized per layer at the largest
/// input rank for that layer. Layers absent from an input contribute zero.
pub fn merge_adapters(adapters: &[(&LoraAdapter, f64)]) -> Result<LoraAdapter> {
    let Some((first, _)) = adapters.first() else {
        return Err(Error::invalid_config("adapters", "at least one adapter is required"));
    };
    let mut names: Vec<&str> = adapters
        .iter()
        .flat_map(|(a, _)| a.layer_names())
        .collect();
    names.sort_unstable();
    names.dedup();

    let merged: Vec<LoraLayer> = names
        .par_iter()
        .map(|&name| merge_layer(name, adapters))
        .collect::<Result<_>>()?;

    let mut extras = TensorMap::new();
    for (adapter, _) in adapters {
        for (key, tensor) in adapter.extras.iter() {
            if extras.get(key).is_none() {
                extras.insert(key, tensor.clone())?;
            }
        }
    }
    Ok(LoraAdapter {
        layers: merged.into_iter().map(|l| (l.name.clone(), l)).collect(),
        extras,
        base_model_hint: first.base_model_hint.clone(),
        metadata: first.metadata.clone(),
        warnings: Vec::new(),
    })
}

fn merge_layer(name: &str, adapters: &[(&LoraAdapter, f64)]) -> Result<LoraLayer> {
    let mut template: Option<&LoraLayer> = None;
    let mut sum: Option<DMatrix<f64>> = None;
    let mut rank = 0;
    for (adapter, weight) in adapters {
        let Some(layer) = adapter.layers.get(name) else {
            continue;
        };
        let delta = compose_delta(layer)? * *weight;
        match &mut sum {
            Some(acc) if acc.shape() != delta.shape() => {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}`: deltas {:?} and {:?} cannot be merged",
                    acc.shape(),
                    delta.shape()
                )));
            }
            Some(acc) => *acc += delta,
            None => sum = Some(delta),
        }
        rank = rank.max(layer.rank());
        template.get_or_insert(layer);
    }
    let template = template.expect("name came from one of the adapters");
    let sum = sum.expect("at least one contribution");
    let rank = rank.min(sum.nrows().min(sum.ncols()));
    let mut base = template.clone();
    base.stored_alpha = template.rank() as f64;
    base.convention = ScaleConvention::AlphaOverRank;
    base.with_delta(&sum, rank)
}

/// Frozen base-model projection weights, stored in embedding orientation
/// (`n_in × m_out`).
#[derive(Debug, Clone, Default)]
pub struct BaseWeights {
    pub layers: BTreeMap<String, DMatrix<f64>>,
    pub source: Option<PathBuf>,
}

impl BaseWeights {
    /// Reads every 2-D tensor, keyed by the canonical name of the tensor
    /// name minus any trailing `.weight`, and transposes it from `(out, in)`.
    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for (key, tensor) in map.iter() {
            if tensor.shape().len() != 2 {
                continue;
            }
            let stem = key.strip_suffix(".weight").unwrap_or(key);
            let w = tensor.to_matrix()?.transpose();
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput(format!("base weight `{key}`")));
            }
            layers.insert(canonical_layer_name(stem), w);
        }
        Ok(Self {
            layers,
            source: None,
        })
    }

    /// Inverse of [`BaseWeights::from_tensor_map`], writing `(out, in)` F32 tensors.
    pub fn to_tensor_map(&self) -> Result<TensorMap> {
        let mut map = TensorMap::new();
        for (name, w) in &self.layers {
            map.insert(format!("{name}.weight"), Tensor::from_matrix(DType::F32, &w.transpose())?)?;
        }
        Ok(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut base = Self::from_tensor_map(&container::read_file(path.as_ref())?)?;
        base.source = Some(path.as_ref().to_path_buf());
        Ok(base)
    }

    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.layers.get(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(down: DMatrix<f64>, up: DMatrix<f64>, alpha: f64) -> LoraLayer {
        LoraLayer::new("blk_attn2_to_k", down, up, alpha).unwrap()
    }

    #[test]
    fn compose_hand_multiplication() {
        let l = layer(
            DMatrix::from_row_slice(1, 2, &[3.0, 4.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
            1.0,
        );
        assert_eq!(
            compose_delta(&l).unwrap(),
            DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 6.0, 8.0])
        );
    }

    #[test]
    fn compose_zero_down_is_zero() {
        let l = layer(DMatrix::zeros(1, 3), DMatrix::from_element(2, 1, 7.0), 1.0);
        assert_eq!(compose_delta(&l).unwrap(), DMatrix::zeros(2, 3));
    }

    #[test]
    fn alpha_over_rank_doubles() {
        let down = DMatrix::from_row_slice(1, 2, &[0.5, -1.5]);
        let up = DMatrix::from_row_slice(2, 1, &[2.0, 1.0]);
        let unscaled = &up * &down;
        let l = layer(down, up, 2.0);
        assert_eq!(compose_delta(&l).unwrap(), unscaled * 2.0);
    }

    #[test]
    fn scale_factor_cases() {
        assert_eq!(scale_factor(128.0, 128, ScaleConvention::AlphaOverRank), 1.0);
        assert_eq!(scale_factor(0.0, 4, ScaleConvention::AlphaOverRank), 0.0);
        assert_eq!(scale_factor(8.0, 4, ScaleConvention::Unit), 1.0);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let mut l = layer(DMatrix::zeros(1, 2), DMatrix::zeros(2, 1), 1.0);
        l.up = DMatrix::zeros(2, 2);
        assert!(matches!(compose_delta(&l), Err(Error::ShapeMismatch(_))));
        assert!(l.validate().is_err());
    }

    #[test]
    fn canonical_names_agree_across_families() {
        assert_eq!(
            canonical_layer_name("lora_unet_down_blocks_0_attentions_0_transformer_blocks_0_attn2_to_k"),
            "down_blocks_0_attentions_0_transformer_blocks_0_attn2_to_k"
        );
        assert_eq!(
            canonical_layer_name("unet.down_blocks.0.attentions.0.transformer_blocks.0.attn2.to_k"),
            "down_blocks_0_attentions_0_transformer_blocks_0_attn2_to_k"
        );
    }

    fn map_with(keys: &[(&str, Tensor)]) -> TensorMap {
        let mut map = TensorMap::new();
        for (k, t) in keys {
            map.insert(*k, t.clone()).unwrap();
        }
        map
    }

    #[test]
    fn loads_both_naming_families() {
        let down = Tensor::from_f32(vec![1, 2], &[1.0, 2.0]).unwrap();
        let up = Tensor::from_f32(vec![2, 1], &[3.0, 4.0]).unwrap();
        let map = map_with(&[
            ("lora_unet_a_attn2_to_k.lora_down.weight", down.clone()),
            ("lora_unet_a_attn2_to_k.lora_up.weight", up.clone()),
            ("lora_unet_a_attn2_to_k.alpha", Tensor::from_f32(vec![], &[1.0]).unwrap()),
            ("unet.b.attn2.to_v.lora_A.weight", down),
            ("unet.b.attn2.to_v.lora_B.weight", up),
        ]);
        let adapter = LoraAdapter::from_tensor_map(&map).unwrap();
        assert_eq!(
            adapter.layer_names().collect::<Vec<_>>(),
            vec!["a_attn2_to_k", "b_attn2_to_v"]
        );
        let b = &adapter.layers["b_attn2_to_v"];
        assert_eq!(b.family, NamingFamily::LoraAB);
        assert_eq!(b.convention, ScaleConvention::Unit);
        assert_eq!(adapter.warnings.len(), 1);
        assert!(adapter.warnings[0].contains("b_attn2_to_v"));
    }

    #[test]
    fn half_pair_is_invalid() {
        let map = map_with(&[(
            "x.lora_down.weight",
            Tensor::from_f32(vec![1, 2], &[1.0, 2.0]).unwrap(),
        )]);
        assert!(matches!(
            LoraAdapter::from_tensor_map(&map),
            Err(Error::InvalidAdapter(_))
        ));
    }

    #[test]
    fn tensor_map_roundtrip_preserves_bytes() {
        let map = map_with(&[
            ("lora_unet_q_attn2_to_k.lora_down.weight",
                Tensor::from_f64(DType::F16, vec![1, 2], &[0.25, -1.0]).unwrap()),
            ("lora_unet_q_attn2_to_k.lora_up.weight",
                Tensor::from_f64(DType::F16, vec![2, 1], &[0.5, 2.0]).unwrap()),
            ("lora_unet_q_attn2_to_k.alpha", Tensor::from_f64(DType::F16, vec![], &[1.0]).unwrap()),
            ("lora_te_extra.weight", Tensor::from_f32(vec![2], &[9.0, 8.0]).unwrap()),
        ]);
        let adapter = LoraAdapter::from_tensor_map(&map).unwrap();
        let back = adapter.to_tensor_map().unwrap();
        assert_eq!(back.len(), map.len());
        for (name, tensor) in map.iter() {
            assert_eq!(back.get(name), Some(tensor), "{name}");
        }
    }

    #[test]
    fn resolve_patterns() {
        let mut adapter = LoraAdapter::default();
        for name in ["b_attn1_to_k", "a_attn2_to_k", "a_attn2_to_v", "c_ff"] {
            let l = LoraLayer::new(name, DMatrix::zeros(1, 2), DMatrix::zeros(2, 1), 1.0).unwrap();
            adapter.layers.insert(name.into(), l);
        }
        assert_eq!(
            resolve_target_layers(&adapter, &DEFAULT_TARGET_PATTERNS).unwrap(),
            vec!["a_attn2_to_k", "a_attn2_to_v"]
        );
        assert_eq!(resolve_target_layers(&adapter, &["*"]).unwrap().len(), 4);
        assert!(matches!(
            resolve_target_layers(&adapter, &["nonexistent"]),
            Err(Error::NoLayersMatched(_))
        ));
    }

    #[test]
    fn with_delta_respects_scale() {
        let l = layer(
            DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 2.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            4.0,
        );
        let target = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        let edited = l.with_delta(&target, 1).unwrap();
        assert_eq!(edited.stored_alpha, 4.0);
        assert!((compose_delta(&edited).unwrap() - target).norm() < 1e-12);
    }
}
