//! Seeded synthetic fixtures: an adapter of cross-attention K/V layers, the
//! matching base weights, a concept bundle and benign probes.
//!
//! Synonyms are a shared target embedding plus small per-phrase noise;
//! antonyms are the same prompt context without the target offset. Everything
//! is drawn from one ChaCha stream, so a seed fully determines the fixture.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use std::path::{Path, PathBuf};

use crate::adapter::{BaseWeights, LoraAdapter, LoraLayer};
use crate::concept::{write_concept_spec, BenignProbeSet, ConceptSpec};
use crate::container::write_file;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub layers: usize,
    pub in_features: usize,
    pub out_features: usize,
    pub rank: usize,
    /// Token rows `L` per embedding.
    pub tokens: usize,
    pub k: usize,
    pub probes: usize,
    /// Entry scale of the target-concept offset separating synonyms from antonyms.
    pub concept_gap: f64,
    /// Entry scale of the per-synonym variation.
    pub synonym_spread: f64,
    /// Entry scale of the LoRA factors.
    pub factor_scale: f64,
    /// Antonym slots to flag absent (neutral fallback).
    pub absent_antonyms: Vec<usize>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// Desk-scale fixture: 32 layers of 64×64 at rank 8, K = 5.
    fn default() -> Self {
        Self {
            layers: 32,
            in_features: 64,
            out_features: 64,
            rank: 8,
            tokens: 8,
            k: 5,
            probes: 20,
            concept_gap: 0.02,
            synonym_spread: 0.002,
            factor_scale: 0.03,
            absent_antonyms: Vec::new(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Production-shaped: 32 layers of 768×768 at rank 128 with 77-token embeddings.
    pub fn production() -> Self {
        Self {
            in_features: 768,
            out_features: 768,
            rank: 128,
            tokens: 77,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub adapter: LoraAdapter,
    pub base: BaseWeights,
    pub concept: ConceptSpec,
    pub probes: BenignProbeSet,
}

/// Where [`Fixture::write_to`] put each file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixturePaths {
    pub adapter: PathBuf,
    pub base: PathBuf,
    pub concept: PathBuf,
    pub probes: PathBuf,
}

impl Fixture {
    /// Writes `adapter.safetensors`, `base.safetensors`, `concept.safetensors`
    /// and `probes.safetensors` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<FixturePaths> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let paths = FixturePaths {
            adapter: dir.join("adapter.safetensors"),
            base: dir.join("base.safetensors"),
            concept: dir.join("concept.safetensors"),
            probes: dir.join("probes.safetensors"),
        };
        self.adapter.save(&paths.adapter)?;
        write_file(&paths.base, &self.base.to_tensor_map()?)?;
        write_concept_spec(&self.concept, &paths.concept)?;
        write_file(&paths.probes, &self.probes.to_tensor_map()?)?;
        Ok(paths)
    }
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn matrix(&mut self, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| scale * self.0.sample::<f64, _>(StandardNormal))
    }
}

/// Cross-attention layer names, alternating `to_k` / `to_v` across blocks.
pub fn cross_attention_names(count: usize) -> Vec<String> {
    (0..count)
        .map(|i| {
            let proj = if i % 2 == 0 { "to_k" } else { "to_v" };
            format!("down_blocks_{}_attentions_{}_transformer_blocks_0_attn2_{proj}", i / 4, (i / 2) % 2)
        })
        .collect()
}

/// `count / 2` self-attention (`attn1`) and `count / 2` cross-attention
/// (`attn2`) K/V layers, interleaved.
pub fn mixed_attention_names(count: usize) -> Vec<String> {
    (0..count)
        .map(|i| {
            let attn = if (i / 2) % 2 == 0 { "attn1" } else { "attn2" };
            let proj = if i % 2 == 0 { "to_k" } else { "to_v" };
            format!("up_blocks_{}_attentions_0_transformer_blocks_0_{attn}_{proj}", i / 4)
        })
        .collect()
}

/// Random rank-`rank` adapter over the given layer names (`alpha = rank`).
pub fn random_adapter(names: &[String], in_features: usize, out_features: usize, rank: usize, factor_scale: f64, seed: u64) -> LoraAdapter {
    let mut gen = Gen(ChaCha8Rng::seed_from_u64(seed));
    let mut adapter = LoraAdapter::default();
    for name in names {
        let down = gen.matrix(rank, in_features, factor_scale);
        let up = gen.matrix(out_features, rank, factor_scale);
        let layer = LoraLayer::new(name.clone(), down, up, rank as f64).expect("valid synthetic layer");
        adapter.layers.insert(name.clone(), layer);
    }
    adapter
}

pub fn build(config: &SyntheticConfig) -> Fixture {
    let names = cross_attention_names(config.layers);
    let adapter = random_adapter(
        &names,
        config.in_features,
        config.out_features,
        config.rank,
        config.factor_scale,
        config.seed,
    );
    let mut gen = Gen(ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed)));
    let (l, n, m) = (config.tokens, config.in_features, config.out_features);

    let base = BaseWeights {
        layers: names
            .iter()
            .map(|name| (name.clone(), gen.matrix(n, m, 1.0)))
            .collect(),
        source: None,
    };

    let context = gen.matrix(l, n, 1.0);
    let target = &context + gen.matrix(l, n, config.concept_gap);
    let synonyms = (0..config.k)
        .map(|_| &target + gen.matrix(l, n, config.synonym_spread))
        .collect();
    let antonyms = (0..config.k)
        .map(|i| {
            let a = &context + gen.matrix(l, n, config.synonym_spread);
            (!config.absent_antonyms.contains(&i)).then_some(a)
        })
        .collect();
    let neutral = &context + gen.matrix(l, n, config.synonym_spread);
    let mut concept = ConceptSpec::new("synthetic-concept", synonyms, antonyms, neutral)
        .expect("valid synthetic concept");
    concept.encoder_id = format!("synthetic:{}", config.seed);

    let probes = BenignProbeSet {
        probes: (0..config.probes).map(|_| gen.matrix(l, n, 1.0)).collect(),
    };
    Fixture {
        adapter,
        base,
        concept,
        probes,
    }
}
