use std::thread;

use rayon::prelude::*;

use super::{edit_layer, EditConfig, StepRecord};
use crate::adapter::{math_delta, resolve_target_layers, BaseWeights, LoraAdapter, LoraLayer};
use crate::concept::{BenignProbeSet, ConceptSpec};
use crate::diagnostics::{assess, EditReport, LayerReport, SCHEMA_VERSION};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub adapter: LoraAdapter,
    pub report: EditReport,
}

struct EditedLayer {
    layer: LoraLayer,
    initial_align: f64,
    final_align: f64,
    final_pre: f64,
    svd_relative_error: f64,
    trace: Vec<StepRecord>,
}

fn edit_and_refactor(
    layer: &LoraLayer,
    base: &BaseWeights,
    spec: &ConceptSpec,
    config: &EditConfig,
) -> Result<EditedLayer> {
    let w = base
        .get(&layer.name)
        .ok_or_else(|| Error::MissingBaseWeight(layer.name.clone()))?;
    let edit = edit_layer(layer, w, spec, config)?;
    let rank = config.refactor_rank.unwrap_or(layer.rank());
    let refactored = layer.with_delta(&edit.delta.transpose(), rank)?;
    let svd_relative_error =
        (math_delta(&refactored)? - &edit.delta).norm() / edit.delta.norm().max(1e-12);
    log::debug!(
        "{}: align {:.4e} -> {:.4e}, svd error {:.2e}",
        layer.name,
        edit.initial_align,
        edit.final_align,
        svd_relative_error
    );
    Ok(EditedLayer {
        layer: refactored,
        initial_align: edit.initial_align,
        final_align: edit.final_align,
        final_pre: edit.final_pre,
        svd_relative_error,
        trace: edit.trace.steps,
    })
}

/// Number of layer workers: the configured count, or every core, never more
/// than the number of layers.
pub(crate) fn worker_count(config: &EditConfig, layers: usize) -> usize {
    let available = thread::available_parallelism().map_or(1, |n| n.get());
    config.workers.unwrap_or(available).clamp(1, layers.max(1))
}

/// Edits every layer matching `patterns`, re-factorizes each at its original
/// rank (or `config.refactor_rank`) and reports diagnostics. Non-target layers and passthrough tensors
/// are left untouched. Output is independent of the worker count.
pub fn edit_adapter<S: AsRef<str>>(
    adapter: &LoraAdapter,
    base: &BaseWeights,
    spec: &ConceptSpec,
    config: &EditConfig,
    patterns: &[S],
    probes: Option<&BenignProbeSet>,
) -> Result<EditOutcome> {
    config.validate()?;
    let targets = resolve_target_layers(adapter, patterns)?;
    if let Some(missing) = targets.iter().find(|name| base.get(name).is_none()) {
        return Err(Error::MissingBaseWeight(missing.clone()));
    }
    if let Some(probes) = probes {
        probes.check_against(spec)?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(config, targets.len()))
        .build()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let edited: Vec<EditedLayer> = pool.install(|| {
        targets
            .par_iter()
            .map(|name| edit_and_refactor(&adapter.layers[name], base, spec, config))
            .collect::<Result<_>>()
    })?;

    let mut output = adapter.clone();
    output.warnings.clear();
    for e in &edited {
        output.layers.insert(e.layer.name.clone(), e.layer.clone());
    }
    let assessment = assess(adapter, &output, base, spec, probes, config.merge_scale, &targets)?;

    let mut warnings = adapter.warnings.clone();
    let layers = edited
        .into_iter()
        .zip(&assessment.layers)
        .map(|(e, m)| {
            let align_decreased = e.final_align <= e.initial_align;
            if !align_decreased {
                warnings.push(format!(
                    "layer `{}`: alignment loss rose from {:.6e} to {:.6e}",
                    e.layer.name, e.initial_align, e.final_align
                ));
            }
            LayerReport {
                name: e.layer.name.clone(),
                rank: e.layer.rank(),
                initial_align: e.initial_align,
                final_align: e.final_align,
                final_pre: e.final_pre,
                svd_relative_error: e.svd_relative_error,
                param_drift: m.param_drift,
                projection_shift: m.projection_shift.iter().sum::<f64>() / m.projection_shift.len() as f64,
                benign_drift_max: m.benign_drift.iter().copied().reduce(f64::max),
                align_decreased,
                trace: e.trace,
            }
        })
        .collect();

    let report = EditReport {
        schema_version: SCHEMA_VERSION.to_string(),
        concept: spec.concept_label.clone(),
        k: spec.k(),
        config: config.clone(),
        layers,
        projection_shift: assessment.projection_shift,
        projection_shift_mean: assessment.projection_shift_mean,
        benign_drift: assessment.benign_drift,
        warnings,
        timings: None,
    };
    Ok(EditOutcome {
        adapter: output,
        report,
    })
}
