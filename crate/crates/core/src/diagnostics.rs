//! Embedding-space verification metrics and the machine-readable edit report.
//!
//! These are proxies measured on projections `c · (W + α·Δ)`, not image
//! metrics:
//!
//! * `projection_shift` — how far the target's projection still is from the
//!   anchor's, relative to before the edit (1 = unchanged, 0 = aligned).
//! * `benign_drift` — relative change of an unrelated prompt's projection.
//! * `param_drift` — relative change of the delta itself.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::{math_delta, BaseWeights, LoraAdapter, LoraLayer};
use crate::concept::{BenignProbeSet, ConceptSpec};
use crate::edit::{EditConfig, StepRecord};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "edit-report/1";

const DENOMINATOR_FLOOR: f64 = 1e-12;

fn check_projection(w: &DMatrix<f64>, deltas: &[&DMatrix<f64>], embeddings: &[&DMatrix<f64>]) -> Result<()> {
    if let Some(d) = deltas.iter().find(|d| d.shape() != w.shape()) {
        return Err(Error::ShapeMismatch(format!("delta {:?} vs W {:?}", d.shape(), w.shape())));
    }
    if let Some(e) = embeddings.iter().find(|e| e.ncols() != w.nrows()) {
        return Err(Error::ShapeMismatch(format!(
            "embedding {:?} cannot multiply W {:?}",
            e.shape(),
            w.shape()
        )));
    }
    Ok(())
}

/// `‖c_t·(W+αΔ̂) − c·(W+αΔ)‖ / ‖c_t·(W+αΔ) − c·(W+αΔ)‖`, or exactly 1 when the
/// denominator vanishes.
pub fn projection_shift(
    w: &DMatrix<f64>,
    delta_orig: &DMatrix<f64>,
    delta_edited: &DMatrix<f64>,
    c_t: &DMatrix<f64>,
    c_anchor: &DMatrix<f64>,
    alpha: f64,
) -> Result<f64> {
    check_projection(w, &[delta_orig, delta_edited], &[c_t, c_anchor])?;
    if c_t.nrows() != c_anchor.nrows() {
        return Err(Error::ShapeMismatch("target and anchor token counts differ".into()));
    }
    let original = w + delta_orig * alpha;
    Ok(shift_of(&original, &((delta_edited - delta_orig) * alpha), c_t, c_anchor))
}

/// Projection shift from `W + αΔ` and the scaled edit `α(Δ̂ − Δ)`.
fn shift_of(original: &DMatrix<f64>, change: &DMatrix<f64>, c_t: &DMatrix<f64>, c_anchor: &DMatrix<f64>) -> f64 {
    let before = c_t * original - c_anchor * original;
    let before_norm = before.norm();
    if before_norm < DENOMINATOR_FLOOR {
        return 1.0;
    }
    (before + c_t * change).norm() / before_norm
}

fn drift_of(original: &DMatrix<f64>, change: &DMatrix<f64>, probe: &DMatrix<f64>) -> f64 {
    (probe * change).norm() / (probe * original).norm().max(DENOMINATOR_FLOOR)
}

/// `‖p·(W+αΔ̂) − p·(W+αΔ)‖ / max(‖p·(W+αΔ)‖, 1e-12)`
pub fn benign_drift(
    w: &DMatrix<f64>,
    delta_orig: &DMatrix<f64>,
    delta_edited: &DMatrix<f64>,
    probe: &DMatrix<f64>,
    alpha: f64,
) -> Result<f64> {
    check_projection(w, &[delta_orig, delta_edited], &[probe])?;
    Ok(drift_of(&(w + delta_orig * alpha), &((delta_edited - delta_orig) * alpha), probe))
}

/// `‖Δ̂ − Δ‖ / max(‖Δ‖, 1e-12)`
pub fn param_drift(delta_orig: &DMatrix<f64>, delta_edited: &DMatrix<f64>) -> Result<f64> {
    if delta_orig.shape() != delta_edited.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            delta_orig.shape(),
            delta_edited.shape()
        )));
    }
    Ok((delta_edited - delta_orig).norm() / delta_orig.norm().max(DENOMINATOR_FLOOR))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub name: String,
    /// One value per synonym pair.
    pub projection_shift: Vec<f64>,
    /// One value per probe; empty without probes.
    pub benign_drift: Vec<f64>,
    pub param_drift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftStats {
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

impl DriftStats {
    fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let (mut max, mut sum, mut count) = (f64::NEG_INFINITY, 0.0, 0usize);
        for v in values {
            max = max.max(v);
            sum += v;
            count += 1;
        }
        (count > 0).then(|| Self {
            max,
            mean: sum / count as f64,
            count,
        })
    }
}

/// Metrics comparing an edited adapter against its original.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub layers: Vec<LayerMetrics>,
    /// Per synonym pair, averaged over layers.
    pub projection_shift: Vec<f64>,
    pub projection_shift_mean: f64,
    pub benign_drift: Option<DriftStats>,
}

fn find_layer<'a>(adapter: &'a LoraAdapter, name: &str) -> Result<&'a LoraLayer> {
    adapter
        .layers
        .get(name)
        .ok_or_else(|| Error::InvalidAdapter(format!("layer `{name}` missing from an adapter")))
}

/// Computes every metric on `layers`, which must exist in both adapters and
/// in `base`.
pub fn assess(
    original: &LoraAdapter,
    edited: &LoraAdapter,
    base: &BaseWeights,
    spec: &ConceptSpec,
    probes: Option<&BenignProbeSet>,
    alpha: f64,
    layers: &[String],
) -> Result<Assessment> {
    if layers.is_empty() {
        return Err(Error::NoLayersMatched(Vec::new()));
    }
    if let Some(probes) = probes {
        probes.check_against(spec)?;
    }
    let mut metrics = Vec::with_capacity(layers.len());
    for name in layers {
        let delta_orig = math_delta(find_layer(original, name)?)?;
        let delta_edited = math_delta(find_layer(edited, name)?)?;
        let w = base.get(name).ok_or_else(|| Error::MissingBaseWeight(name.clone()))?;
        check_projection(w, &[&delta_orig, &delta_edited], &[&spec.neutral])?;
        let original = w + &delta_orig * alpha;
        let change = (&delta_edited - &delta_orig) * alpha;
        let projection_shift = (0..spec.k())
            .map(|i| Ok(shift_of(&original, &change, &spec.synonyms[i], spec.antonym_or_neutral(i)?)))
            .collect::<Result<Vec<_>>>()?;
        let benign = probes
            .map(|p| p.probes.iter().map(|probe| drift_of(&original, &change, probe)).collect())
            .unwrap_or_default();
        metrics.push(LayerMetrics {
            name: name.clone(),
            projection_shift,
            benign_drift: benign,
            param_drift: param_drift(&delta_orig, &delta_edited)?,
        });
    }
    let per_pair: Vec<f64> = (0..spec.k())
        .map(|i| metrics.iter().map(|m| m.projection_shift[i]).sum::<f64>() / metrics.len() as f64)
        .collect();
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    let benign = DriftStats::of(metrics.iter().flat_map(|m| m.benign_drift.iter().copied()));
    Ok(Assessment {
        layers: metrics,
        projection_shift: per_pair,
        projection_shift_mean: mean,
        benign_drift: benign,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerReport {
    pub name: String,
    pub rank: usize,
    pub initial_align: f64,
    pub final_align: f64,
    pub final_pre: f64,
    pub svd_relative_error: f64,
    pub param_drift: f64,
    /// Mean over synonym pairs for this layer.
    pub projection_shift: f64,
    pub benign_drift_max: Option<f64>,
    /// `final_align <= initial_align`
    pub align_decreased: bool,
    pub trace: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timings {
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditReport {
    pub schema_version: String,
    pub concept: String,
    pub k: usize,
    pub config: EditConfig,
    /// Sorted by layer name.
    pub layers: Vec<LayerReport>,
    /// Per synonym pair, averaged over edited layers.
    pub projection_shift: Vec<f64>,
    pub projection_shift_mean: f64,
    pub benign_drift: Option<DriftStats>,
    pub warnings: Vec<String>,
    /// Wall-clock figures; omitted unless requested so reports stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl EditReport {
    pub fn max_benign_drift(&self) -> Option<f64> {
        self.benign_drift.map(|d| d.max)
    }

    /// Pretty JSON with sorted keys and floats rounded to 9 significant digits.
    pub fn to_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("report serializes");
        round_floats(&mut value);
        let mut out = serde_json::to_string_pretty(&value).expect("value serializes");
        out.push('\n');
        out
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(s)
            .map_err(|e| Error::InvalidConfig { field: "report".into(), message: e.to_string() })?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid_config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", report.schema_version),
            ));
        }
        Ok(report)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "concept: {}  (K = {})", self.concept, self.k);
        let _ = writeln!(
            out,
            "{:<60} {:>5} {:>12} {:>12} {:>10} {:>10} {:>10}",
            "layer", "rank", "align0", "align", "shift", "drift", "svd_err"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<60} {:>5} {:>12.5e} {:>12.5e} {:>10.4} {:>10.4} {:>10.2e}",
                l.name,
                l.rank,
                l.initial_align,
                l.final_align,
                l.projection_shift,
                l.benign_drift_max.unwrap_or(f64::NAN),
                l.svd_relative_error
            );
        }
        let _ = writeln!(out, "mean projection_shift: {:.6}", self.projection_shift_mean);
        if let Some(d) = self.benign_drift {
            let _ = writeln!(out, "benign_drift: max {:.6}, mean {:.6} over {} probes×layers", d.max, d.mean, d.count);
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

/// Rounds to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn round_floats(value: &mut Value) {
    match value {
        Value::Number(n) if n.is_f64() => {
            let rounded = round_sig9(n.as_f64().expect("f64 number"));
            if let Some(r) = serde_json::Number::from_f64(rounded) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}
