use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{AdamState, AlignmentProblem, ComputeDtype, EditConfig};
use crate::adapter::{math_delta, LoraLayer};
use crate::concept::ConceptSpec;
use crate::error::{Error, Result};
use crate::linalg::{cast, widen, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Pair-averaged alignment loss under the perturbation.
    pub align: f64,
    pub pre: f64,
    pub all: f64,
    pub perturb_norm: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerEditTrace {
    pub steps: Vec<StepRecord>,
}

/// Result of editing one layer.
#[derive(Debug, Clone)]
pub struct LayerEdit {
    pub name: String,
    /// Original dense delta, `n × m`, including the adapter's scale.
    pub delta_orig: DMatrix<f64>,
    /// Edited dense delta, `n × m`.
    pub delta: DMatrix<f64>,
    pub trace: LayerEditTrace,
    /// Unperturbed pair-averaged alignment loss before and after editing.
    pub initial_align: f64,
    pub final_align: f64,
    pub final_pre: f64,
}

/// Edits one layer in the precision selected by `config.compute_dtype`.
///
/// `w` is the frozen base projection in embedding orientation (`n × m`).
pub fn edit_layer(
    layer: &LoraLayer,
    w: &DMatrix<f64>,
    spec: &ConceptSpec,
    config: &EditConfig,
) -> Result<LayerEdit> {
    match config.compute_dtype {
        ComputeDtype::F32 => edit_layer_in::<f32>(layer, w, spec, config),
        ComputeDtype::F64 => edit_layer_in::<f64>(layer, w, spec, config),
    }
}

pub fn edit_layer_in<T: Real>(
    layer: &LoraLayer,
    w: &DMatrix<f64>,
    spec: &ConceptSpec,
    config: &EditConfig,
) -> Result<LayerEdit> {
    config.validate()?;
    let delta_orig = math_delta(layer)?;
    if w.shape() != delta_orig.shape() {
        return Err(Error::ShapeMismatch(format!(
            "`{}`: base weight is {:?} but the LoRA delta is {:?}",
            layer.name,
            w.shape(),
            delta_orig.shape()
        )));
    }
    let (_, n) = spec.embedding_shape();
    if n != w.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "`{}`: embeddings have width {n} but the layer takes {} inputs",
            layer.name,
            w.nrows()
        )));
    }

    let targets: Vec<DMatrix<T>> = spec.synonyms.iter().map(cast).collect();
    let anchors: Vec<DMatrix<T>> = (0..spec.k())
        .map(|i| spec.antonym_or_neutral(i).map(cast))
        .collect::<Result<_>>()?;
    let pairs: Vec<_> = targets.iter().zip(&anchors).collect();
    let problem = AlignmentProblem::new(&pairs, cast(w), cast(&delta_orig), T::of(config.merge_scale))?;

    let tau = T::of(config.tau);
    let eta = T::of(config.eta);
    let mut delta_hat: DMatrix<T> = problem.delta_orig().clone();
    let mut adam = AdamState::new(delta_hat.nrows(), delta_hat.ncols());
    let mut trace = LayerEditTrace::default();
    let mut initial_align = None;

    for step in 1..=config.steps {
        let clean = problem.residual(&delta_hat, None);
        initial_align.get_or_insert_with(|| problem.loss(&clean).as_f64());
        let perturb = problem.adversarial_delta(&clean, tau);
        let residual = problem.perturb_residual(&clean, &perturb);

        let align = problem.loss(&residual).as_f64();
        let pre = (&delta_hat - problem.delta_orig()).norm_squared().as_f64() / delta_hat.len() as f64;
        let all = align + config.eta * pre;
        if !all.is_finite() {
            return Err(Error::NonFiniteLoss {
                layer: layer.name.clone(),
                step,
            });
        }
        let grad = problem.grad_all_from_residual(&residual, &delta_hat, eta);
        trace.steps.push(StepRecord {
            step,
            align,
            pre,
            all,
            perturb_norm: perturb.norm().as_f64(),
            grad_norm: grad.norm().as_f64(),
        });
        adam.update(&mut delta_hat, &grad, config)?;
    }

    let final_align = problem.loss(&problem.residual(&delta_hat, None)).as_f64();
    if !final_align.is_finite() {
        return Err(Error::NonFiniteLoss {
            layer: layer.name.clone(),
            step: config.steps,
        });
    }
    let delta = widen(&delta_hat);
    let final_pre = (&delta - &delta_orig).norm_squared() / delta.len() as f64;
    Ok(LayerEdit {
        name: layer.name.clone(),
        delta_orig,
        delta,
        trace,
        initial_align: initial_align.expect("steps >= 1"),
        final_align,
        final_pre,
    })
}
