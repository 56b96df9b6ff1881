//! Robust editing of LoRA deltas.
//!
//! Each target layer's dense delta `ΔŴ` (initialized to the adapter's own
//! `ΔW`) is pushed so that synonym embeddings of the erased concept project
//! like their antonym (or neutral) anchors through `W + α·ΔŴ`. Every step the
//! alignment gradient with respect to `W` defines a worst-case weight
//! perturbation `δ_w` of norm `τ`, the loss is re-evaluated under that
//! perturbation, a preservation term `η·‖ΔŴ − ΔW‖²` is added, and Adam takes a
//! step. The edited dense delta is re-factorized once at the end.

mod adam;
mod layer;
mod loss;
mod pipeline;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamState};
pub use layer::{edit_layer, edit_layer_in, LayerEdit, LayerEditTrace, StepRecord};
pub use loss::{
    adversarial_delta, grad_align, grad_all, grad_pre, loss_align, loss_all, loss_pre,
    AlignmentProblem, GRADIENT_FLOOR,
};
pub use pipeline::{edit_adapter, EditOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComputeDtype {
    F32,
    F64,
}

/// Hyperparameters of the editing loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    /// Editing steps `T`.
    pub steps: usize,
    /// Radius of the adversarial weight perturbation.
    pub tau: f64,
    /// Weight of the preservation loss.
    pub eta: f64,
    pub learning_rate: f64,
    /// Merge ratio `α` applied to the adapter delta at inference.
    pub merge_scale: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub compute_dtype: ComputeDtype,
    /// Parallel layer workers; `None` uses every available core.
    pub workers: Option<usize>,
    /// Rank of the re-factorized layers; `None` keeps each layer's own rank.
    pub refactor_rank: Option<usize>,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            tau: 1e-5,
            eta: 0.1,
            learning_rate: 1e-3,
            merge_scale: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            compute_dtype: ComputeDtype::F32,
            workers: None,
            refactor_rank: None,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid_config(field, format!("must be positive, got {v}")))
            }
        };
        if self.steps < 1 {
            return Err(Error::invalid_config("steps", "must be at least 1"));
        }
        positive("tau", self.tau)?;
        positive("learning_rate", self.learning_rate)?;
        positive("adam_epsilon", self.adam_epsilon)?;
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid_config("eta", format!("must be non-negative, got {}", self.eta)));
        }
        if !(self.merge_scale > 0.0 && self.merge_scale <= 1.0) {
            return Err(Error::invalid_config(
                "merge_scale",
                format!("must be in (0, 1], got {}", self.merge_scale),
            ));
        }
        for (field, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::invalid_config(field, format!("must be in [0, 1), got {beta}")));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::invalid_config("workers", "must be at least 1"));
        }
        if self.refactor_rank == Some(0) {
            return Err(Error::invalid_config("refactor_rank", "must be at least 1"));
        }
        Ok(())
    }
}
