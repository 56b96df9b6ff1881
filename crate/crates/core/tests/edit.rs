mod common;

use common::{gaussian, rng};
use lora_eraser::adapter::{compose_delta, math_delta, LoraAdapter, LoraLayer, DEFAULT_TARGET_PATTERNS};
use lora_eraser::concept::ConceptSpec;
use lora_eraser::edit::{adam_step, edit_adapter, edit_layer, AdamState, ComputeDtype, EditConfig};
use lora_eraser::synthetic::{build, Fixture, SyntheticConfig};
use lora_eraser::Error;
use nalgebra::DMatrix;

fn fixture(factor_scale: f64, layers: usize) -> Fixture {
    build(&SyntheticConfig {
        layers,
        factor_scale,
        ..SyntheticConfig::default()
    })
}

fn first_layer(fx: &Fixture) -> (&LoraLayer, &DMatrix<f64>) {
    let (name, layer) = fx.adapter.layers.iter().next().unwrap();
    (layer, fx.base.get(name).unwrap())
}

/// Scalar Adam written out from the update rule.
fn scalar_adam(grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    let mut out = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        out.push(p);
    }
    out
}

#[test]
fn adam_first_step_moves_by_lr() {
    let config = EditConfig::default();
    let grad = DMatrix::from_row_slice(1, 4, &[3.0, -0.5, 1e-3, -200.0]);
    let (p, _) = adam_step(&AdamState::<f64>::new(1, 4), &DMatrix::zeros(1, 4), &grad, &config).unwrap();
    for (moved, g) in p.iter().zip(grad.iter()) {
        assert!((moved + 1e-3 * g / (g.abs() + 1e-8)).abs() <= 1e-9);
    }
}

#[test]
fn adam_matches_the_scalar_recurrence() {
    let config = EditConfig::default();
    let grads = [0.7, 0.7, -0.2, 1.5];
    let expected = scalar_adam(&grads, 1e-3, 0.9, 0.999, 1e-8);
    let mut state = AdamState::<f64>::new(1, 1);
    let mut p = DMatrix::zeros(1, 1);
    for (g, want) in grads.iter().zip(expected) {
        (p, state) = adam_step(&state, &p, &DMatrix::from_element(1, 1, *g), &config).unwrap();
        assert!((p[(0, 0)] - want).abs() <= 1e-15, "{} vs {want}", p[(0, 0)]);
    }
    assert_eq!(state.step_count, 4);
}

#[test]
fn degenerate_concept_leaves_a_zero_delta_at_zero() {
    let mut r = rng(1);
    let (l, n, m) = (4, 6, 5);
    let layer = LoraLayer::new("blk_attn2_to_k", gaussian(&mut r, 2, n), DMatrix::zeros(m, 2), 2.0).unwrap();
    let w = gaussian(&mut r, n, m);
    let phrase = gaussian(&mut r, l, n);
    let spec = ConceptSpec::new("same", vec![phrase.clone()], vec![Some(phrase.clone())], phrase).unwrap();
    let config = EditConfig::default();
    let edit = edit_layer(&layer, &w, &spec, &config).unwrap();
    assert!(edit.delta.norm() <= config.learning_rate * config.steps as f64);
    assert_eq!(edit.initial_align, 0.0);
}

#[test]
fn alignment_loss_halves_on_the_fixture() {
    for factor_scale in [0.03, 0.22] {
        let fx = fixture(factor_scale, 2);
        for (name, layer) in &fx.adapter.layers {
            let edit = edit_layer(layer, fx.base.get(name).unwrap(), &fx.concept, &EditConfig::default()).unwrap();
            let ratio = edit.final_align / edit.initial_align;
            assert!(ratio < 0.5, "factor_scale {factor_scale} `{name}`: ratio {ratio}");
            assert_eq!(edit.trace.steps.len(), 10);
        }
    }
}

#[test]
fn huge_eta_pins_the_delta() {
    let fx = fixture(0.22, 1);
    let (layer, w) = first_layer(&fx);
    let config = EditConfig {
        eta: 1e6,
        ..EditConfig::default()
    };
    let edit = edit_layer(layer, w, &fx.concept, &config).unwrap();
    let moved = (&edit.delta - &edit.delta_orig).norm();
    assert!(moved <= 1e-2 * edit.delta_orig.norm(), "moved {moved} of {}", edit.delta_orig.norm());
}

#[test]
fn the_original_delta_is_never_modified() {
    let fx = fixture(0.03, 1);
    let (layer, w) = first_layer(&fx);
    let edit = edit_layer(layer, w, &fx.concept, &EditConfig::default()).unwrap();
    assert_eq!(edit.delta_orig, math_delta(layer).unwrap());
    assert_ne!(edit.delta, edit.delta_orig);
}

#[test]
fn perturbation_is_bounded_at_every_step() {
    let fx = fixture(0.03, 1);
    let (layer, w) = first_layer(&fx);
    let config = EditConfig {
        compute_dtype: ComputeDtype::F64,
        tau: 1e-3,
        ..EditConfig::default()
    };
    let edit = edit_layer(layer, w, &fx.concept, &config).unwrap();
    for s in &edit.trace.steps {
        assert!(s.perturb_norm == 0.0 || (s.perturb_norm / 1e-3 - 1.0).abs() <= 1e-9, "{}", s.perturb_norm);
    }
}

#[test]
fn precisions_agree() {
    let fx = fixture(0.03, 1);
    let (layer, w) = first_layer(&fx);
    let run = |compute_dtype| {
        edit_layer(layer, w, &fx.concept, &EditConfig { compute_dtype, ..EditConfig::default() }).unwrap()
    };
    let (single, double) = (run(ComputeDtype::F32), run(ComputeDtype::F64));
    assert!((&single.delta - &double.delta).norm() <= 1e-4 * double.delta.norm());
    assert!((single.final_align / double.final_align - 1.0).abs() <= 1e-2);
}

#[test]
fn only_target_layers_change() {
    let fx = fixture(0.03, 4);
    let target = fx.adapter.layers.keys().nth(1).unwrap().clone();
    let outcome =
        edit_adapter(&fx.adapter, &fx.base, &fx.concept, &EditConfig::default(), &[target.as_str()], None).unwrap();
    let before = fx.adapter.to_tensor_map().unwrap();
    let after = outcome.adapter.to_tensor_map().unwrap();
    assert_eq!(before.names().collect::<Vec<_>>(), after.names().collect::<Vec<_>>());
    let prefix = &fx.adapter.layers[&target].key_prefix;
    for (name, tensor) in before.iter() {
        let changed = after.get(name).unwrap() != tensor;
        let is_factor = name.starts_with(prefix.as_str()) && !name.ends_with(".alpha");
        assert_eq!(changed, is_factor, "{name}");
    }
    assert_eq!(outcome.report.layers.len(), 1);
    assert!(outcome.report.benign_drift.is_none());
}

#[test]
fn worker_count_does_not_change_the_output() {
    let fx = fixture(0.03, 6);
    let run = |workers| {
        let config = EditConfig {
            workers: Some(workers),
            ..EditConfig::default()
        };
        edit_adapter(&fx.adapter, &fx.base, &fx.concept, &config, &DEFAULT_TARGET_PATTERNS, Some(&fx.probes)).unwrap()
    };
    let (one, three) = (run(1), run(3));
    assert_eq!(one.adapter.to_tensor_map().unwrap(), three.adapter.to_tensor_map().unwrap());
    let strip = |mut r: lora_eraser::diagnostics::EditReport| {
        r.config.workers = None;
        r.to_json()
    };
    assert_eq!(strip(one.report), strip(three.report));
}

#[test]
fn every_layer_improves() {
    let fx = fixture(0.03, 8);
    let outcome = edit_adapter(
        &fx.adapter,
        &fx.base,
        &fx.concept,
        &EditConfig::default(),
        &DEFAULT_TARGET_PATTERNS,
        Some(&fx.probes),
    )
    .unwrap();
    assert_eq!(outcome.report.layers.len(), 8);
    for layer in &outcome.report.layers {
        assert!(layer.align_decreased && layer.final_align <= layer.initial_align, "{}", layer.name);
        assert_eq!(layer.rank, 8);
    }
    assert!(outcome.report.warnings.is_empty());
}

#[test]
fn refactor_rank_overrides_the_layer_rank() {
    let fx = fixture(0.03, 2);
    let config = EditConfig {
        refactor_rank: Some(12),
        ..EditConfig::default()
    };
    let outcome = edit_adapter(&fx.adapter, &fx.base, &fx.concept, &config, &["*"], None).unwrap();
    for layer in outcome.adapter.layers.values() {
        assert_eq!(layer.rank(), 12);
        let orig = &fx.adapter.layers[&layer.name];
        assert!((layer.scale() - orig.scale()).abs() <= 1e-12);
    }
}

#[test]
fn input_errors() {
    let fx = fixture(0.03, 2);
    let config = EditConfig::default();
    let none = edit_adapter(&fx.adapter, &fx.base, &fx.concept, &config, &["nonexistent"], None);
    assert!(matches!(none, Err(Error::NoLayersMatched(_))));

    let mut thin = fx.base.clone();
    let name = thin.layers.keys().next().unwrap().clone();
    thin.layers.remove(&name);
    let missing = edit_adapter(&fx.adapter, &thin, &fx.concept, &config, &["*"], None);
    assert!(matches!(missing, Err(Error::MissingBaseWeight(n)) if n == name));

    let bad = EditConfig { steps: 0, ..EditConfig::default() };
    assert!(matches!(
        edit_adapter(&fx.adapter, &fx.base, &fx.concept, &bad, &["*"], None),
        Err(Error::InvalidConfig { field, .. }) if field == "steps"
    ));

    let (layer, w) = first_layer(&fx);
    let narrow = w.rows(0, w.nrows() - 1).into_owned();
    assert!(matches!(edit_layer(layer, &narrow, &fx.concept, &config), Err(Error::ShapeMismatch(_))));
}

#[test]
fn edited_adapters_keep_their_file_shape() {
    let fx = fixture(0.03, 2);
    let outcome =
        edit_adapter(&fx.adapter, &fx.base, &fx.concept, &EditConfig::default(), &["*"], None).unwrap();
    let reloaded = LoraAdapter::from_tensor_map(&outcome.adapter.to_tensor_map().unwrap()).unwrap();
    for (name, layer) in &reloaded.layers {
        let orig = &fx.adapter.layers[name];
        assert_eq!(layer.down.shape(), orig.down.shape());
        assert_eq!(layer.up.shape(), orig.up.shape());
        assert_eq!(layer.stored_alpha, orig.stored_alpha);
        assert!(compose_delta(layer).unwrap() != compose_delta(orig).unwrap());
    }
}
