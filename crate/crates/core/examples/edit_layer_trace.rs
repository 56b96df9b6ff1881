//! Edits a single layer of the fixture and prints the per-step trace.
//!
//!     cargo run --example edit_layer_trace -- [steps] [eta]

use lora_eraser::edit::{edit_layer, EditConfig};
use lora_eraser::synthetic::{build, SyntheticConfig};

fn main() -> lora_eraser::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut config = EditConfig::default();
    if let Some(steps) = args.next() {
        config.steps = steps.parse().expect("integer steps");
    }
    if let Some(eta) = args.next() {
        config.eta = eta.parse().expect("numeric eta");
    }
    let fx = build(&SyntheticConfig { layers: 1, ..SyntheticConfig::default() });
    let (name, layer) = fx.adapter.layers.iter().next().expect("one layer");
    let edit = edit_layer(layer, fx.base.get(name).expect("base weight"), &fx.concept, &config)?;

    println!("{name}");
    println!("{:>4} {:>12} {:>12} {:>12} {:>10}", "step", "align", "pre", "all", "‖δ_w‖");
    for s in &edit.trace.steps {
        println!("{:>4} {:>12.4e} {:>12.4e} {:>12.4e} {:>10.2e}", s.step, s.align, s.pre, s.all, s.perturb_norm);
    }
    println!(
        "align {:.4e} -> {:.4e} ({:.1}%), ‖ΔŴ − ΔW‖/‖ΔW‖ = {:.4}",
        edit.initial_align,
        edit.final_align,
        100.0 * edit.final_align / edit.initial_align,
        (&edit.delta - &edit.delta_orig).norm() / edit.delta_orig.norm()
    );
    Ok(())
}
