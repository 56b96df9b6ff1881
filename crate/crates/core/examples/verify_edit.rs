//! Edits the fixture, then measures the original and edited adapters with the
//! embedding-space metrics and prints the JSON report.
//!
//!     cargo run --example verify_edit

use lora_eraser::adapter::{resolve_target_layers, DEFAULT_TARGET_PATTERNS};
use lora_eraser::diagnostics::assess;
use lora_eraser::edit::{edit_adapter, EditConfig};
use lora_eraser::synthetic::{build, SyntheticConfig};

fn main() -> lora_eraser::Result<()> {
    let fx = build(&SyntheticConfig { layers: 4, ..SyntheticConfig::default() });
    let outcome = edit_adapter(&fx.adapter, &fx.base, &fx.concept, &EditConfig::default(), &DEFAULT_TARGET_PATTERNS, Some(&fx.probes))?;
    let layers = resolve_target_layers(&fx.adapter, &DEFAULT_TARGET_PATTERNS)?;

    let before = assess(&fx.adapter, &fx.adapter, &fx.base, &fx.concept, Some(&fx.probes), 1.0, &layers)?;
    let after = assess(&fx.adapter, &outcome.adapter, &fx.base, &fx.concept, Some(&fx.probes), 1.0, &layers)?;
    println!("projection shift: unedited {:.3}, edited {:.3}", before.projection_shift_mean, after.projection_shift_mean);
    for m in &after.layers {
        println!("  {:<40} shift {:.3?} param drift {:.4}", m.name, m.projection_shift, m.param_drift);
    }
    println!("{}", outcome.report.to_json());
    Ok(())
}
