//! Erases a concept from the seeded desk-scale fixture and prints the
//! headline diagnostics.
//!
//!     cargo run --release --example synthetic_erasure -- [concept_gap] [synonym_spread] [factor_scale] [tokens] [seed]

use std::time::Instant;

use lora_eraser::adapter::DEFAULT_TARGET_PATTERNS;
use lora_eraser::edit::{edit_adapter, EditConfig};
use lora_eraser::synthetic::{build, SyntheticConfig};

fn main() -> lora_eraser::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<f64>().expect("numeric argument"));
    let mut config = SyntheticConfig::default();
    if let Some(gap) = args.next() {
        config.concept_gap = gap;
    }
    if let Some(spread) = args.next() {
        config.synonym_spread = spread;
    }
    if let Some(scale) = args.next() {
        config.factor_scale = scale;
    }
    if let Some(tokens) = args.next() {
        config.tokens = tokens as usize;
    }
    if let Some(seed) = args.next() {
        config.seed = seed as u64;
    }
    let fixture = build(&config);

    let start = Instant::now();
    let outcome = edit_adapter(
        &fixture.adapter,
        &fixture.base,
        &fixture.concept,
        &EditConfig::default(),
        &DEFAULT_TARGET_PATTERNS,
        Some(&fixture.probes),
    )?;
    let report = &outcome.report;
    let worst_ratio = report
        .layers
        .iter()
        .map(|l| l.final_align / l.initial_align)
        .fold(0.0, f64::max);
    println!("layers edited:          {}", report.layers.len());
    println!("mean projection shift:  {:.4}", report.projection_shift_mean);
    println!("max benign drift:       {:.4}", report.max_benign_drift().unwrap_or(0.0));
    println!("worst align ratio:      {worst_ratio:.4}");
    println!("elapsed:                {:.2?}", start.elapsed());
    Ok(())
}
