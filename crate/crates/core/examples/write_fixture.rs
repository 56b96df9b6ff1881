//! Writes the seeded desk-scale fixture (adapter, base weights, concept
//! bundle, probes) to a directory for use with the CLI or the service.
//!
//!     cargo run --example write_fixture -- /tmp/fixture [seed]

use lora_eraser::synthetic::{build, SyntheticConfig};

fn main() -> lora_eraser::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "fixture".to_string());
    let seed = args.next().map_or(0, |s| s.parse().expect("integer seed"));
    let fixture = build(&SyntheticConfig { seed, ..SyntheticConfig::default() });
    let paths = fixture.write_to(&dir)?;
    println!("adapter  {}", paths.adapter.display());
    println!("base     {}", paths.base.display());
    println!("concept  {}", paths.concept.display());
    println!("probes   {}", paths.probes.display());
    Ok(())
}
