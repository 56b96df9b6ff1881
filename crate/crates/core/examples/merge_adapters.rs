//! Lists two adapters, merges them with weights and compares the merged delta
//! with the weighted sum of the inputs. The merge is stored at the largest
//! input rank, so two unrelated rank-4 adapters lose the tail of their rank-8
//! sum; the error printed matches the best rank-4 approximation.
//!
//!     cargo run --example merge_adapters

use lora_eraser::adapter::{compose_delta, merge_adapters};
use lora_eraser::cli::list_layers;
use lora_eraser::svd::svd_truncate;
use lora_eraser::synthetic::{cross_attention_names, random_adapter};

fn main() -> lora_eraser::Result<()> {
    let names = cross_attention_names(4);
    let style = random_adapter(&names, 32, 32, 4, 0.2, 1);
    let subject = random_adapter(&names, 32, 32, 4, 0.2, 2);

    for row in list_layers(&style) {
        println!("{:<40} {}x{} rank {} alpha {} {}", row.name, row.shape[0], row.shape[1], row.rank, row.stored_alpha, row.dtype);
    }

    let (ws, wt) = (0.7, 0.3);
    let merged = merge_adapters(&[(&style, ws), (&subject, wt)])?;
    println!("\nmerged rank {} per layer", merged.layers.values().next().map_or(0, |l| l.rank()));
    for name in &names {
        let want = compose_delta(&style.layers[name])? * ws + compose_delta(&subject.layers[name])? * wt;
        let got = compose_delta(&merged.layers[name])?;
        let best = (&want - svd_truncate(&want, 4)?.reconstruct()).norm();
        println!(
            "{name:<40} relative error {:.4}, best rank-4 {:.4}",
            (&got - &want).norm() / want.norm(),
            best / want.norm()
        );
    }
    Ok(())
}
