//! Truncates a dense matrix to rank r, compares the error with the discarded
//! singular values, and splits the result into balanced LoRA factors.
//!
//!     cargo run --example svd_refactor -- [rank]

use lora_eraser::svd::{factorize, svd_truncate};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> lora_eraser::Result<()> {
    let rank = std::env::args().nth(1).map_or(4, |r| r.parse().expect("integer rank"));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = DMatrix::from_fn(24, 16, |_, _| rng.random_range(-1.0..1.0));

    let full = svd_truncate(&m, 16)?;
    let kept = svd_truncate(&m, rank)?;
    let tail: f64 = full.singular_values.iter().skip(rank).map(|s| s * s).sum::<f64>().sqrt();
    let error = (&m - kept.reconstruct()).norm();
    println!("singular values: {:.3?}", full.singular_values.as_slice());
    println!("rank {rank}: ‖M − M_r‖ = {error:.6}, tail energy = {tail:.6}");

    let (b, a) = factorize(&m, rank)?;
    println!("B {}×{}, A {}×{}", b.nrows(), b.ncols(), a.nrows(), a.ncols());
    for k in 0..rank {
        println!("  component {k}: ‖b‖ = {:.4}  ‖a‖ = {:.4}", b.column(k).norm(), a.row(k).norm());
    }
    println!("‖B·A − M_r‖ = {:.2e}", (&b * &a - kept.reconstruct()).norm());
    Ok(())
}
