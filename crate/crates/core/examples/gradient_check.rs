//! Compares the analytic gradient of the editing objective with central
//! finite differences on a small random instance.
//!
//!     cargo run --example gradient_check -- [seed]

use lora_eraser::edit::{adversarial_delta, grad_all, loss_all};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> lora_eraser::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("integer seed"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |r: usize, c: usize| DMatrix::<f64>::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    let (l, n, m) = (4, 6, 5);
    let (c_t, c, w) = (gaussian(l, n), gaussian(l, n), gaussian(n, m));
    let delta_orig = gaussian(n, m) * 0.3;
    let delta_hat = &delta_orig + gaussian(n, m) * 0.1;
    let (alpha, eta, tau) = (0.8, 0.1, 1e-3);

    let perturb = adversarial_delta(&c_t, &c, &w, &delta_hat, &delta_orig, alpha, tau)?;
    println!("‖δ_w‖ = {:.6e} (τ = {tau:e})", perturb.norm());

    let analytic = grad_all(&c_t, &c, &w, &delta_hat, &delta_orig, alpha, &perturb, eta)?;
    let h = 1e-6;
    let mut numeric = DMatrix::zeros(n, m);
    let mut probe = delta_hat.clone();
    for i in 0..probe.len() {
        let x = probe[i];
        probe[i] = x + h;
        let plus = loss_all(&c_t, &c, &w, &probe, &delta_orig, alpha, &perturb, eta)?;
        probe[i] = x - h;
        let minus = loss_all(&c_t, &c, &w, &probe, &delta_orig, alpha, &perturb, eta)?;
        probe[i] = x;
        numeric[i] = (plus - minus) / (2.0 * h);
    }
    let rel = (&analytic - &numeric).norm() / analytic.norm().max(numeric.norm());
    println!("‖∇ analytic‖ = {:.6}, relative error vs differences = {rel:.2e}", analytic.norm());
    Ok(())
}
