//! Oracles shared by the integration tests. Nothing here calls into the
//! library's math: the SVD is a one-sided Jacobi iteration and gradients are
//! checked by central differences.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random matrix of rank at most `rank`.
pub fn low_rank(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rank: usize) -> DMatrix<f64> {
    gaussian(rng, rows, rank) * gaussian(rng, rank, cols)
}

/// One-sided Jacobi SVD. Returns `(U, σ, V)` with `σ` descending and
/// `M = U·diag(σ)·Vᵀ`; `U` is `rows × k`, `V` is `cols × k`, `k = min(rows, cols)`.
pub fn jacobi_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    if m.nrows() < m.ncols() {
        let (u, s, v) = jacobi_svd(&m.transpose());
        return (v, s, u);
    }
    let (rows, cols) = m.shape();
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(cols, cols);
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    alpha += a[(i, p)] * a[(i, p)];
                    beta += a[(i, q)] * a[(i, q)];
                    gamma += a[(i, p)] * a[(i, q)];
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (a[(i, p)], a[(i, q)]);
                    a[(i, p)] = c * x - s * y;
                    a[(i, q)] = s * x + c * y;
                }
                for i in 0..cols {
                    let (x, y) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * x - s * y;
                    v[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<(f64, usize)> = (0..cols).map(|j| (a.column(j).norm(), j)).collect();
    order.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    let mut u = DMatrix::zeros(rows, cols);
    let mut vs = DMatrix::zeros(cols, cols);
    let mut sigma = Vec::with_capacity(cols);
    for (k, &(s, j)) in order.iter().enumerate() {
        sigma.push(s);
        if s > 0.0 {
            u.set_column(k, &(a.column(j) / s));
        }
        vs.set_column(k, &v.column(j));
    }
    (u, sigma, vs)
}

/// `√(Σ_{i>r} σᵢ²)`
pub fn tail_energy(sigma: &[f64], rank: usize) -> f64 {
    sigma[rank.min(sigma.len())..].iter().map(|s| s * s).sum::<f64>().sqrt()
}

/// Central-difference gradient of `f` at `x`, entry by entry.
pub fn finite_difference(x: &DMatrix<f64>, h: f64, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(x.nrows(), x.ncols());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let plus = f(&probe);
        probe[idx] = orig - h;
        let minus = f(&probe);
        probe[idx] = orig;
        g[idx] = (plus - minus) / (2.0 * h);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute error when both are tiny.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    let diff = (a - b).norm();
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// A random alignment instance with all dimensions ≤ 8.
#[derive(Debug, Clone)]
pub struct Instance {
    pub c_t: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub delta_hat: DMatrix<f64>,
    pub delta_orig: DMatrix<f64>,
    pub alpha: f64,
    pub perturb: DMatrix<f64>,
    pub eta: f64,
}

impl Instance {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let l = r.random_range(1..=8);
        let n = r.random_range(1..=8);
        let m = r.random_range(1..=8);
        let rank = r.random_range(1..=n.min(m));
        let delta_orig = low_rank(&mut r, n, m, rank) * 0.3;
        let delta_hat = &delta_orig + gaussian(&mut r, n, m) * 0.1;
        Self {
            c_t: gaussian(&mut r, l, n),
            c: gaussian(&mut r, l, n),
            w: gaussian(&mut r, n, m),
            delta_hat,
            delta_orig,
            alpha: r.random_range(0.1..=1.0),
            perturb: gaussian(&mut r, n, m) * 1e-3,
            eta: r.random_range(0.0..=1.0),
        }
    }
}
