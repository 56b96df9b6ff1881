//! Alignment and preservation losses with their analytic gradients.
//!
//! Shapes: embeddings are `L × n`, `W` and every delta are `n × m`, so the
//! residual `R = c_t·(W + α·ΔŴ + δ_w) − c·(W + α·ΔW)` is `L × m` and the
//! alignment loss is the mean of its squared entries. The anchor branch
//! `c·(W + α·ΔW)` is a constant: nothing flows into `ΔW`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{all_finite, Real};

/// Gradient norms below this yield a zero perturbation.
pub const GRADIENT_FLOOR: f64 = 1e-12;

fn check_pair<T: Real>(
    c_t: &DMatrix<T>,
    c: &DMatrix<T>,
    w: &DMatrix<T>,
    delta_hat: &DMatrix<T>,
    delta_orig: &DMatrix<T>,
    perturb: Option<&DMatrix<T>>,
) -> Result<()> {
    let (n, m) = w.shape();
    if c_t.ncols() != n || c.shape() != c_t.shape() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings {:?} / {:?} do not feed a {n}×{m} projection",
            c_t.shape(),
            c.shape()
        )));
    }
    for (name, d) in [("delta_hat", Some(delta_hat)), ("delta_orig", Some(delta_orig)), ("perturb", perturb)] {
        if let Some(d) = d {
            if d.shape() != (n, m) {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {:?}, expected {:?}",
                    d.shape(),
                    (n, m)
                )));
            }
        }
    }
    let finite = all_finite(c_t)
        && all_finite(c)
        && all_finite(w)
        && all_finite(delta_hat)
        && all_finite(delta_orig)
        && perturb.is_none_or(all_finite);
    if !finite {
        return Err(Error::NonFiniteInput("alignment inputs".into()));
    }
    Ok(())
}

fn residual<T: Real>(
    c_t: &DMatrix<T>,
    c: &DMatrix<T>,
    w: &DMatrix<T>,
    delta_hat: &DMatrix<T>,
    delta_orig: &DMatrix<T>,
    alpha: T,
    perturb: Option<&DMatrix<T>>,
) -> DMatrix<T> {
    let mut edited = w + delta_hat * alpha;
    if let Some(p) = perturb {
        edited += p;
    }
    let anchor = c * (w + delta_orig * alpha);
    c_t * edited - anchor
}

fn mean_square<T: Real>(m: &DMatrix<T>) -> T {
    m.norm_squared() / T::of(m.len().max(1) as f64)
}

/// Mean over all `L·m` output entries of the squared residual.
#[allow(clippy::too_many_arguments)]
pub fn loss_align<T: Real>(
    c_t: &DMatrix<T>,
    c: &DMatrix<T>,
    w: &DMatrix<T>,
    delta_hat: &DMatrix<T>,
    delta_orig: &DMatrix<T>,
    alpha: T,
    perturb: &DMatrix<T>,
) -> Result<T> {
    check_pair(c_t, c, w, delta_hat, delta_orig, Some(perturb))?;
    Ok(mean_square(&residual(c_t, c, w, delta_hat, delta_orig, alpha, Some(perturb))))
}

/// `‖ΔŴ − ΔW‖² / (n·m)`
pub fn loss_pre<T: Real>(delta_hat: &DMatrix<T>, delta_orig: &DMatrix<T>) -> Result<T> {
    if delta_hat.shape() != delta_orig.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            delta_hat.shape(),
            delta_orig.shape()
        )));
    }
    Ok(mean_square(&(delta_hat - delta_orig)))
}

/// `∂ loss_pre / ∂ΔŴ = 2(ΔŴ − ΔW)/(n·m)`
pub fn grad_pre<T: Real>(delta_hat: &DMatrix<T>, delta_orig: &DMatrix<T>) -> Result<DMatrix<T>> {
    if delta_hat.shape() != delta_orig.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            delta_hat.shape(),
            delta_orig.shape()
        )));
    }
    let scale = T::of(2.0 / delta_hat.len().max(1) as f64);
    Ok((delta_hat - delta_orig) * scale)
}

/// `∂ loss_align / ∂ΔŴ = (2α / (L·m)) · c_tᵀ·R`
#[allow(clippy::too_many_arguments)]
pub fn grad_align<T: Real>(
    c_t: &DMatrix<T>,
    c: &DMatrix<T>,
    w: &DMatrix<T>,
    delta_hat: &DMatrix<T>,
    delta_orig: &DMatrix<T>,
    alpha: T,
    perturb: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    check_pair(c_t, c, w, delta_hat, delta_orig, Some(perturb))?;
    let r = residual(c_t, c, w, delta_hat, delta_orig, alpha, Some(perturb));
    let scale = alpha * T::of(2.0 / r.len().max(1) as f64);
    Ok(c_t.transpose() * r * scale)
}

/// `loss_align + η · loss_pre` with the perturbation held fixed.
#[allow(clippy::too_many_arguments)]
pub fn loss_all<T: Real>(
    c_t: &DMatrix<T>,
    c: &DMatrix<T>,
    w: &DMatrix<T>,
    delta_hat: &DMatrix<T>,
    delta_orig: &DMatrix<T>,
    alpha: T,
    perturb: &DMatrix<T>,
    eta: T,
) -> Result<T> {
    Ok(loss_align(c_t, c, w, delta_hat, delta_orig, alpha, perturb)? + eta * loss_pre(delta_hat, delta_orig)?)
}

#[allow(clippy::too_many_arguments)]
pub fn grad_all<T: Real>(
    c_t: &DMatrix<T>,
    c: &DMatrix<T>,
    w: &DMatrix<T>,
    delta_hat: &DMatrix<T>,
    delta_orig: &DMatrix<T>,
    alpha: T,
    perturb: &DMatrix<T>,
    eta: T,
) -> Result<DMatrix<T>> {
    Ok(grad_align(c_t, c, w, delta_hat, delta_orig, alpha, perturb)? + grad_pre(delta_hat, delta_orig)? * eta)
}

/// Worst-case weight offset of norm `tau`: the unperturbed alignment gradient
/// with respect to `W`, `(2/(L·m))·c_tᵀ·R`, rescaled to length `tau`. Zero when
/// that gradient vanishes.
pub fn adversarial_delta<T: Real>(
    c_t: &DMatrix<T>,
    c: &DMatrix<T>,
    w: &DMatrix<T>,
    delta_hat: &DMatrix<T>,
    delta_orig: &DMatrix<T>,
    alpha: T,
    tau: T,
) -> Result<DMatrix<T>> {
    check_pair(c_t, c, w, delta_hat, delta_orig, None)?;
    let r = residual(c_t, c, w, delta_hat, delta_orig, alpha, None);
    let g = c_t.transpose() * &r * T::of(2.0 / r.len().max(1) as f64);
    Ok(normalize_to(g, tau))
}

fn normalize_to<T: Real>(g: DMatrix<T>, tau: T) -> DMatrix<T> {
    let norm = g.norm();
    if norm.as_f64() < GRADIENT_FLOOR {
        DMatrix::zeros(g.nrows(), g.ncols())
    } else {
        g * (tau / norm)
    }
}

/// The `K`-pair alignment objective of one layer, with the synonym
/// embeddings stacked into a `K·L × n` matrix and the constant anchor
/// projections precomputed. Every loss and gradient here is the arithmetic
/// mean of the corresponding single-pair quantity over the `K` pairs.
#[derive(Debug, Clone)]
pub struct AlignmentProblem<T: Real> {
    targets: DMatrix<T>,
    /// `targets` transposed, for the gradient products.
    targets_t: DMatrix<T>,
    anchors: DMatrix<T>,
    w: DMatrix<T>,
    delta_orig: DMatrix<T>,
    alpha: T,
}

impl<T: Real> AlignmentProblem<T> {
    /// `pairs` holds `(synonym, anchor)` embeddings, all `L × n`.
    pub fn new(
        pairs: &[(&DMatrix<T>, &DMatrix<T>)],
        w: DMatrix<T>,
        delta_orig: DMatrix<T>,
        alpha: T,
    ) -> Result<Self> {
        let Some(((first, _), _)) = pairs.split_first() else {
            return Err(Error::InvalidBundle("no embedding pairs".into()));
        };
        let (l, n) = first.shape();
        if w.nrows() != n || delta_orig.shape() != w.shape() {
            return Err(Error::ShapeMismatch(format!(
                "embeddings are {l}×{n}, W is {:?}, ΔW is {:?}",
                w.shape(),
                delta_orig.shape()
            )));
        }
        if !all_finite(&w) || !all_finite(&delta_orig) {
            return Err(Error::NonFiniteInput("W or ΔW".into()));
        }
        let k = pairs.len();
        let mut targets = DMatrix::zeros(k * l, n);
        let mut anchor_embeddings = DMatrix::zeros(k * l, n);
        for (i, (c_t, c)) in pairs.iter().enumerate() {
            if c_t.shape() != (l, n) || c.shape() != (l, n) {
                return Err(Error::ShapeMismatch(format!("pair {i} is not {l}×{n}")));
            }
            if !all_finite(c_t) || !all_finite(c) {
                return Err(Error::NonFiniteInput(format!("embedding pair {i}")));
            }
            targets.rows_mut(i * l, l).copy_from(c_t);
            anchor_embeddings.rows_mut(i * l, l).copy_from(c);
        }
        let anchors = anchor_embeddings * (&w + &delta_orig * alpha);
        Ok(Self {
            targets_t: targets.transpose(),
            targets,
            anchors,
            w,
            delta_orig,
            alpha,
        })
    }

    pub fn delta_orig(&self) -> &DMatrix<T> {
        &self.delta_orig
    }

    /// Stacked residual `C_t·(W + α·ΔŴ + δ) − C·(W + α·ΔW)`, `K·L × m`.
    pub fn residual(&self, delta_hat: &DMatrix<T>, perturb: Option<&DMatrix<T>>) -> DMatrix<T> {
        let mut edited = &self.w + delta_hat * self.alpha;
        if let Some(p) = perturb {
            edited += p;
        }
        &self.targets * edited - &self.anchors
    }

    /// Adds `C_t·δ` to an unperturbed residual.
    pub fn perturb_residual(&self, residual: &DMatrix<T>, perturb: &DMatrix<T>) -> DMatrix<T> {
        residual + &self.targets * perturb
    }

    /// Pair-averaged alignment loss of a residual.
    pub fn loss(&self, residual: &DMatrix<T>) -> T {
        mean_square(residual)
    }

    /// Pair-averaged `∂ loss / ∂W`.
    pub fn w_gradient(&self, residual: &DMatrix<T>) -> DMatrix<T> {
        &self.targets_t * residual * T::of(2.0 / residual.len().max(1) as f64)
    }

    pub fn adversarial_delta(&self, residual: &DMatrix<T>, tau: T) -> DMatrix<T> {
        normalize_to(self.w_gradient(residual), tau)
    }

    /// `L_align(δ) + η·L_pre` at a fixed perturbation.
    pub fn loss_all(&self, delta_hat: &DMatrix<T>, perturb: &DMatrix<T>, eta: T) -> T {
        self.loss(&self.residual(delta_hat, Some(perturb)))
            + eta * mean_square(&(delta_hat - &self.delta_orig))
    }

    /// Gradient of [`AlignmentProblem::loss_all`] with respect to `ΔŴ`.
    pub fn grad_all(&self, delta_hat: &DMatrix<T>, perturb: &DMatrix<T>, eta: T) -> DMatrix<T> {
        let r = self.residual(delta_hat, Some(perturb));
        self.grad_all_from_residual(&r, delta_hat, eta)
    }

    pub(crate) fn grad_all_from_residual(
        &self,
        residual: &DMatrix<T>,
        delta_hat: &DMatrix<T>,
        eta: T,
    ) -> DMatrix<T> {
        let pre_scale = eta * T::of(2.0 / delta_hat.len().max(1) as f64);
        self.w_gradient(residual) * self.alpha + (delta_hat - &self.delta_orig) * pre_scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_case() {
        let zero = s(0.0);
        let loss = loss_align(&s(2.0), &s(1.0), &s(1.0), &zero, &zero, 1.0, &zero).unwrap();
        assert_eq!(loss, 1.0);
        let grad = grad_align(&s(2.0), &s(1.0), &s(1.0), &zero, &zero, 1.0, &zero).unwrap();
        assert_eq!(grad[(0, 0)], 4.0);
    }

    #[test]
    fn identical_branches_have_zero_loss() {
        let c = DMatrix::from_fn(3, 4, |i, j| (i + 2 * j) as f64 * 0.1);
        let w = DMatrix::from_fn(4, 2, |i, j| (i as f64 - j as f64) * 0.3);
        let d = DMatrix::from_fn(4, 2, |i, j| (i * j) as f64 * 0.01);
        let zero = DMatrix::zeros(4, 2);
        assert_eq!(loss_align(&c, &c, &w, &d, &d, 0.7, &zero).unwrap(), 0.0);
        assert_eq!(grad_align(&c, &c, &w, &d, &d, 0.7, &zero).unwrap(), zero);
        assert_eq!(adversarial_delta(&c, &c, &w, &d, &d, 0.7, 1e-5).unwrap(), zero);
    }

    #[test]
    fn alpha_zero_ignores_deltas() {
        let c_t = DMatrix::<f64>::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let c = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, -1.0, 2.0]);
        let w = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.5, 2.0]);
        let zero = DMatrix::zeros(2, 2);
        let d1 = DMatrix::from_element(2, 2, 3.0);
        let d2 = DMatrix::from_element(2, 2, -7.0);
        let expected = ((&c_t - &c) * &w).map(|v| v * v).mean();
        assert!((loss_align(&c_t, &c, &w, &d1, &d2, 0.0, &zero).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn pre_loss_cases() {
        let a = DMatrix::from_element(2, 2, 1.0);
        let z = DMatrix::zeros(2, 2);
        assert_eq!(loss_pre(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_pre(&a, &z).unwrap(), 1.0);
        assert_eq!(loss_pre(&(&a * 3.0), &z).unwrap(), 9.0);
        assert!(matches!(loss_pre(&a, &DMatrix::zeros(2, 3)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn rejects_non_finite_and_mismatched() {
        let c = DMatrix::from_element(1, 2, 1.0);
        let w = DMatrix::from_element(2, 2, 1.0);
        let z = DMatrix::zeros(2, 2);
        let mut bad = c.clone();
        bad[(0, 0)] = f64::INFINITY;
        assert!(matches!(loss_align(&bad, &c, &w, &z, &z, 1.0, &z), Err(Error::NonFiniteInput(_))));
        assert!(matches!(
            loss_align(&c, &c, &DMatrix::zeros(3, 2), &z, &z, 1.0, &z),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn stacked_problem_matches_pair_mean() {
        let c1 = DMatrix::from_fn(2, 3, |i, j| (i + j) as f64 * 0.3 - 0.2);
        let a1 = DMatrix::from_fn(2, 3, |i, j| (i * j) as f64 * 0.1);
        let c2 = DMatrix::from_fn(2, 3, |i, j| (i as f64 - j as f64) * 0.4);
        let a2 = DMatrix::from_fn(2, 3, |_, j| j as f64 * -0.2);
        let w = DMatrix::from_fn(3, 4, |i, j| ((i * 4 + j) as f64).sin());
        let d0 = DMatrix::from_fn(3, 4, |i, j| ((i + 2 * j) as f64).cos() * 0.1);
        let dh = &d0 * 1.5;
        let p = DMatrix::from_element(3, 4, 0.01);
        let problem = AlignmentProblem::new(&[(&c1, &a1), (&c2, &a2)], w.clone(), d0.clone(), 0.8).unwrap();

        let l1 = loss_all(&c1, &a1, &w, &dh, &d0, 0.8, &p, 0.3).unwrap();
        let l2 = loss_all(&c2, &a2, &w, &dh, &d0, 0.8, &p, 0.3).unwrap();
        assert!((problem.loss_all(&dh, &p, 0.3) - (l1 + l2) / 2.0).abs() < 1e-13);

        let g1 = grad_all(&c1, &a1, &w, &dh, &d0, 0.8, &p, 0.3).unwrap();
        let g2 = grad_all(&c2, &a2, &w, &dh, &d0, 0.8, &p, 0.3).unwrap();
        assert!((problem.grad_all(&dh, &p, 0.3) - (g1 + g2) / 2.0).norm() < 1e-13);
    }
}
