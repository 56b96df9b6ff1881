use nalgebra::DMatrix;

use super::EditConfig;
use crate::error::{Error, Result};
use crate::linalg::Real;

/// Bias-corrected Adam moments for one dense parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub first_moment: DMatrix<T>,
    pub second_moment: DMatrix<T>,
    pub step_count: u32,
}

impl<T: Real> AdamState<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            first_moment: DMatrix::zeros(rows, cols),
            second_moment: DMatrix::zeros(rows, cols),
            step_count: 0,
        }
    }

    /// In-place update of `param`.
    pub fn update(&mut self, param: &mut DMatrix<T>, grad: &DMatrix<T>, config: &EditConfig) -> Result<()> {
        if param.shape() != grad.shape() || param.shape() != self.first_moment.shape() {
            return Err(Error::ShapeMismatch(format!(
                "adam: param {:?}, grad {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                self.first_moment.shape()
            )));
        }
        self.step_count += 1;
        let b1 = T::of(config.adam_beta1);
        let b2 = T::of(config.adam_beta2);
        let one = T::one();
        let t = self.step_count as i32;
        let bias1 = one - T::of(config.adam_beta1.powi(t));
        let bias2 = one - T::of(config.adam_beta2.powi(t));
        let lr = T::of(config.learning_rate);
        let eps = T::of(config.adam_epsilon);

        self.first_moment.zip_apply(grad, |m, g| *m = b1 * *m + (one - b1) * g);
        self.second_moment.zip_apply(grad, |v, g| *v = b2 * *v + (one - b2) * g * g);
        param.zip_zip_apply(&self.first_moment, &self.second_moment, |p, m, v| {
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
        Ok(())
    }
}

/// One Adam step, returning the new parameter and state.
pub fn adam_step<T: Real>(
    state: &AdamState<T>,
    param: &DMatrix<T>,
    grad: &DMatrix<T>,
    config: &EditConfig,
) -> Result<(DMatrix<T>, AdamState<T>)> {
    let mut state = state.clone();
    let mut param = param.clone();
    state.update(&mut param, grad, config)?;
    Ok((param, state))
}
