//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Learning rate used for latent optimization unless configured otherwise.
pub const DEFAULT_LEARNING_RATE: f64 = 5e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && [self.learning_rate, self.eps, self.weight_decay]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step_count: 0,
        }
    }

    pub fn for_shape(m: &Matrix) -> Self {
        Self::new(m.rows(), m.cols())
    }
}

/// One AdamW update, in place.
///
/// Weight decay is applied to the parameters before the bias-corrected
/// moment step: `x ← x − lr·wd·x`, then `x ← x − lr·m̂ / (√v̂ + eps)`.
pub fn adamw_step_in_place(
    state: &mut OptimizerState,
    values: &mut Matrix,
    grad: &Matrix,
    config: &OptimizerConfig,
) -> Result<()> {
    values.ensure_same_shape(grad)?;
    values.ensure_same_shape(&state.first_moment)?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    let lr = config.learning_rate;
    let decay = 1.0 - lr * config.weight_decay;

    let m = state.first_moment.as_mut_slice();
    let v = state.second_moment.as_mut_slice();
    for (((x, g), m), v) in values
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        if config.weight_decay != 0.0 {
            *x *= decay;
        }
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *x -= lr * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}

/// Functional form of [`adamw_step_in_place`].
pub fn adamw_step(
    state: &OptimizerState,
    values: &Matrix,
    grad: &Matrix,
    config: &OptimizerConfig,
) -> Result<(OptimizerState, Matrix)> {
    let mut state = state.clone();
    let mut values = values.clone();
    adamw_step_in_place(&mut state, &mut values, grad, config)?;
    Ok((state, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> OptimizerConfig {
        OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn zero_gradient_is_noop_without_decay() {
        let x = Matrix::from_rows(&[[1.0, -2.0]]).unwrap();
        let s = OptimizerState::for_shape(&x);
        let (s1, x1) = adamw_step(&s, &x, &Matrix::zeros(1, 2), &no_decay()).unwrap();
        assert_eq!(x1, x);
        assert_eq!(s1.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps)
        let x = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let g = Matrix::from_rows(&[[3.0, -0.25]]).unwrap();
        let cfg = no_decay();
        let (_, x1) = adamw_step(&OptimizerState::for_shape(&x), &x, &g, &cfg).unwrap();
        let lr = cfg.learning_rate;
        assert!((x1[(0, 0)] - (0.5 - lr * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((x1[(0, 1)] - (0.5 + lr * 0.25 / (0.25 + 1e-8))).abs() < 1e-15);
        assert!((x1[(0, 0)] - (0.5 - lr)).abs() < 1e-10);
    }

    #[test]
    fn matches_scripted_oracle_over_two_steps() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.05,
            ..OptimizerConfig::default()
        };
        let x0 = [1.5f64, -0.7, 0.0];
        let g = [0.3f64, -2.0, 1e-3];

        // independent scalar re-implementation
        let mut expected = x0;
        for (i, e) in expected.iter_mut().enumerate() {
            let (mut m, mut v) = (0.0f64, 0.0f64);
            for t in 1..=2 {
                *e -= cfg.learning_rate * cfg.weight_decay * *e;
                m = cfg.beta1 * m + (1.0 - cfg.beta1) * g[i];
                v = cfg.beta2 * v + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m / (1.0 - cfg.beta1.powi(t));
                let vh = v / (1.0 - cfg.beta2.powi(t));
                *e -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
            }
        }

        let mut x = Matrix::from_rows(&[x0]).unwrap();
        let gm = Matrix::from_rows(&[g]).unwrap();
        let mut s = OptimizerState::for_shape(&x);
        adamw_step_in_place(&mut s, &mut x, &gm, &cfg).unwrap();
        adamw_step_in_place(&mut s, &mut x, &gm, &cfg).unwrap();
        for i in 0..3 {
            assert!((x[(0, i)] - expected[i]).abs() < 1e-12);
        }
        assert_eq!(s.step_count, 2);
        assert!(s.second_moment.as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn shape_mismatch() {
        let x = Matrix::zeros(2, 2);
        let r = adamw_step(&OptimizerState::for_shape(&x), &x, &Matrix::zeros(2, 3), &no_decay());
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
        assert!(OptimizerConfig { beta1: 1.0, ..no_decay() }.validate().is_err());
    }
}
