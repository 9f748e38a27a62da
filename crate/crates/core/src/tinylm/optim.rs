use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(len: usize, lr: f64) -> Self {
        OptimizerState { m: vec![0.0; len], v: vec![0.0; len], step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update in place. A non-finite gradient leaves
/// both `params` and `state` untouched and returns an error.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "params {}, grad {}, moments {}/{}",
            params.len(),
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient coordinate {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_is_noop() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = OptimizerState::new(3, 1e-3);
        adam_step(&mut p, &[0.0; 3], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn scalar_step_by_hand() {
        // x = 1, g = 0.5, lr = 0.1:
        // m = 0.05, v = 0.00025, mhat = 0.5, vhat = 0.25,
        // x' = 1 - 0.1 * 0.5 / (0.5 + 1e-8)
        let mut p = vec![1.0];
        let mut s = OptimizerState::new(1, 0.1);
        adam_step(&mut p, &[0.5], &mut s).unwrap();
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.900000002).abs() < 1e-12);
    }

    #[test]
    fn non_finite_grad_halts() {
        let mut p = vec![1.0, 1.0];
        let mut s = OptimizerState::new(2, 0.1);
        assert!(adam_step(&mut p, &[0.1, f64::NAN], &mut s).is_err());
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(s.step, 0);
        assert!(adam_step(&mut p, &[0.1], &mut s).is_err());
    }
}
