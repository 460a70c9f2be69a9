//! Adam with bias correction.

use crate::error::{CoreError, Result};

/// Per-parameter Adam accumulator. `t` counts completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update:
/// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  t <- t+1;
/// param <- param - lr * m_hat / (sqrt(v_hat) + eps).
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(CoreError::ShapeMismatch {
            op: "adam_step",
            lhs: vec![param.len()],
            rhs: vec![grad.len()],
        });
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_fresh_state_leaves_params() {
        let mut p = vec![1.5, -2.0];
        let mut st = AdamState::new(2, 0.1);
        adam_step(&mut p, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        // m_hat = v_hat = 1 on the first step, so the update is -lr/(1+eps).
        let mut p = vec![0.0];
        let mut st = AdamState::new(1, 0.1);
        adam_step(&mut p, &[1.0], &mut st).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8, "got {}", p[0]);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = vec![0.3, -0.7, 2.0];
            let mut st = AdamState::new(3, 0.05);
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|v| v * 0.1 + k as f64 * 1e-3).collect();
                adam_step(&mut p, &g, &mut st).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new(2, 0.1);
        assert!(adam_step(&mut p, &[1.0], &mut st).is_err());
    }
}
