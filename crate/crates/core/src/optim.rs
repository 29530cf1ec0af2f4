//! SGD with classical momentum and coupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer state. Velocity buffers are allocated on the first step and must
/// match the parameter list on every later step.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl SgdState {
    pub fn new(learning_rate: f32, momentum: f32, weight_decay: f32) -> Self {
        SgdState { learning_rate, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn velocity(&self, index: usize) -> Option<&[f32]> {
        self.velocity.get(index).map(|v| v.as_slice())
    }
}

/// One update: `v <- momentum*v + grad + weight_decay*param`, then
/// `param <- param - learning_rate*v`. Gradients are cleared afterwards so a
/// stale gradient can never leak into the next step.
pub fn sgd_momentum_step(params: &mut [Tensor], state: &mut SgdState) -> Result<()> {
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0f32; p.numel()]).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state holds {} velocity buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    for (i, param) in params.iter_mut().enumerate() {
        let grad = param.grad.take().ok_or_else(|| {
            Error::Contract(format!("parameter {i} has no gradient; run backward first"))
        })?;
        let vel = &mut state.velocity[i];
        if vel.len() != param.numel() || grad.len() != param.numel() {
            return Err(Error::Contract(format!(
                "parameter {i}: size {} with gradient {} and velocity {}",
                param.numel(),
                grad.len(),
                vel.len()
            )));
        }
        let (m, wd, lr) = (state.momentum, state.weight_decay, state.learning_rate);
        let data = param.data_mut();
        for j in 0..data.len() {
            vel[j] = m * vel[j] + grad[j] + wd * data[j];
            data[j] -= lr * vel[j];
        }
        param.check_finite("sgd_momentum_step")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(data: &[f32]) -> Tensor {
        let mut t = Tensor::from_vec(vec![data.len()], data.to_vec()).unwrap().with_grad();
        t.grad = Some(vec![0.0; data.len()]);
        t
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_and_decays_velocity() {
        let mut p = param(&[1.0, -2.0]);
        p.grad = Some(vec![0.0, 0.0]);
        let mut state = SgdState::new(0.1, 0.9, 0.0);
        sgd_momentum_step(std::slice::from_mut(&mut p), &mut state).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        // Seed a velocity, then confirm it decays by the momentum factor.
        let mut p = param(&[1.0, -2.0]);
        p.grad = Some(vec![1.0, 1.0]);
        sgd_momentum_step(std::slice::from_mut(&mut p), &mut state).unwrap();
        let v1 = state.velocity(0).unwrap().to_vec();
        p.grad = Some(vec![0.0, 0.0]);
        sgd_momentum_step(std::slice::from_mut(&mut p), &mut state).unwrap();
        let v2 = state.velocity(0).unwrap();
        for (a, b) in v1.iter().zip(v2) {
            assert_eq!(*b, 0.9 * *a);
        }
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut p = Tensor::zeros(vec![3]).with_grad();
        let mut state = SgdState::new(0.1, 0.9, 0.0);
        let err = sgd_momentum_step(std::slice::from_mut(&mut p), &mut state).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn gradients_are_cleared_after_the_step() {
        let mut p = param(&[0.5]);
        p.grad = Some(vec![0.2]);
        let mut state = SgdState::new(0.01, 0.9, 0.0005);
        sgd_momentum_step(std::slice::from_mut(&mut p), &mut state).unwrap();
        assert!(p.grad.is_none());
    }

    #[test]
    fn zero_learning_rate_is_bit_exact_identity_on_params() {
        let before = [0.25f32, -1.5, 0.0, 3.0e-7];
        let mut p = param(&before);
        p.grad = Some(vec![5.0, -2.0, 1.0, 0.5]);
        let mut state = SgdState::new(0.0, 0.9, 0.0005);
        sgd_momentum_step(std::slice::from_mut(&mut p), &mut state).unwrap();
        assert_eq!(p.data(), &before);
    }
}
