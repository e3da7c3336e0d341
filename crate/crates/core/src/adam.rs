//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment accumulators for an ordered parameter list.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    config: AdamConfig,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Zero both moments and the step counter.
    pub fn reset(&mut self) {
        for t in self.first.iter_mut().chain(self.second.iter_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
        self.step = 0;
    }

    /// Apply one update to every parameter. `params[i]` pairs with `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>]) -> Result<(), TensorError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                left: vec![self.first.len()],
                right: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            p.same_shape(g, "adam_step")?;
            p.same_shape(m, "adam_step")?;
        }

        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let t = self.step as i32;
        let bc1 = S::of(1.0 - c.beta1.powi(t));
        let bc2 = S::of(1.0 - c.beta2.powi(t));
        let (lr, eps) = (S::of(c.learning_rate), S::of(c.epsilon));

        let (inv_bc1, inv_bc2) = (S::one() / bc1, S::one() / bc2);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let moments = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
            for ((w, &gj), (mj, vj)) in p.data_mut().iter_mut().zip(g.data()).zip(moments) {
                *mj = b1 * *mj + one_b1 * gj;
                *vj = b2 * *vj + one_b2 * gj * gj;
                *w -= lr * (*mj * inv_bc1) / ((*vj * inv_bc2).sqrt() + eps);
            }
        }
        for p in params.iter() {
            if !p.all_finite() {
                return Err(TensorError::NonFinite("adam_step"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f32>::new(vec![3], vec![0.5, -1.25, 3.0]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(AdamConfig::default(), &[&[3]]);
        st.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::<f64>::zeros(&[3]);
        let g = Tensor::new(vec![3], vec![0.3, -2.0, 1e-3]).unwrap();
        let mut st = AdamState::new(AdamConfig::with_learning_rate(0.01), &[&[3]]);
        st.step(&mut [&mut p], &[&g]).unwrap();
        for (w, gi) in p.data().iter().zip(g.data()) {
            assert_eq!(w.signum(), -gi.signum());
            assert!((w.abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::<f32>::zeros(&[3]);
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::new(AdamConfig::default(), &[&[3]]);
        assert!(st.step(&mut [&mut p], &[&g]).is_err());
        let mut st = AdamState::<f32>::new(AdamConfig::default(), &[&[4]]);
        let g = Tensor::zeros(&[3]);
        assert!(st.step(&mut [&mut p], &[&g]).is_err());
    }

    #[test]
    fn reset_clears_counter() {
        let mut p = Tensor::<f32>::zeros(&[1]);
        let g = Tensor::filled(&[1], 1.0);
        let mut st = AdamState::new(AdamConfig::default(), &[&[1]]);
        st.step(&mut [&mut p], &[&g]).unwrap();
        st.reset();
        assert_eq!(st.step_count(), 0);
    }
}
