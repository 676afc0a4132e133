//! Adam with bias correction.

use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
        }
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.first_moment.len(), "parameter length");
        assert_eq!(grads.len(), params.len(), "gradient length");
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// One [`AdamState`] per parameter tensor, addressed in a fixed order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn for_shapes(lens: impl IntoIterator<Item = usize>) -> Self {
        Self {
            states: lens.into_iter().map(AdamState::new).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        assert_eq!(params.len(), self.states.len(), "tensor count");
        assert_eq!(grads.len(), self.states.len(), "tensor count");
        for ((state, p), g) in self.states.iter_mut().zip(params).zip(grads) {
            state.step(p, g, lr);
        }
    }
}
