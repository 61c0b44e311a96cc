use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adaptive-moment gradient descent with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u32,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Apply one update over the given `(parameter, gradient)` pairs.
    /// Pairs must arrive in a deterministic order; moments live per
    /// parameter slot.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step_count += 1;
        let correction1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let correction2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (id, grad) in grads {
            let idx = id.0;
            if idx >= self.first.len() {
                self.first.resize(idx + 1, None);
                self.second.resize(idx + 1, None);
            }
            let n = grad.len();
            let m = self.first[idx].get_or_insert_with(|| vec![0.0; n]);
            let v = self.second[idx].get_or_insert_with(|| vec![0.0; n]);
            let mut data = store.get(*id).data().to_vec();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            store.set(*id, Tensor::raw(store.get(*id).shape().to_vec(), data));
        }
    }
}
