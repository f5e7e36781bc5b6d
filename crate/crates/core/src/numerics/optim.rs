use super::{NumericsError, ParamStore, Tensor};

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<(), NumericsError> {
        if grads.len() != params.len() {
            return Err(NumericsError::Invalid(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        if self.m.is_empty() {
            self.m = params.values().iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (value, grad)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            if value.shape() != grad.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam",
                    lhs: value.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = value.to_vec();
            for (((p, &g), mi), vi) in data.iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            *value = Tensor::from_parts(value.shape().to_vec(), data);
        }
        Ok(())
    }
}
