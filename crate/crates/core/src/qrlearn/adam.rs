use crate::qrlearn::model::{EngagementModel, Gradients};

/// Adam with bias correction. Moments are kept in `f64`.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &EngagementModel, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = model.zero_gradients().0;
        Adam { lr, beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, model: &mut EngagementModel, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((tensor, g), m), v) in model
            .tensors_mut()
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in tensor.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *p = (f64::from(*p) - update) as f32;
            }
        }
    }
}
