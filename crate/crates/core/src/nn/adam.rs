use serde::{Deserialize, Serialize};

use super::param::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers follow the module's parameter
/// visiting order, flattened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// Applies one update using the gradients currently stored in `module`,
    /// scaled by `grad_scale` (e.g. 1 / batch size).
    pub fn step(&mut self, module: &mut dyn Parameters, grad_scale: f32) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = (c.learning_rate * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, (c.eps * bc2.sqrt()) as f32);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut offset = 0;
        module.visit_params_mut(&mut |p| {
            for (j, (w, g)) in p.value.iter_mut().zip(&p.grad).enumerate() {
                let g = g * grad_scale;
                let k = offset + j;
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                *w -= lr * m[k] / (v[k].sqrt() + eps);
            }
            offset += p.len();
        });
        debug_assert_eq!(offset, self.m.len());
    }
}
