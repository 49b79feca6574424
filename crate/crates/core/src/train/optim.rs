//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::tensor::Tensor;
use crate::train::config::OptimizerConfig;

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimizerConfig,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Advances the step counter; call once per batch before [`Adam::update`].
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one update to `param` using its accumulated gradient scaled
    /// by `grad_scale`.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad_scale: f64) {
        let Some(grad) = param.grad().map(<[f64]>::to_vec) else { return };
        let n = param.len();
        let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let OptimizerConfig { learning_rate: lr, beta1: b1, beta2: b2, eps, weight_decay: wd } = self.cfg;
        let bc1 = 1.0 - b1.powi(self.step);
        let bc2 = 1.0 - b2.powi(self.step);
        for (i, w) in param.data_mut().iter_mut().enumerate() {
            let g = grad[i] * grad_scale;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
        }
    }
}
