//! Adam with decoupled weight decay, per-tensor moment state keyed by
//! parameter name. Weight decay defaults to zero.

use crate::scalar::Scalar;
use std::collections::HashMap;

pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    moments: HashMap<String, (Vec<S>, Vec<S>)>,
    t: i32,
}

impl<S: Scalar> Default for AdamW<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> AdamW<S> {
    pub fn new() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, moments: HashMap::new(), t: 0 }
    }

    /// Advance the shared bias-correction step; call once per batch.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// One update. `scale` premultiplies the gradient (gradient clipping
    /// is a uniform rescale applied before the moments see it).
    pub fn update(&mut self, name: &str, values: &mut [S], grad: &[S], lr: f64, scale: f64) {
        let n = values.len();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![S::zero(); n], vec![S::zero(); n]));
        let b1 = S::c(self.beta1);
        let b2 = S::c(self.beta2);
        let one = S::one();
        let corr1 = S::c(1.0 - self.beta1.powi(self.t));
        let corr2 = S::c(1.0 - self.beta2.powi(self.t));
        let lr = S::c(lr);
        let scale = S::c(scale);
        let eps = S::c(self.eps);
        let wd = S::c(self.weight_decay);
        for i in 0..n {
            let g = grad[i] * scale;
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            values[i] = values[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * values[i]);
        }
    }
}

/// Linear warmup over the first `warmup_steps` steps, then the peak rate.
pub fn lr_at(peak: f64, warmup_steps: usize, global_step: usize) -> f64 {
    if warmup_steps == 0 || global_step >= warmup_steps {
        peak
    } else {
        peak * (global_step + 1) as f64 / warmup_steps as f64
    }
}
