//! Adaptive moment estimation with an inverse-square-root warmup schedule.

use super::params::{Grads, ParamStore};
use super::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    /// Multiplier on the schedule `d_model^-0.5 · min(s^-0.5, s · warmup^-1.5)`.
    pub lr_factor: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr_factor: 2.0, warmup_steps: 4000, beta1: 0.9, beta2: 0.98, eps: 1e-9, clip_norm: None }
    }
}

impl AdamConfig {
    /// Learning rate at 1-based step `step`.
    pub fn learning_rate(&self, step: usize, d_model: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.lr_factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub step: usize,
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig, params: &ParamStore<F>) -> Self {
        Adam { config, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    /// Apply one update and return the learning rate used.
    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &mut Grads<F>, d_model: usize) -> f64 {
        if let Some(max) = self.config.clip_norm {
            let norm = grads.squared_norm().sqrt();
            if norm > max {
                grads.scale(F::of(max / norm));
            }
        }
        self.step += 1;
        let lr = self.config.learning_rate(self.step, d_model);
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let step_size = F::of(lr / c1);
        let c2 = F::of(c2);
        let (b1, b2, eps) = (F::of(b1), F::of(b2), F::of(self.config.eps));
        let one = F::one();
        for id in 0..params.len() {
            let g = &grads.get(id).data;
            let m = &mut self.m.get_mut(id).data;
            let v = &mut self.v.get_mut(id).data;
            let p = &mut params.get_mut(id).data;
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                p[i] -= step_size * m[i] / ((v[i] / c2).sqrt() + eps);
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Matrix;

    #[test]
    fn schedule_peaks_at_warmup() {
        let c = AdamConfig { lr_factor: 1.0, warmup_steps: 100, ..Default::default() };
        let peak = c.learning_rate(100, 64);
        assert!((peak - 64f64.powf(-0.5) * 0.1).abs() < 1e-15);
        assert!(c.learning_rate(50, 64) < peak);
        assert!(c.learning_rate(400, 64) < peak);
        assert!((c.learning_rate(400, 64) - peak / 2.0).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr · sign(g) (up to eps).
        let mut params = ParamStore::<f64>::new();
        params.push("w".into(), Matrix::from_vec(1, 2, vec![1.0, -1.0]));
        let mut grads = params.zeros_like();
        grads.get_mut(0).data = vec![0.5, -3.0];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let lr = adam.update(&mut params, &mut grads, 16);
        assert!((params.get(0).data[0] - (1.0 - lr)).abs() < 1e-12);
        assert!((params.get(0).data[1] - (-1.0 + lr)).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_gradient_norm() {
        let mut params = ParamStore::<f64>::new();
        params.push("w".into(), Matrix::zeros(1, 2));
        let mut grads = params.zeros_like();
        grads.get_mut(0).data = vec![3.0, 4.0];
        let mut adam = Adam::new(AdamConfig { clip_norm: Some(1.0), ..Default::default() }, &params);
        adam.update(&mut params, &mut grads, 16);
        assert!((grads.squared_norm() - 1.0).abs() < 1e-12);
    }
}
