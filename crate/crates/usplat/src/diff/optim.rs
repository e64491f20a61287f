//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use super::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
}

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        // base learning rate 1e-4
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer state keyed by parameter name; step count shared.
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update over `(name, param, grad)` triples. Gradients of
    /// `None` are treated as zero (decay still applies).
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = (&'a str, &'a mut Tensor, Option<&'a Tensor>)>,
    ) -> Result<(), OptimError> {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p, grad) in params {
            if let Some(g) = grad {
                if !g.is_finite() {
                    return Err(OptimError::NonFiniteGrad(name.to_string()));
                }
            }
            let mom = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
            });
            for i in 0..p.numel() {
                let g = grad.map_or(0.0, |g| g.data[i]);
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                p.data[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p.data[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f32) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut p = one_param(1.5);
        let g = Tensor::scalar(0.0);
        opt.step([("p", &mut p, Some(&g))].into_iter()).unwrap();
        assert_eq!(p.data[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step with constant grad is a unit sign step
        let mut opt = AdamW::new(AdamWConfig { lr: 1e-4, weight_decay: 0.0, ..Default::default() });
        let mut p = one_param(0.0);
        let g = Tensor::scalar(0.37);
        opt.step([("p", &mut p, Some(&g))].into_iter()).unwrap();
        assert!((p.data[0].abs() - 1e-4).abs() < 1e-9, "got {}", p.data[0]);
        assert!(p.data[0] < 0.0);
    }

    #[test]
    fn decay_only_shrinks_param() {
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() });
        let mut p = one_param(2.0);
        let g = Tensor::scalar(0.0);
        opt.step([("p", &mut p, Some(&g))].into_iter()).unwrap();
        assert!((p.data[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-6);
    }

    #[test]
    fn lr_zero_is_identity() {
        let mut opt = AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() });
        let mut p = one_param(-0.7);
        let g = Tensor::scalar(3.0);
        opt.step([("p", &mut p, Some(&g))].into_iter()).unwrap();
        assert_eq!(p.data[0], -0.7);
    }

    #[test]
    fn non_finite_grad_is_reported_by_name() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = one_param(0.0);
        let g = Tensor::scalar(f32::NAN);
        let err = opt.step([("w.q", &mut p, Some(&g))].into_iter()).unwrap_err();
        assert!(err.to_string().contains("w.q"));
    }
}
