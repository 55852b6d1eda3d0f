use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use super::QNetError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub max_grad_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: 10.0,
        }
    }
}

/// Adaptive-moment optimizer with bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: ParameterSet,
    v: ParameterSet,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, like: &ParameterSet) -> Self {
        Self {
            config,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &ParameterSet,
    ) -> Result<(), QNetError> {
        let shapes_match = params
            .tensors()
            .iter()
            .zip(grads.tensors())
            .all(|((a, x), (b, y))| a == &b && x.shape == y.shape)
            && params.tensors().len() == grads.tensors().len();
        if !shapes_match {
            return Err(QNetError::ShapeMismatch {
                what: "gradients".into(),
                expected: vec![],
                got: vec![],
            });
        }
        let c = self.config;
        let norm = grads.l2_norm();
        let scale = if c.max_grad_norm > 0.0 && norm > c.max_grad_norm {
            c.max_grad_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let groups = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in groups {
            for i in 0..p.data.len() {
                let gi = g.data[i] * scale;
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::NetworkConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetworkConfig {
        NetworkConfig::tiny(crate::qnet::Fusion::Concatenation)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let cfg = small();
        let mut p = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..3 {
            let zero = p.zeros_like();
            adam.step(&mut p, &zero).unwrap();
        }
        assert!(p.bitwise_eq(&before));
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let cfg = small();
        let mut p = ParameterSet::zeros(&cfg);
        let mut g = p.zeros_like();
        g.trunk_b.data[0] = 3.0;
        g.trunk_b.data[1] = -0.01;
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                max_grad_norm: 0.0,
                ..Default::default()
            },
            &p,
        );
        adam.step(&mut p, &g).unwrap();
        assert!((p.trunk_b.data[0] + 0.1).abs() < 1e-6);
        assert!((p.trunk_b.data[1] - 0.1).abs() < 1e-4);
        assert_eq!(p.trunk_b.data[2], 0.0);
    }

    #[test]
    fn deterministic() {
        let cfg = small();
        let p0 = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let g = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let run = || {
            let mut p = p0.clone();
            let mut adam = Adam::new(AdamConfig::default(), &p);
            adam.step(&mut p, &g).unwrap();
            adam.step(&mut p, &g).unwrap();
            p
        };
        assert!(run().bitwise_eq(&run()));
    }

    #[test]
    fn shape_mismatch() {
        let p = ParameterSet::zeros(&small());
        let other = ParameterSet::zeros(&NetworkConfig::tiny(crate::qnet::Fusion::GatedAttention));
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let mut q = p.clone();
        assert!(matches!(
            adam.step(&mut q, &other),
            Err(QNetError::ShapeMismatch { .. })
        ));
    }
}
