//! Central finite-difference check of the analytic TD-loss gradient.

use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::loss::{td_loss, td_loss_and_grad, td_targets, TdSample};
use super::network::{encode_instruction, forward_encoded};
use super::params::ParameterSet;
use super::{NetworkConfig, QNetError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so gradients that are zero
    /// analytically and numerically compare as equal.
    pub floor: f64,
    pub batch: usize,
    /// Coordinates checked per tensor; `None` checks every coordinate.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            floor: 1e-6,
            batch: 4,
            coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates skipped because the two probes straddle a ReLU, Huber or
    /// argmax kink, where the loss is not differentiable within the step.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub fusion: String,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Random Gaussian observations and instructions of varying length, with
/// rewards spread wide enough that some TD errors fall outside the quadratic
/// Huber zone.
fn random_batch(cfg: &NetworkConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<TdSample> {
    let gauss = |len: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..len)
            .map(|_| StandardNormal.sample(rng))
            .collect::<Vec<f64>>()
    };
    let shared: Arc<[usize]> = Arc::from(vec![0, 1, 2, 3]);
    (0..n)
        .map(|i| {
            let tokens = if i % 2 == 0 {
                shared.clone()
            } else {
                let len = rng.random_range(1..=7);
                Arc::from(
                    (0..len)
                        .map(|_| rng.random_range(0..cfg.vocab_size))
                        .collect::<Vec<_>>(),
                )
            };
            TdSample {
                state: gauss(cfg.input_len(), rng),
                next_state: gauss(cfg.input_len(), rng),
                tokens,
                action: rng.random_range(0..cfg.n_actions),
                reward: rng.random_range(-3.0..3.0),
                done: i % 3 == 2,
            }
        })
        .collect()
}

/// Compares the analytic gradient of the importance-weighted TD loss against
/// central differences for every parameter tensor of `cfg`.
pub fn gradient_check(
    net: &NetworkConfig,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport, QNetError> {
    net.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let online = perturbed_init(net, &mut rng);
    let target = perturbed_init(net, &mut rng);
    let batch = random_batch(net, gc.batch.max(1), &mut rng);
    let weights: Vec<f64> = (0..batch.len())
        .map(|_| rng.random_range(0.5..=1.0))
        .collect();
    let gamma = 0.9;
    let (out, grads) = td_loss_and_grad(net, &online, &target, &batch, gamma, true, &weights)?;

    let mut probe = online.clone();
    let loss_at = |probe: &ParameterSet| {
        td_loss(net, probe, &target, &batch, gamma, true, &weights).map(|o| o.loss)
    };
    let mut tensors = Vec::new();
    for (t_idx, (name, g)) in grads.tensors().into_iter().enumerate() {
        let coords: Vec<usize> = match gc.coords_per_tensor {
            Some(k) if k < g.len() => index::sample(&mut rng, g.len(), k).into_vec(),
            _ => (0..g.len()).collect(),
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut skipped = 0;
        for &c in &coords {
            let orig = probe.tensors()[t_idx].1.data[c];
            probe.tensors_mut()[t_idx].1.data[c] = orig + gc.step;
            let plus = loss_at(&probe)?;
            let sig_plus = kink_signature(net, &probe, &target, &batch, gamma)?;
            probe.tensors_mut()[t_idx].1.data[c] = orig - gc.step;
            let minus = loss_at(&probe)?;
            let sig_minus = kink_signature(net, &probe, &target, &batch, gamma)?;
            probe.tensors_mut()[t_idx].1.data[c] = orig;
            if sig_plus != sig_minus {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * gc.step);
            let analytic = g.data[c];
            let abs = (analytic - numeric).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / analytic.abs().max(numeric.abs()).max(gc.floor));
        }
        tensors.push(TensorCheck {
            name: name.to_string(),
            checked: coords.len() - skipped,
            skipped_kinks: skipped,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel <= gc.tolerance && skipped < coords.len(),
        });
    }
    Ok(GradCheckReport {
        fusion: net.fusion.to_string(),
        loss: out.loss,
        tensors,
    })
}

/// Every piecewise choice the loss makes: active rectifier units, Huber
/// regime per sample, and the greedy next action used by the target.
fn kink_signature(
    net: &NetworkConfig,
    online: &ParameterSet,
    target: &ParameterSet,
    batch: &[TdSample],
    gamma: f64,
) -> Result<Vec<bool>, QNetError> {
    let targets = td_targets(net, online, target, batch, gamma, true)?;
    let mut sig = Vec::new();
    for (s, y) in batch.iter().zip(targets) {
        let instr = encode_instruction(net, online, &s.tokens)?;
        let trace = forward_encoded(net, online, s.state.clone(), &instr)?;
        trace.push_active_units(&mut sig);
        sig.push((trace.q[s.action] - y).abs() <= 1.0);
        if !s.done {
            let next = forward_encoded(net, online, s.next_state.clone(), &instr)?;
            let best = super::tensor::argmax(&next.q);
            sig.extend((0..net.n_actions).map(|a| a == best));
        }
    }
    Ok(sig)
}

/// Initialization with nonzero biases so every bias gradient is exercised.
fn perturbed_init(net: &NetworkConfig, rng: &mut ChaCha8Rng) -> ParameterSet {
    let mut p = ParameterSet::init(net, rng);
    for (name, t) in p.tensors_mut() {
        if name.ends_with("bias") || name.starts_with("gru.b") {
            for v in &mut t.data {
                let z: f64 = StandardNormal.sample(rng);
                *v = 0.1 * z;
            }
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::Fusion;

    #[test]
    fn every_tensor_passes_on_tiny_network() {
        for fusion in Fusion::ALL {
            let cfg = NetworkConfig::tiny(fusion);
            for seed in 0..3 {
                let report = gradient_check(
                    &cfg,
                    &GradCheckConfig {
                        seed,
                        ..Default::default()
                    },
                )
                .unwrap();
                for t in &report.tensors {
                    assert!(
                        t.passed,
                        "{fusion} seed {seed}: {} rel {:.2e}",
                        t.name, t.max_rel_error
                    );
                    assert!(
                        t.skipped_kinks * 20 <= t.checked + t.skipped_kinks,
                        "{}: too many kinks",
                        t.name
                    );
                }
                let n_expected = if fusion == Fusion::GatedAttention {
                    17
                } else {
                    15
                };
                assert_eq!(report.tensors.len(), n_expected);
            }
        }
    }

    #[test]
    fn sampled_coordinates_pass_on_default_network() {
        for fusion in Fusion::ALL {
            let cfg = NetworkConfig::default_for(10, 10, fusion);
            let gc = GradCheckConfig {
                coords_per_tensor: Some(6),
                batch: 3,
                seed: 11,
                ..Default::default()
            };
            let report = gradient_check(&cfg, &gc).unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }
}
