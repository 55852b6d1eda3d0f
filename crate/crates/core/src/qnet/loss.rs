//! Temporal-difference loss for (double) Q-learning.

use std::collections::HashMap;
use std::sync::Arc;

use super::layers::GruTrace;
use super::network::{
    backward, encode_instruction, encode_instruction_backward, encode_instruction_traced,
    forward_encoded,
};
use super::params::ParameterSet;
use super::tensor::argmax;
use super::{NetworkConfig, QNetError};

/// One transition with dense network inputs.
#[derive(Debug, Clone)]
pub struct TdSample {
    pub state: Vec<f64>,
    pub next_state: Vec<f64>,
    pub tokens: Arc<[usize]>,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdOutput {
    pub loss: f64,
    /// `Q(s, a) - y` per sample.
    pub td_errors: Vec<f64>,
}

/// Huber loss with unit threshold.
pub fn huber(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn huber_grad(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Distinct token sequences of the batch, and each sample's slot among them.
fn group_instructions(batch: &[TdSample]) -> (Vec<Arc<[usize]>>, Vec<usize>) {
    let mut unique: Vec<Arc<[usize]>> = Vec::new();
    let slots = batch
        .iter()
        .map(|s| match unique.iter().position(|u| **u == *s.tokens) {
            Some(i) => i,
            None => {
                unique.push(s.tokens.clone());
                unique.len() - 1
            }
        })
        .collect();
    (unique, slots)
}

/// Target-network instruction encodings keyed by token sequence. Valid only
/// until the target parameters change.
#[derive(Debug, Clone, Default)]
pub struct TargetEncodings {
    map: HashMap<Arc<[usize]>, Vec<f64>>,
}

impl TargetEncodings {
    pub fn clear(&mut self) {
        self.map.clear();
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn encodings(
        &mut self,
        cfg: &NetworkConfig,
        target: &ParameterSet,
        unique: &[Arc<[usize]>],
    ) -> Result<Vec<Vec<f64>>, QNetError> {
        unique
            .iter()
            .map(|t| {
                if let Some(e) = self.map.get(t) {
                    return Ok(e.clone());
                }
                let e = encode_instruction(cfg, target, t)?;
                self.map.insert(t.clone(), e.clone());
                Ok(e)
            })
            .collect()
    }
}

/// Bootstrapped targets `y = r + gamma * (1 - done) * Q_target(s', a*)` where
/// `a*` is chosen by the online network when `double_q`, otherwise by the
/// target network.
pub fn td_targets(
    cfg: &NetworkConfig,
    online: &ParameterSet,
    target: &ParameterSet,
    batch: &[TdSample],
    gamma: f64,
    double_q: bool,
) -> Result<Vec<f64>, QNetError> {
    let (unique, slots) = group_instructions(batch);
    let target_instr = TargetEncodings::default().encodings(cfg, target, &unique)?;
    let online_instr = if double_q {
        unique
            .iter()
            .map(|t| encode_instruction(cfg, online, t))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    targets_encoded(
        cfg,
        online,
        target,
        batch,
        &slots,
        &target_instr,
        &online_instr,
        gamma,
        double_q,
    )
}

#[allow(clippy::too_many_arguments)]
fn targets_encoded(
    cfg: &NetworkConfig,
    online: &ParameterSet,
    target: &ParameterSet,
    batch: &[TdSample],
    slots: &[usize],
    target_instr: &[Vec<f64>],
    online_instr: &[Vec<f64>],
    gamma: f64,
    double_q: bool,
) -> Result<Vec<f64>, QNetError> {
    batch
        .iter()
        .zip(slots)
        .map(|(s, &slot)| {
            if s.done {
                return Ok(s.reward);
            }
            let q_target =
                forward_encoded(cfg, target, s.next_state.clone(), &target_instr[slot])?.q;
            let best = if double_q {
                argmax(&forward_encoded(cfg, online, s.next_state.clone(), &online_instr[slot])?.q)
            } else {
                argmax(&q_target)
            };
            Ok(s.reward + gamma * q_target[best])
        })
        .collect()
}

fn check_batch(batch: &[TdSample], weights: &[f64], n_actions: usize) -> Result<(), QNetError> {
    if batch.is_empty() {
        return Err(QNetError::EmptyBatch);
    }
    if weights.len() != batch.len() {
        return Err(QNetError::ShapeMismatch {
            what: "importance weights".into(),
            expected: vec![batch.len()],
            got: vec![weights.len()],
        });
    }
    if let Some(s) = batch.iter().find(|s| s.action >= n_actions) {
        return Err(QNetError::ShapeMismatch {
            what: "action".into(),
            expected: vec![n_actions],
            got: vec![s.action],
        });
    }
    Ok(())
}

/// Weighted mean Huber loss on `Q(s, a) - y`.
#[allow(clippy::too_many_arguments)]
pub fn td_loss(
    cfg: &NetworkConfig,
    online: &ParameterSet,
    target: &ParameterSet,
    batch: &[TdSample],
    gamma: f64,
    double_q: bool,
    weights: &[f64],
) -> Result<TdOutput, QNetError> {
    check_batch(batch, weights, cfg.n_actions)?;
    let targets = td_targets(cfg, online, target, batch, gamma, double_q)?;
    let (unique, slots) = group_instructions(batch);
    let instr = unique
        .iter()
        .map(|t| encode_instruction(cfg, online, t))
        .collect::<Result<Vec<_>, _>>()?;
    let mut loss = 0.0;
    let mut td_errors = Vec::with_capacity(batch.len());
    for ((s, &slot), (&y, &w)) in batch.iter().zip(&slots).zip(targets.iter().zip(weights)) {
        let q = forward_encoded(cfg, online, s.state.clone(), &instr[slot])?.q;
        let delta = q[s.action] - y;
        loss += w * huber(delta);
        td_errors.push(delta);
    }
    Ok(TdOutput {
        loss: loss / batch.len() as f64,
        td_errors,
    })
}

/// [`td_loss`] plus its gradient with respect to the online parameters.
/// Targets are treated as constants.
#[allow(clippy::too_many_arguments)]
pub fn td_loss_and_grad(
    cfg: &NetworkConfig,
    online: &ParameterSet,
    target: &ParameterSet,
    batch: &[TdSample],
    gamma: f64,
    double_q: bool,
    weights: &[f64],
) -> Result<(TdOutput, ParameterSet), QNetError> {
    td_loss_and_grad_cached(
        cfg,
        online,
        target,
        batch,
        gamma,
        double_q,
        weights,
        &mut TargetEncodings::default(),
    )
}

/// [`td_loss_and_grad`] reusing target instruction encodings from `cache`.
/// The caller must clear the cache whenever `target` changes.
#[allow(clippy::too_many_arguments)]
pub fn td_loss_and_grad_cached(
    cfg: &NetworkConfig,
    online: &ParameterSet,
    target: &ParameterSet,
    batch: &[TdSample],
    gamma: f64,
    double_q: bool,
    weights: &[f64],
    cache: &mut TargetEncodings,
) -> Result<(TdOutput, ParameterSet), QNetError> {
    check_batch(batch, weights, cfg.n_actions)?;
    let (unique, slots) = group_instructions(batch);
    let traces: Vec<GruTrace> = unique
        .iter()
        .map(|t| encode_instruction_traced(cfg, online, t))
        .collect::<Result<_, _>>()?;
    let target_instr = cache.encodings(cfg, target, &unique)?;
    let online_instr: Vec<Vec<f64>> = traces.iter().map(|t| t.output.clone()).collect();
    let targets = targets_encoded(
        cfg,
        online,
        target,
        batch,
        &slots,
        &target_instr,
        &online_instr,
        gamma,
        double_q,
    )?;
    let mut d_instr = vec![vec![0.0; cfg.instr_dim]; unique.len()];
    let mut grads = online.zeros_like();
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut td_errors = Vec::with_capacity(batch.len());
    for ((s, &slot), (&y, &w)) in batch.iter().zip(&slots).zip(targets.iter().zip(weights)) {
        let trace = forward_encoded(cfg, online, s.state.clone(), &online_instr[slot])?;
        let delta = trace.q[s.action] - y;
        loss += w * huber(delta);
        td_errors.push(delta);
        let mut d_q = vec![0.0; cfg.n_actions];
        d_q[s.action] = w * huber_grad(delta) / n;
        backward(cfg, online, &trace, &d_q, &mut grads, &mut d_instr[slot]);
    }
    for (trace, d) in traces.iter().zip(&d_instr) {
        encode_instruction_backward(online, &mut grads, trace, d);
    }
    Ok((
        TdOutput {
            loss: loss / n,
            td_errors,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::Fusion;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(cfg: &NetworkConfig) -> Vec<TdSample> {
        let toks: [Arc<[usize]>; 2] = [
            Arc::from(vec![0, 1, 2, 4]),
            Arc::from(vec![0, 1, 2, 5, 3, 0, 1, 2, 6]),
        ];
        (0..6)
            .map(|i| TdSample {
                state: (0..cfg.input_len())
                    .map(|k| ((k * 7 + i) % 5) as f64 / 4.0)
                    .collect(),
                next_state: (0..cfg.input_len())
                    .map(|k| ((k * 3 + i) % 4) as f64 / 3.0)
                    .collect(),
                tokens: toks[i % 2].clone(),
                action: i % cfg.n_actions,
                reward: i as f64 * 0.3 - 0.5,
                done: i == 4,
            })
            .collect()
    }

    #[test]
    fn cached_targets_match_fresh_encodings() {
        let cfg = NetworkConfig::tiny(Fusion::GatedAttention);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let online = ParameterSet::init(&cfg, &mut rng);
        let target = ParameterSet::init(&cfg, &mut rng);
        let b = batch(&cfg);
        let w = vec![1.0; b.len()];
        let (fresh, g_fresh) = td_loss_and_grad(&cfg, &online, &target, &b, 0.9, true, &w).unwrap();
        let mut cache = TargetEncodings::default();
        for _ in 0..2 {
            let (out, g) =
                td_loss_and_grad_cached(&cfg, &online, &target, &b, 0.9, true, &w, &mut cache)
                    .unwrap();
            assert_eq!(out, fresh);
            assert!(g.bitwise_eq(&g_fresh));
        }
        assert_eq!(cache.len(), 2);
        let plain = td_loss(&cfg, &online, &target, &b, 0.9, true, &w).unwrap();
        assert_eq!(plain, fresh);
    }

    #[test]
    fn terminal_targets_ignore_bootstrap() {
        let cfg = NetworkConfig::tiny(Fusion::Concatenation);
        let p = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let b = batch(&cfg);
        let y = td_targets(&cfg, &p, &p, &b, 0.9, false).unwrap();
        assert_eq!(y[4], b[4].reward);
        assert_ne!(y[3], b[3].reward);
    }
}
