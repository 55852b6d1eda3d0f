//! Experience replay: a uniform ring buffer and proportional prioritized replay.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::FrameStack;
use crate::sum_tree::{MaxTree, SumTree};

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("index {index} out of range for buffer of size {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{indices} indices but {errors} td errors")]
    LengthMismatch { indices: usize, errors: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub frames: FrameStack,
    pub tokens: Arc<[usize]>,
    pub action: usize,
    pub reward: f64,
    pub next_frames: FrameStack,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    Uniform,
    Prioritized,
}

impl std::str::FromStr for ReplayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(ReplayMode::Uniform),
            "prioritized" | "per" => Ok(ReplayMode::Prioritized),
            _ => Err(format!("unknown replay mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerConfig {
    pub alpha: f64,
    pub beta_start: f64,
    /// Steps over which beta is annealed linearly to 1.
    pub beta_steps: usize,
    pub epsilon_priority: f64,
    pub capacity: usize,
}

impl Default for PerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta_start: 0.4,
            beta_steps: 100_000,
            epsilon_priority: 1e-3,
            capacity: 1 << 17,
        }
    }
}

impl PerConfig {
    pub fn beta_at(&self, step: usize) -> f64 {
        if self.beta_steps == 0 {
            return 1.0;
        }
        let frac = (step as f64 / self.beta_steps as f64).min(1.0);
        self.beta_start + frac * (1.0 - self.beta_start)
    }
}

#[derive(Debug, Clone)]
struct Priorities {
    alpha: f64,
    epsilon: f64,
    raw: Vec<f64>,
    mass: SumTree,
    max: MaxTree,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub indices: Vec<usize>,
    /// Importance-sampling weights, all ones for uniform sampling.
    pub weights: Vec<f64>,
}

/// Fixed-capacity ring buffer. When constructed prioritized, items also
/// carry a priority `p` and are drawn with probability `p^alpha / sum`.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
    priorities: Option<Priorities>,
}

impl ReplayBuffer {
    pub fn uniform(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::new(),
            capacity,
            cursor: 0,
            priorities: None,
        }
    }

    pub fn prioritized(cfg: &PerConfig) -> Self {
        assert!(cfg.capacity > 0, "replay capacity must be positive");
        assert!(
            cfg.alpha >= 0.0 && cfg.epsilon_priority > 0.0,
            "invalid PER config {cfg:?}"
        );
        Self {
            items: Vec::new(),
            capacity: cfg.capacity,
            cursor: 0,
            priorities: Some(Priorities {
                alpha: cfg.alpha,
                epsilon: cfg.epsilon_priority,
                raw: vec![0.0; cfg.capacity],
                mass: SumTree::new(cfg.capacity),
                max: MaxTree::new(cfg.capacity),
            }),
        }
    }

    pub fn new(mode: ReplayMode, cfg: &PerConfig) -> Self {
        match mode {
            ReplayMode::Uniform => Self::uniform(cfg.capacity),
            ReplayMode::Prioritized => Self::prioritized(cfg),
        }
    }

    pub fn mode(&self) -> ReplayMode {
        if self.priorities.is_some() {
            ReplayMode::Prioritized
        } else {
            ReplayMode::Uniform
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Stores `t`, overwriting the oldest item once full. Prioritized items
    /// start at the current maximum priority (1.0 for an empty buffer).
    pub fn push(&mut self, t: Transition) {
        let slot = self.cursor;
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[slot] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        if let Some(p) = self.priorities.as_mut() {
            // clear the overwritten slot first so it cannot be its own max
            p.max.set(slot, 0.0);
            let m = p.max.max();
            let priority = if m > 0.0 { m } else { 1.0 };
            p.set(slot, priority);
        }
    }

    pub fn priority(&self, i: usize) -> Option<f64> {
        self.priorities.as_ref().map(|p| p.raw[i])
    }

    /// Sampling probability of item `i` under the current priorities.
    pub fn probability(&self, i: usize) -> f64 {
        match &self.priorities {
            Some(p) => p.mass.get(i) / p.mass.total(),
            None => 1.0 / self.items.len() as f64,
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch: usize,
        beta: f64,
        rng: &mut R,
    ) -> Result<Sample, ReplayError> {
        match self.priorities {
            Some(_) => self.sample_prioritized(batch, beta, rng),
            None => self.sample_uniform(batch, rng),
        }
    }

    /// I.i.d. uniform draws with replacement; `batch` may exceed `len`.
    pub fn sample_uniform<R: Rng + ?Sized>(
        &self,
        batch: usize,
        rng: &mut R,
    ) -> Result<Sample, ReplayError> {
        if self.items.is_empty() {
            return Err(ReplayError::EmptyBuffer);
        }
        let indices = (0..batch)
            .map(|_| rng.random_range(0..self.items.len()))
            .collect();
        Ok(Sample {
            indices,
            weights: vec![1.0; batch],
        })
    }

    /// Stratified proportional sampling: the total mass is cut into `batch`
    /// equal segments and one point is drawn uniformly inside each. Weights
    /// are `(N * P(i))^-beta` divided by the batch maximum.
    pub fn sample_prioritized<R: Rng + ?Sized>(
        &self,
        batch: usize,
        beta: f64,
        rng: &mut R,
    ) -> Result<Sample, ReplayError> {
        let Some(p) = &self.priorities else {
            return self.sample_uniform(batch, rng);
        };
        if self.items.is_empty() {
            return Err(ReplayError::EmptyBuffer);
        }
        let total = p.mass.total();
        let segment = total / batch as f64;
        let n = self.items.len() as f64;
        let mut indices = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for k in 0..batch {
            let u: f64 = rng.random();
            let i = p
                .mass
                .find_prefix((k as f64 + u) * segment)
                .min(self.items.len() - 1);
            let prob = p.mass.get(i) / total;
            indices.push(i);
            weights.push((n * prob).powf(-beta));
        }
        let max_w = weights.iter().cloned().fold(0.0, f64::max);
        for w in &mut weights {
            *w /= max_w;
        }
        Ok(Sample { indices, weights })
    }

    /// Sets `p_i = |delta_i| + epsilon`. No-op for a uniform buffer.
    pub fn update_priorities(
        &mut self,
        indices: &[usize],
        td_errors: &[f64],
    ) -> Result<(), ReplayError> {
        if indices.len() != td_errors.len() {
            return Err(ReplayError::LengthMismatch {
                indices: indices.len(),
                errors: td_errors.len(),
            });
        }
        let len = self.items.len();
        if let Some(&index) = indices.iter().find(|&&i| i >= len) {
            return Err(ReplayError::IndexOutOfRange { index, len });
        }
        if let Some(p) = self.priorities.as_mut() {
            for (&i, &d) in indices.iter().zip(td_errors) {
                p.set(i, d.abs() + p.epsilon);
            }
        }
        Ok(())
    }

    /// Sum-tree nodes match their children and the root matches the leaves.
    pub fn tree_consistent(&self) -> bool {
        match &self.priorities {
            Some(p) => {
                p.mass.is_consistent(1e-9)
                    && p.raw.iter().zip(p.mass.leaves()).all(|(&r, &m)| {
                        (r.powf(p.alpha) - m).abs() <= 1e-12 * m.max(1.0) || r == 0.0
                    })
            }
            None => true,
        }
    }

    /// Plain-text report: size, tree check, and a priority histogram with
    /// `bins` equal-width buckets over `[min, max]` of the stored priorities.
    pub fn report(&self, bins: usize) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode: {:?}", self.mode());
        let _ = writeln!(out, "size: {} / {}", self.len(), self.capacity);
        let _ = writeln!(out, "tree consistent: {}", self.tree_consistent());
        let Some(p) = &self.priorities else {
            return out;
        };
        if self.items.is_empty() || bins == 0 {
            return out;
        }
        let live = &p.raw[..self.items.len()];
        let lo = live.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(out, "total mass: {:.6}", p.mass.total());
        let _ = writeln!(out, "priority range: [{lo:.6}, {hi:.6}]");
        let width = if hi > lo {
            (hi - lo) / bins as f64
        } else {
            1.0
        };
        let mut counts = vec![0usize; bins];
        for &r in live {
            let b = (((r - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let peak = counts.iter().copied().max().unwrap_or(1).max(1);
        for (b, c) in counts.iter().enumerate() {
            let start = lo + b as f64 * width;
            let bar = "#".repeat(c * 40 / peak);
            let _ = writeln!(
                out,
                "[{:>10.4}, {:>10.4}) {:>8} {}",
                start,
                start + width,
                c,
                bar
            );
        }
        out
    }
}

impl Priorities {
    fn set(&mut self, i: usize, priority: f64) {
        self.raw[i] = priority;
        self.max.set(i, priority);
        self.mass.set(i, priority.powf(self.alpha));
    }
}
