//! Single-actor DQN training: epsilon-greedy acting, post-episode replay
//! updates, and a hard target sync after every full pass over the training
//! instructions.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    bfs_distance, Action, EnvError, EnvState, GridLayout, GridWorld, RewardConfig, Status,
};
use crate::language::{resolve_plan, Instruction, LanguageError};
use crate::policy::{evaluate_episodes, max_steps_for, shared_tokens, EpisodeStats, GreedyPolicy};
use crate::qnet::{
    argmax, encode_instruction, forward_encoded, td_loss_and_grad_cached, Adam, AdamConfig,
    NetworkConfig, ParameterSet, QNetError, TargetEncodings, TdSample,
};
use crate::replay::{PerConfig, ReplayBuffer, ReplayError, ReplayMode, Transition};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Language(#[from] LanguageError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    QNet(#[from] QNetError),
    #[error("instruction set is empty")]
    EmptyInstructionSet,
    #[error("epoch budget must be at least 1")]
    ZeroBudget,
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Environment steps over which epsilon decays linearly.
    pub epsilon_decay_steps: u64,
    /// Gradient updates after each episode; `None` means one per step taken.
    pub updates_per_episode: Option<usize>,
    pub batch_size: usize,
    pub replay: ReplayMode,
    pub double_q: bool,
    /// Bootstrap through timeouts instead of treating them as terminal.
    pub bootstrap_on_timeout: bool,
    pub steps_per_subgoal: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 100_000,
            updates_per_episode: None,
            batch_size: 32,
            replay: ReplayMode::Prioritized,
            double_q: true,
            bootstrap_on_timeout: true,
            steps_per_subgoal: crate::env::DEFAULT_STEPS_PER_SUBGOAL,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn epsilon_at(&self, env_steps: u64) -> f64 {
        if self.epsilon_decay_steps == 0 {
            return self.epsilon_end;
        }
        let frac = (env_steps as f64 / self.epsilon_decay_steps as f64).min(1.0);
        (self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)).clamp(0.0, 1.0)
    }
}

/// Everything a training run depends on besides the instruction list.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub agent: AgentConfig,
    pub per: PerConfig,
    pub optimizer: AdamConfig,
    /// Also supplies the discount used in TD targets.
    pub rewards: RewardConfig,
}

impl TrainConfig {
    pub fn validate(&self, layout: &GridLayout) -> Result<(), AgentError> {
        self.network.validate()?;
        let a = &self.agent;
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&a.epsilon_start) || !(0.0..=1.0).contains(&a.epsilon_end) {
            return bad("epsilon must lie in [0, 1]");
        }
        if a.batch_size == 0 || a.steps_per_subgoal == 0 || self.per.capacity == 0 {
            return bad("batch size, steps per sub-goal and replay capacity must be positive");
        }
        if !(self.rewards.gamma > 0.0 && self.rewards.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.rewards.potential_scale > 0.0) {
            return bad("potential scale must be positive");
        }
        if self.per.alpha < 0.0 || self.per.epsilon_priority <= 0.0 {
            return bad("PER alpha must be non-negative and its priority epsilon positive");
        }
        if (layout.width(), layout.height()) != (self.network.grid_width, self.network.grid_height)
        {
            return bad("network grid size does not match the layout");
        }
        Ok(())
    }
}

/// Epsilon-greedy action: uniform with probability `epsilon`, otherwise the
/// argmax with ties broken toward the lowest index.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> Action {
    debug_assert!((0.0..=1.0).contains(&epsilon));
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        Action::from_index(rng.random_range(0..Action::COUNT))
    } else {
        Action::from_index(argmax(q))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncEvent {
    pub epoch: u64,
    pub env_steps: u64,
    pub updates: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InstructionStats {
    pub episodes: u64,
    pub successes: u64,
    pub last_status: Option<Status>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainEpisode {
    pub stats: EpisodeStats,
    pub updates: usize,
    pub mean_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Greedy success rate on the training instructions after the epoch.
    pub train_success_rate: f64,
    pub mean_return: f64,
    pub mean_steps: f64,
    pub epsilon: f64,
    pub env_steps: u64,
    pub updates: u64,
    pub mean_loss: Option<f64>,
    pub wall_time: f64,
}

/// Learner state.
pub struct Trainer {
    cfg: TrainConfig,
    env: GridWorld,
    pub online: ParameterSet,
    target: ParameterSet,
    target_cache: TargetEncodings,
    optimizer: Adam,
    pub replay: ReplayBuffer,
    rng: ChaCha8Rng,
    pub env_steps: u64,
    pub epochs: u64,
    pub updates: u64,
    pub sync_log: Vec<SyncEvent>,
    /// Per-instruction counts, keyed by instruction text.
    pub instruction_stats: std::collections::BTreeMap<String, InstructionStats>,
    /// Whether `wall_time` in epoch records holds elapsed seconds or zero.
    pub record_wall_time: bool,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, layout: GridLayout) -> Result<Self, AgentError> {
        cfg.validate(&layout)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.agent.seed);
        let online = ParameterSet::init(&cfg.network, &mut init_rng);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.agent.seed);
        rng.set_stream(1);
        Ok(Self {
            env: GridWorld::new(layout, cfg.rewards),
            target: online.clone(),
            target_cache: TargetEncodings::default(),
            optimizer: Adam::new(cfg.optimizer, &online),
            online,
            replay: ReplayBuffer::new(cfg.agent.replay, &cfg.per),
            rng,
            env_steps: 0,
            epochs: 0,
            updates: 0,
            sync_log: Vec::new(),
            instruction_stats: Default::default(),
            record_wall_time: true,
            started: Instant::now(),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &GridLayout {
        self.env.layout()
    }

    pub fn epsilon(&self) -> f64 {
        self.cfg.agent.epsilon_at(self.env_steps)
    }

    /// One epsilon-greedy episode, followed by the configured number of
    /// replay updates.
    pub fn run_episode(&mut self, instruction: &Instruction) -> Result<TrainEpisode, AgentError> {
        let net = self.cfg.network;
        let (w, h) = (net.grid_width, net.grid_height);
        let plan = resolve_plan(instruction)?;
        let tokens = shared_tokens(instruction);
        let instr = encode_instruction(&net, &self.online, &tokens)?;
        self.env.reset(
            plan,
            max_steps_for(instruction, self.cfg.agent.steps_per_subgoal),
        )?;
        let mut stats = EpisodeStats {
            status: Status::Running,
            steps: 0,
            total_return: 0.0,
            base_return: 0.0,
        };
        loop {
            let state = self.env.state().expect("reset").clone();
            let frames = *self.env.frames().expect("reset");
            let q = forward_encoded(&net, &self.online, frames.to_input(w, h), &instr)?.q;
            let action = select_action(&q, self.epsilon(), &mut self.rng);
            let out = self.env.step(action)?;
            self.env_steps += 1;
            stats.steps += 1;
            stats.total_return += out.reward;
            stats.base_return += out.base_reward;
            let truncated = out.status == Status::Timeout && self.cfg.agent.bootstrap_on_timeout;
            let reward = if truncated {
                self.truncated_reward(&state, self.env.state().expect("stepped"), out.base_reward)
            } else {
                out.reward
            };
            self.replay.push(Transition {
                frames,
                tokens: tokens.clone(),
                action: action.index(),
                reward,
                next_frames: *self.env.frames().expect("stepped"),
                done: out.done && !truncated,
            });
            if out.done {
                stats.status = out.status;
                break;
            }
        }
        let entry = self
            .instruction_stats
            .entry(instruction.text())
            .or_default();
        entry.episodes += 1;
        entry.successes += u64::from(stats.success());
        entry.last_status = Some(stats.status);

        let n_updates = self.cfg.agent.updates_per_episode.unwrap_or(stats.steps);
        let mut losses = Vec::new();
        if self.replay.len() >= self.cfg.agent.batch_size {
            for _ in 0..n_updates {
                losses.push(self.update()?);
            }
        }
        let mean_loss =
            (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        Ok(TrainEpisode {
            stats,
            updates: losses.len(),
            mean_loss,
        })
    }

    /// Shaped reward of a timed-out step with the potential of the next state
    /// taken as if the episode were still running.
    fn truncated_reward(&self, prev: &EnvState, next: &EnvState, base: f64) -> f64 {
        let rewards = self.env.rewards();
        if !rewards.shaping {
            return base;
        }
        let layout = self.env.layout();
        let phi = |s: &EnvState| match s.current_goal() {
            Some(g) => {
                -rewards.potential_scale
                    * bfs_distance(layout, s.agent, layout.object_cell(g)) as f64
            }
            None => 0.0,
        };
        base + rewards.gamma * phi(next) - phi(prev)
    }

    /// One gradient step on a replay batch. Returns the loss.
    pub fn update(&mut self) -> Result<f64, AgentError> {
        let net = self.cfg.network;
        let (w, h) = (net.grid_width, net.grid_height);
        let beta = self.cfg.per.beta_at(self.env_steps as usize);
        let sample = self
            .replay
            .sample(self.cfg.agent.batch_size, beta, &mut self.rng)?;
        let batch: Vec<TdSample> = sample
            .indices
            .iter()
            .map(|&i| {
                let t = self.replay.get(i);
                TdSample {
                    state: t.frames.to_input(w, h),
                    next_state: t.next_frames.to_input(w, h),
                    tokens: t.tokens.clone(),
                    action: t.action,
                    reward: t.reward,
                    done: t.done,
                }
            })
            .collect();
        let gamma = self.cfg.rewards.gamma;
        let (out, grads) = td_loss_and_grad_cached(
            &net,
            &self.online,
            &self.target,
            &batch,
            gamma,
            self.cfg.agent.double_q,
            &sample.weights,
            &mut self.target_cache,
        )?;
        self.optimizer.step(&mut self.online, &grads)?;
        if self.replay.mode() == ReplayMode::Prioritized {
            self.replay
                .update_priorities(&sample.indices, &out.td_errors)?;
        }
        self.updates += 1;
        Ok(out.loss)
    }

    /// One episode per instruction in the given order, then a single hard
    /// copy of the online parameters into the target network.
    pub fn train_epoch(
        &mut self,
        instructions: &[Instruction],
    ) -> Result<Vec<TrainEpisode>, AgentError> {
        if instructions.is_empty() {
            return Err(AgentError::EmptyInstructionSet);
        }
        let episodes = instructions
            .iter()
            .map(|i| self.run_episode(i))
            .collect::<Result<Vec<_>, _>>()?;
        self.sync_target();
        self.epochs += 1;
        Ok(episodes)
    }

    pub fn target(&self) -> &ParameterSet {
        &self.target
    }

    fn sync_target(&mut self) {
        self.target.clone_from(&self.online);
        self.target_cache.clear();
        self.sync_log.push(SyncEvent {
            epoch: self.epochs,
            env_steps: self.env_steps,
            updates: self.updates,
        });
    }

    pub fn greedy_policy(&self) -> GreedyPolicy<'_> {
        GreedyPolicy::new(&self.cfg.network, &self.online)
    }

    pub fn evaluate(
        &self,
        instructions: &[Instruction],
    ) -> Result<crate::policy::Evaluation, AgentError> {
        let mut policy = self.greedy_policy();
        evaluate_episodes(
            &mut policy,
            self.layout(),
            &self.cfg.rewards,
            instructions,
            self.cfg.agent.steps_per_subgoal,
        )
    }

    /// Trains for `budget` epochs and returns one record per epoch.
    pub fn train(
        &mut self,
        instructions: &[Instruction],
        budget: u64,
    ) -> Result<Vec<EpochRecord>, AgentError> {
        self.train_with(instructions, budget, |_, _| true)
    }

    /// Like [`Trainer::train`], calling `on_epoch` after every epoch; training
    /// stops early when it returns `false`.
    pub fn train_with<F>(
        &mut self,
        instructions: &[Instruction],
        budget: u64,
        mut on_epoch: F,
    ) -> Result<Vec<EpochRecord>, AgentError>
    where
        F: FnMut(&Trainer, &EpochRecord) -> bool,
    {
        if budget == 0 {
            return Err(AgentError::ZeroBudget);
        }
        let mut curve = Vec::new();
        for _ in 0..budget {
            let episodes = self.train_epoch(instructions)?;
            let eval = self.evaluate(instructions)?;
            let losses: Vec<f64> = episodes.iter().filter_map(|e| e.mean_loss).collect();
            let record = EpochRecord {
                epoch: self.epochs,
                train_success_rate: eval.success_rate(),
                mean_return: episodes.iter().map(|e| e.stats.total_return).sum::<f64>()
                    / episodes.len() as f64,
                mean_steps: episodes.iter().map(|e| e.stats.steps as f64).sum::<f64>()
                    / episodes.len() as f64,
                epsilon: self.epsilon(),
                env_steps: self.env_steps,
                updates: self.updates,
                mean_loss: (!losses.is_empty())
                    .then(|| losses.iter().sum::<f64>() / losses.len() as f64),
                wall_time: if self.record_wall_time {
                    self.started.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            };
            let keep_going = on_epoch(self, &record);
            curve.push(record);
            if !keep_going {
                break;
            }
        }
        Ok(curve)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::Fusion;

    fn small_config(fusion: Fusion, replay: ReplayMode) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.network = NetworkConfig {
            grid_width: 10,
            grid_height: 10,
            ..NetworkConfig::tiny(fusion)
        };
        cfg.agent.replay = replay;
        cfg.agent.batch_size = 8;
        cfg.agent.updates_per_episode = Some(3);
        cfg.agent.steps_per_subgoal = 10;
        cfg.per.capacity = 512;
        cfg
    }

    fn instrs(texts: &[&str]) -> Vec<Instruction> {
        texts
            .iter()
            .map(|t| Instruction::parse(t).unwrap())
            .collect()
    }

    #[test]
    fn greedy_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            select_action(&[0.0, 1.0, 2.0, 1.0], 0.0, &mut rng),
            Action::from_index(2)
        );
        assert_eq!(
            select_action(&[1.0, 1.0, 0.0, 0.0], 0.0, &mut rng),
            Action::from_index(0)
        );
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[select_action(&[5.0, 0.0, 0.0, 0.0], 1.0, &mut rng).index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn epsilon_schedule() {
        let a = AgentConfig {
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_decay_steps: 100,
            ..Default::default()
        };
        assert_eq!(a.epsilon_at(0), 1.0);
        assert!((a.epsilon_at(50) - 0.55).abs() < 1e-12);
        assert!((a.epsilon_at(1000) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn episode_pushes_one_transition_per_step() {
        let mut t = Trainer::new(
            small_config(Fusion::GatedAttention, ReplayMode::Prioritized),
            GridLayout::figure(),
        )
        .unwrap();
        let ep = t
            .run_episode(&Instruction::parse("go to the green").unwrap())
            .unwrap();
        assert!(ep.stats.status.is_terminal());
        assert_eq!(t.replay.len(), ep.stats.steps);
        assert_eq!(t.env_steps as usize, ep.stats.steps);
        assert!(t.replay.get(ep.stats.steps - 1).done || ep.stats.status == Status::Timeout);
        if ep.stats.steps < 8 {
            assert_eq!(ep.updates, 0);
            for i in 0..t.replay.len() {
                assert_eq!(t.replay.priority(i), Some(1.0));
            }
        }
    }

    #[test]
    fn target_syncs_once_per_pass() {
        let list = instrs(&[
            "go to the red",
            "go to the blue",
            "go to the green , go to the red",
        ]);
        let mut t = Trainer::new(
            small_config(Fusion::Concatenation, ReplayMode::Uniform),
            GridLayout::figure(),
        )
        .unwrap();
        let before = t.target().clone();
        for (k, i) in list.iter().enumerate() {
            t.run_episode(i).unwrap();
            assert!(
                t.target().bitwise_eq(&before),
                "target moved mid-epoch at episode {k}"
            );
        }
        let mut t = Trainer::new(
            small_config(Fusion::Concatenation, ReplayMode::Uniform),
            GridLayout::figure(),
        )
        .unwrap();
        for _ in 0..3 {
            t.train_epoch(&list).unwrap();
            assert!(t.target().bitwise_eq(&t.online));
        }
        assert!(t.updates > 0);
        assert_eq!(t.sync_log.len(), 3);
        assert_eq!(
            t.sync_log.iter().map(|s| s.epoch).collect::<Vec<_>>(),
            [0, 1, 2]
        );
        let mut short = Trainer::new(
            small_config(Fusion::Concatenation, ReplayMode::Uniform),
            GridLayout::figure(),
        )
        .unwrap();
        for _ in 0..3 {
            short.train_epoch(&list[..1]).unwrap();
        }
        assert_eq!(short.sync_log.len(), 3);
    }

    #[test]
    fn training_is_reproducible() {
        let list = instrs(&["go to the red", "go to the blue , go to the green"]);
        let run = || {
            let mut t = Trainer::new(
                small_config(Fusion::GatedAttention, ReplayMode::Prioritized),
                GridLayout::figure(),
            )
            .unwrap();
            t.record_wall_time = false;
            let curve = t.train(&list, 3).unwrap();
            (curve, t.online)
        };
        let (c1, p1) = run();
        let (c2, p2) = run();
        assert_eq!(c1, c2);
        assert_eq!(c1.len(), 3);
        assert!(p1.bitwise_eq(&p2));
        assert!(c1
            .iter()
            .all(|r| (0.0..=1.0).contains(&r.train_success_rate)));
    }

    #[test]
    fn zero_budget_and_empty_list_rejected() {
        let mut t = Trainer::new(
            small_config(Fusion::GatedAttention, ReplayMode::Uniform),
            GridLayout::figure(),
        )
        .unwrap();
        assert!(matches!(
            t.train(&instrs(&["go to the red"]), 0),
            Err(AgentError::ZeroBudget)
        ));
        assert!(matches!(
            t.train_epoch(&[]),
            Err(AgentError::EmptyInstructionSet)
        ));
    }

    #[test]
    fn grid_mismatch_rejected() {
        let cfg = TrainConfig {
            network: NetworkConfig::tiny(Fusion::GatedAttention),
            ..Default::default()
        };
        assert!(matches!(
            Trainer::new(cfg, GridLayout::figure()),
            Err(AgentError::InvalidConfig(_))
        ));
    }
}
