//! Policies that act in the GridWorld, and greedy evaluation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agent::AgentError;
use crate::env::{Action, EnvState, FrameStack, GridLayout, GridWorld, RewardConfig, Status};
use crate::language::{resolve_plan, Instruction};
use crate::qnet::{argmax, encode_instruction, forward_encoded, NetworkConfig, ParameterSet};

pub trait Policy {
    /// Called once before each episode.
    fn begin(&mut self, instruction: &Instruction) -> Result<(), AgentError>;
    fn act(
        &mut self,
        layout: &GridLayout,
        state: &EnvState,
        frames: &FrameStack,
    ) -> Result<Action, AgentError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub status: Status,
    pub steps: usize,
    /// Undiscounted sum of the rewards the agent received.
    pub total_return: f64,
    pub base_return: f64,
}

impl EpisodeStats {
    pub fn success(&self) -> bool {
        self.status == Status::Success
    }
}

/// The greedy policy of a Q-network.
pub struct GreedyPolicy<'a> {
    net: &'a NetworkConfig,
    params: &'a ParameterSet,
    instr: Vec<f64>,
}

impl<'a> GreedyPolicy<'a> {
    pub fn new(net: &'a NetworkConfig, params: &'a ParameterSet) -> Self {
        Self {
            net,
            params,
            instr: Vec::new(),
        }
    }
}

impl Policy for GreedyPolicy<'_> {
    fn begin(&mut self, instruction: &Instruction) -> Result<(), AgentError> {
        self.instr = encode_instruction(self.net, self.params, &instruction.token_ids())?;
        Ok(())
    }

    fn act(
        &mut self,
        layout: &GridLayout,
        _: &EnvState,
        frames: &FrameStack,
    ) -> Result<Action, AgentError> {
        let input = frames.to_input(layout.width(), layout.height());
        let q = forward_encoded(self.net, self.params, input, &self.instr)?.q;
        Ok(Action::from_index(argmax(&q)))
    }
}

pub fn max_steps_for(instruction: &Instruction, steps_per_subgoal: usize) -> usize {
    steps_per_subgoal * instruction.n_subgoals()
}

/// Runs one episode to termination with `policy`.
pub fn run_policy_episode(
    policy: &mut dyn Policy,
    env: &mut GridWorld,
    instruction: &Instruction,
    steps_per_subgoal: usize,
) -> Result<EpisodeStats, AgentError> {
    let plan = resolve_plan(instruction)?;
    env.reset(plan, max_steps_for(instruction, steps_per_subgoal))?;
    policy.begin(instruction)?;
    let mut stats = EpisodeStats {
        status: Status::Running,
        steps: 0,
        total_return: 0.0,
        base_return: 0.0,
    };
    loop {
        let (state, frames) = (env.state().expect("reset"), env.frames().expect("reset"));
        let action = policy.act(env.layout(), state, frames)?;
        let out = env.step(action)?;
        stats.steps += 1;
        stats.total_return += out.reward;
        stats.base_return += out.base_reward;
        if out.done {
            stats.status = out.status;
            return Ok(stats);
        }
    }
}

/// Fraction of `instructions` whose episode under `policy` ends in success.
pub fn evaluate_success_rate(
    policy: &mut dyn Policy,
    layout: &GridLayout,
    rewards: &RewardConfig,
    instructions: &[Instruction],
    steps_per_subgoal: usize,
) -> Result<f64, AgentError> {
    Ok(evaluate_episodes(policy, layout, rewards, instructions, steps_per_subgoal)?.success_rate())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub episodes: Vec<EpisodeStats>,
}

impl Evaluation {
    pub fn success_rate(&self) -> f64 {
        self.episodes.iter().filter(|e| e.success()).count() as f64 / self.episodes.len() as f64
    }

    pub fn mean_return(&self) -> f64 {
        self.episodes.iter().map(|e| e.total_return).sum::<f64>() / self.episodes.len() as f64
    }

    pub fn mean_steps(&self) -> f64 {
        self.episodes.iter().map(|e| e.steps as f64).sum::<f64>() / self.episodes.len() as f64
    }
}

pub fn evaluate_episodes(
    policy: &mut dyn Policy,
    layout: &GridLayout,
    rewards: &RewardConfig,
    instructions: &[Instruction],
    steps_per_subgoal: usize,
) -> Result<Evaluation, AgentError> {
    if instructions.is_empty() {
        return Err(AgentError::EmptyInstructionSet);
    }
    let mut env = GridWorld::new(layout.clone(), *rewards);
    let episodes = instructions
        .iter()
        .map(|i| run_policy_episode(policy, &mut env, i, steps_per_subgoal))
        .collect::<Result<_, _>>()?;
    Ok(Evaluation { episodes })
}

/// Token ids of an instruction, shared between the transitions of an episode.
pub fn shared_tokens(instruction: &Instruction) -> Arc<[usize]> {
    Arc::from(instruction.token_ids())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Always(Action);

    impl Policy for Always {
        fn begin(&mut self, _: &Instruction) -> Result<(), AgentError> {
            Ok(())
        }
        fn act(
            &mut self,
            _: &GridLayout,
            _: &EnvState,
            _: &FrameStack,
        ) -> Result<Action, AgentError> {
            Ok(self.0)
        }
    }

    #[test]
    fn idle_policy_solves_nothing() {
        // pushing into the left wall from (1,5) never reaches an object
        let layout = GridLayout::figure();
        let instrs: Vec<Instruction> = ["go to the red", "go to the blue , go to the green"]
            .iter()
            .map(|t| Instruction::parse(t).unwrap())
            .collect();
        let mut p = Always(Action::Left);
        let eval =
            evaluate_episodes(&mut p, &layout, &RewardConfig::default(), &instrs, 30).unwrap();
        assert_eq!(eval.success_rate(), 0.0);
        assert_eq!(eval.episodes[0].status, Status::Timeout);
        assert_eq!(eval.episodes[1].steps, 60);
    }

    #[test]
    fn empty_set_rejected() {
        let r = evaluate_success_rate(
            &mut Always(Action::Up),
            &GridLayout::figure(),
            &RewardConfig::default(),
            &[],
            30,
        );
        assert!(matches!(r, Err(AgentError::EmptyInstructionSet)));
    }

    #[test]
    fn walking_right_reaches_red() {
        let layout = GridLayout::figure();
        let red = Instruction::parse("go to the red").unwrap();
        let blue = Instruction::parse("go to the blue").unwrap();
        let mut p = Always(Action::Right);
        let eval =
            evaluate_episodes(&mut p, &layout, &RewardConfig::default(), &[red, blue], 30).unwrap();
        assert_eq!(eval.episodes[0].status, Status::Success);
        assert_eq!(eval.episodes[0].steps, 5);
        assert_eq!(eval.episodes[1].status, Status::Failure);
        assert!((eval.success_rate() - 0.5).abs() < 1e-15);
    }
}
