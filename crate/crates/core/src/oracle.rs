//! Scripted agent that walks BFS shortest paths through the resolved plan.

use crate::agent::AgentError;
use crate::env::{bfs_path, Action, EnvState, FrameStack, GridLayout};
use crate::language::{Instruction, Referent};
use crate::policy::Policy;

/// Follows a shortest path to the current sub-goal that avoids every other
/// object. Falls back to the unconstrained shortest path when the detour is
/// impossible.
#[derive(Debug, Clone, Default)]
pub struct BfsOracle;

impl BfsOracle {
    pub fn next_action(layout: &GridLayout, state: &EnvState) -> Option<Action> {
        let goal = state.current_goal()?;
        let target = layout.object_cell(goal);
        let blocked: Vec<_> = Referent::ALL
            .iter()
            .filter(|&&r| r != goal)
            .map(|&r| layout.object_cell(r))
            .collect();
        let path = bfs_path(layout, state.agent, target, &blocked)
            .or_else(|| bfs_path(layout, state.agent, target, &[]))?;
        let next = *path.get(1)?;
        Action::ALL
            .into_iter()
            .find(|&a| layout.neighbor(state.agent, a) == next)
    }
}

impl Policy for BfsOracle {
    fn begin(&mut self, _: &Instruction) -> Result<(), AgentError> {
        Ok(())
    }

    fn act(
        &mut self,
        layout: &GridLayout,
        state: &EnvState,
        _: &FrameStack,
    ) -> Result<Action, AgentError> {
        Ok(Self::next_action(layout, state).unwrap_or(Action::Up))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Cell, RewardConfig};
    use crate::language::{enumerate_instructions, LanguageSubset};
    use crate::policy::evaluate_episodes;

    #[test]
    fn solves_every_comma_instruction() {
        let all = enumerate_instructions(LanguageSubset::Comma, 1, 6).unwrap();
        let eval = evaluate_episodes(
            &mut BfsOracle,
            &GridLayout::figure(),
            &RewardConfig::default(),
            &all,
            30,
        )
        .unwrap();
        assert_eq!(eval.success_rate(), 1.0);
    }

    #[test]
    fn detours_around_other_objects() {
        // red sits directly between the agent and blue
        let layout =
            GridLayout::new(5, 3, Cell(0, 1), [Cell(2, 1), Cell(4, 1), Cell(0, 0)]).unwrap();
        let i = Instruction::parse("go to the blue").unwrap();
        let eval =
            evaluate_episodes(&mut BfsOracle, &layout, &RewardConfig::default(), &[i], 30).unwrap();
        assert_eq!(eval.success_rate(), 1.0);
        assert_eq!(eval.episodes[0].steps, 6);
    }
}
