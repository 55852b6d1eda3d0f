//! Exact value iteration over the running states of a GridWorld episode.
//!
//! States are `(agent cell, plan progress)`; the step budget is ignored so the
//! problem is a stationary discounted MDP. Used to compare the greedy policies
//! of the shaped and unshaped reward functions.

use std::collections::HashMap;

use crate::env::{
    potential, shaped_reward, transition, Action, Cell, EnvState, GridLayout, RewardConfig, Status,
};
use crate::language::ExecutionPlan;

#[derive(Debug, Clone)]
pub struct QTable {
    pub states: Vec<(Cell, usize)>,
    pub q: Vec<[f64; Action::COUNT]>,
    pub sweeps: usize,
}

impl QTable {
    /// Actions within `tol` of the best value in state `i`.
    pub fn greedy_set(&self, i: usize, tol: f64) -> Vec<Action> {
        let best = self.q[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Action::ALL
            .into_iter()
            .filter(|a| self.q[i][a.index()] >= best - tol)
            .collect()
    }
}

fn running_states(layout: &GridLayout, plan: &ExecutionPlan) -> Vec<(Cell, usize)> {
    let mut out = Vec::new();
    for k in 0..plan.len() {
        for c in layout.cells() {
            let ok = match layout.object_at(c) {
                None => true,
                Some(obj) => k > 0 && plan.order()[k - 1] == obj,
            };
            if ok {
                out.push((c, k));
            }
        }
    }
    out
}

pub fn value_iteration(
    layout: &GridLayout,
    plan: &ExecutionPlan,
    rewards: &RewardConfig,
    tol: f64,
    max_sweeps: usize,
) -> QTable {
    let states = running_states(layout, plan);
    let index: HashMap<(Cell, usize), usize> =
        states.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let make = |&(agent, progress): &(Cell, usize)| EnvState {
        agent,
        plan: plan.clone(),
        progress,
        steps: 0,
        max_steps: usize::MAX,
        status: Status::Running,
    };
    // (reward, successor index or None when terminal) per state and action
    let model: Vec<[(f64, Option<usize>); Action::COUNT]> = states
        .iter()
        .map(|s| {
            let state = make(s);
            Action::ALL.map(|a| {
                let (next, base) = transition(layout, &state, a, rewards).expect("running state");
                let r = if rewards.shaping {
                    shaped_reward(
                        base,
                        rewards.potential_scale * potential(layout, &state),
                        rewards.potential_scale * potential(layout, &next),
                        rewards.gamma,
                    )
                } else {
                    base
                };
                let succ =
                    (!next.status.is_terminal()).then(|| index[&(next.agent, next.progress)]);
                (r, succ)
            })
        })
        .collect();

    let mut v = vec![0.0; states.len()];
    let mut q = vec![[0.0; Action::COUNT]; states.len()];
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut delta: f64 = 0.0;
        for (i, row) in model.iter().enumerate() {
            for (a, &(r, succ)) in row.iter().enumerate() {
                q[i][a] = r + rewards.gamma * succ.map_or(0.0, |j| v[j]);
            }
            let best = q[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - v[i]).abs());
            v[i] = best;
        }
        if delta < tol {
            break;
        }
    }
    QTable { states, q, sweeps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::Referent;

    #[test]
    fn unshaped_values_are_discounted_distances() {
        let layout =
            GridLayout::new(5, 5, Cell(0, 0), [Cell(4, 4), Cell(2, 0), Cell(0, 3)]).unwrap();
        let plan = ExecutionPlan::new(vec![Referent::Red]);
        let rewards = RewardConfig {
            shaping: false,
            gamma: 0.9,
            ..Default::default()
        };
        let t = value_iteration(&layout, &plan, &rewards, 1e-14, 10_000);
        let i = t.states.iter().position(|s| *s == (Cell(3, 4), 0)).unwrap();
        let best = t.q[i].iter().cloned().fold(f64::MIN, f64::max);
        assert!((best - 1.0).abs() < 1e-12);
        assert_eq!(t.greedy_set(i, 1e-9), vec![Action::Right]);
    }
}
