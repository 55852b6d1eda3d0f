#![allow(dead_code)]

use multigoal_core::agent::TrainConfig;
use multigoal_core::env::{Cell, GridLayout};
use multigoal_core::harness::ExperimentSpec;
use multigoal_core::language::LanguageSubset;
use multigoal_core::qnet::{Fusion, NetworkConfig};

/// A 7×7 layout that fits [`NetworkConfig::tiny`].
pub fn tiny_layout() -> GridLayout {
    GridLayout::new(7, 7, Cell(1, 3), [Cell(5, 3), Cell(3, 6), Cell(2, 0)]).unwrap()
}

/// A fast training setup: tiny network, small batches, short episodes.
pub fn tiny_config(fusion: Fusion) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.network = NetworkConfig::tiny(fusion);
    cfg.agent.batch_size = 8;
    cfg.agent.steps_per_subgoal = 10;
    cfg.agent.epsilon_decay_steps = 500;
    cfg
}

pub fn tiny_spec(subset: LanguageSubset) -> ExperimentSpec {
    ExperimentSpec {
        subsets: vec![subset],
        proportions: vec![0.5, 1.0],
        epochs: 2,
        train_max_subgoals: 2,
        total_max_subgoals: 3,
        ..ExperimentSpec::default()
    }
}
