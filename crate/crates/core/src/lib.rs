//! Language-grounding workbench: an order-connector instruction language, a
//! GridWorld simulator with potential-based shaping, and a dueling double DQN
//! agent with gated-attention or concatenation fusion.

pub mod agent;
pub mod config;
pub mod env;
pub mod harness;
pub mod language;
pub mod oracle;
pub mod policy;
pub mod qnet;
pub mod replay;
pub mod sum_tree;
pub mod tabular;
