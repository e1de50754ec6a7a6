//! Contextual-bandit routing of queries across candidate language models.
//!
//! A two-branch network predicts the utility of every (query, model) pair
//! and whether exploration is worthwhile; a UCB rule over the network's last
//! hidden layer picks the model. [`harness`] replays a fully labelled
//! benchmark as an online stream where only the chosen model's outcome is
//! revealed.

pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod net;
pub mod policy;
pub mod replay;
pub mod reward;

pub use config::{DataSource, RunConfig};
pub use data::{Dataset, RoutingContext, Sample, SyntheticSpec};
pub use error::{Error, Result};
pub use harness::{
    run_protocol, PolicyKind, ProtocolConfig, RunOutput, RunSpec, Simulation, SliceMetrics,
    Warmstart,
};
pub use policy::{NeuralUcbAgent, UcbConfig};
pub use replay::ReplayRecord;
pub use reward::{utility_reward, RewardParams};
