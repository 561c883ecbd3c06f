//! Desk-scale agentic RL: turn-level tree rollouts over a synthetic multi-hop
//! tool environment, turn-wise credit assignment, and clipped surrogate
//! objectives on a hashed n-gram softmax policy.

pub mod credit;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod objectives;
pub mod policy;
pub mod rollout_tree;
pub mod trainer;
pub mod vocab_env;

pub use credit::{assign_credit, AdvantageScheme, Aggregation, CreditConfig, CreditedTree};
pub use error::{Error, Result};
pub use gradcheck::{run_gradcheck, GradcheckOptions, ObjectiveCheck};
pub use metrics::{estimate_turn_kl, turn_entropy, TurnKl};
pub use objectives::{loss, ClipConfig, LengthNorm, LossReport, Objective, TrainRecord, Trajectory};
pub use policy::{greedy, sample, Gradient, PolicyParams, PolicySnapshot, TokenPolicy};
pub use rollout_tree::{NodeRecord, RolloutTree, TreeConfig, TreeNode};
pub use trainer::{derive_seed, PolicyShape, Seeds, StepReport, TrainConfig, Trainer};
pub use vocab_env::{
    EpisodeLimits, Environment, OptimalAgent, Source, Task, Token, TokenId, ToolCall, Vocab, World,
};
