//! Robust reinforcement learning against observation attacks, at desk scale.
//!
//! An observation attacker shows the agent a perturbed state from a bounded
//! neighbourhood (an ℓ∞ ball around continuous observations, an explicit set
//! B(s) for tabular ones) while the environment itself keeps running on the
//! true state. This crate provides the machinery to measure and train
//! against the *worst case* of that threat model:
//!
//! - [`mdp`]: finite MDPs, built-in environments, and the tabular
//!   perturbation model.
//! - [`tabular`]: exact worst-attack values via a pessimistic Bellman fixed
//!   point, plus a brute-force attacker-enumeration oracle.
//! - [`net`]: small dense networks with hand-rolled reverse-mode gradients
//!   and Adam, checkpointable as plain text.
//! - [`bounds`]: interval bound propagation and admissible-action sets —
//!   what an attacker could make the policy do.
//! - [`losses`]: the worst-case-aware training losses (critic regression,
//!   policy pessimism, smoothness regularization) with exact gradients.
//! - [`env`]: the environment trait plus tabular and point-mass instances.
//! - [`agents`]: DQN and PPO training loops, each with a worst-case-aware
//!   variant.
//! - [`attacks`]: evaluation-time attacks and the rollout harness.
//! - [`harness`]: config parsing, experiment orchestration, persistence.

pub mod agents;
pub mod attacks;
pub mod bounds;
pub mod env;
pub mod error;
pub mod harness;
pub mod losses;
pub mod mdp;
pub mod net;
pub mod rng;
pub mod tabular;

pub use agents::{DqnConfig, DqnOutput, MetricsRecord, PpoConfig, PpoOutput, Schedules};
pub use attacks::{Actor, AttackKind, AttackSpec, EvalReport};
pub use harness::{Algo, RunConfig, RunSummary, TableFormat};
pub use env::{Action, ActionSpace, Env};
pub use error::CoreError;
pub use losses::{Batch, LossWeights, Transition};
pub use mdp::{DeterministicPolicy, TabularMDP, TabularPerturbation};
pub use net::{GradVector, NetSpec, ParamVector};
pub use tabular::{AttackerMap, QTable, ValueTable};

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, CoreError>;
