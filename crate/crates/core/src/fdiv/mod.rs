//! f-divergences: generator catalog, sampled and Top-k estimators,
//! policy-gradient weights, regularized optimal policies, and the losses
//! obtained by plugging a reward-tilted target into the KL estimators.

mod estimate;
mod generator;
mod optimal;
mod pg;

pub use estimate::{pg_weight, sampled_fdiv, topk_fdiv, WeightDirection};
pub use generator::{all_generators, catalog, FGenerator, FName, DEFAULT_ALPHA};
pub use optimal::{inverse_reward_transform, optimal_policy, reward_transform, OptimalPolicySolution};
pub use pg::{group_partition, regularizer_score_grad, pg_loss_gradients, PgLoss};
