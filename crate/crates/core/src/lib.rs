//! Sampled, Top-k and exact KL / f-divergence estimators on categorical
//! policies, with enumeration oracles for their bias and gradient claims,
//! EMA-anchor lag dynamics, a synthetic bias-variance bench, and a small
//! EMA policy-gradient trainer.

pub mod audit;
pub mod bench;
pub mod categorical;
pub mod dynamics;
pub mod error;
pub mod estimators;
pub mod fdiv;
pub mod par;
pub mod rng;
pub mod tape;
pub mod trainer;

pub use categorical::{
    exact_divergence, exact_divergence_expr, exact_divergence_grad, log_softmax, sample, topk_indices, Divergence,
    LogitSlot, PolicyPair, ProbSlot, Sampler, TapeSlot, TopkIndexSet,
};
pub use error::{Error, Result, TapeError};
pub use estimators::{
    sampled_kl, sequence_kl_estimator, token_kl_sum, topk_forward_kl, topk_reverse_kl, ClipRange, EstimatorSample,
    EstimatorVariant, QSource, TailForm, TokenKlSpec,
};
pub use par::Execution;
pub use tape::{Gradient, Tape, Var};
