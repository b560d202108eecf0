//! Policy-gradient losses obtained from the KL estimators.
//!
//! Each loss is a KL estimator evaluated against the reward-tilted target
//! `π*(y) = π_ref(y) exp R(y) / Z`, with `Z` estimated from the group itself:
//! `Ẑ = (1/N) Σ_i sg(π_ref(y_i) / π_θ(y_i)) exp R(y_i)`. The per-sample ratio
//! is then `w_i = π_ref(y_i) exp R(y_i) / (π_θ(y_i) sg(Ẑ))`.
//! Rewards are taken as already divided by `β`.

use std::fmt;

use crate::categorical::{PolicyPair, TapeSlot};
use crate::error::{arg, Result};
use crate::estimators::{kl_expr, EstimatorVariant};
use crate::tape::{Gradient, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgLoss {
    L1,
    L2,
    L3,
    L3PP,
    L4,
    L5,
}

impl PgLoss {
    pub const ALL: [PgLoss; 6] = [PgLoss::L1, PgLoss::L2, PgLoss::L3, PgLoss::L3PP, PgLoss::L4, PgLoss::L5];

    pub fn estimator(self) -> EstimatorVariant {
        match self {
            PgLoss::L1 => EstimatorVariant::K1,
            PgLoss::L2 => EstimatorVariant::K2,
            PgLoss::L3 => EstimatorVariant::K3,
            PgLoss::L3PP => EstimatorVariant::K3PP,
            PgLoss::L4 => EstimatorVariant::K4,
            PgLoss::L5 => EstimatorVariant::K5,
        }
    }
}

impl fmt::Display for PgLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PgLoss::L1 => "l1",
            PgLoss::L2 => "l2",
            PgLoss::L3 => "l3",
            PgLoss::L3PP => "l3pp",
            PgLoss::L4 => "l4",
            PgLoss::L5 => "l5",
        };
        f.write_str(s)
    }
}

fn check_group(group: &[usize], pair: &PolicyPair, rewards: &[f64]) -> Result<()> {
    if group.len() < 2 {
        return arg(format!("a group needs at least 2 rollouts, got {}", group.len()));
    }
    if rewards.len() != pair.vocab() {
        return arg("one reward per vocabulary entry is required");
    }
    if let Some(&y) = group.iter().find(|&&y| y >= pair.vocab()) {
        return arg(format!("rollout token {y} out of range"));
    }
    Ok(())
}

/// Group estimate `Ẑ` of the partition function.
pub fn group_partition(group: &[usize], pair: &PolicyPair, rewards: &[f64]) -> f64 {
    let (theta, reference) = (pair.theta(), pair.reference());
    group
        .iter()
        .map(|&y| (reference.log_prob(y) - theta.log_prob(y) + rewards[y]).exp())
        .sum::<f64>()
        / group.len() as f64
}

/// Gradient of `(1/N) Σ_i K(w_i)` with respect to theta's logits.
pub fn pg_loss_gradients(loss: PgLoss, group: &[usize], pair: &PolicyPair, rewards: &[f64]) -> Result<Gradient> {
    check_group(group, pair, rewards)?;
    let log_z = group_partition(group, pair, rewards).ln();
    let tape = Tape::new();
    let slot = TapeSlot::new(&tape, pair);
    let terms = group
        .iter()
        .map(|&y| {
            let lp = slot.log_prob(y);
            let lw = (pair.reference().log_prob(y) + rewards[y] - log_z) - lp;
            kl_expr(loss.estimator(), lw, lp - lp.sg())
        })
        .collect::<Result<Vec<_>>>()?;
    let total = tape.sum(&terms) * (1.0 / group.len() as f64);
    slot.grad(total)
}

/// `Σ_j ∇log π_θ(y_j) · KL̂` with `KL̂ = (1/N) Σ_i log(π_θ(y_i)/π_ref(y_i))`.
pub fn regularizer_score_grad(group: &[usize], pair: &PolicyPair) -> Result<Gradient> {
    if group.is_empty() {
        return arg("empty group");
    }
    let tape = Tape::new();
    let slot = TapeSlot::new(&tape, pair);
    let kl_hat = group
        .iter()
        .map(|&y| pair.theta().log_prob(y) - pair.reference().log_prob(y))
        .sum::<f64>()
        / group.len() as f64;
    let lps: Vec<_> = group.iter().map(|&y| slot.log_prob(y)).collect();
    slot.grad(tape.sum(&lps) * kl_hat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l4_equals_l2_per_group() {
        let pair = PolicyPair::from_logits(&[0.2, -0.4, 1.0, 0.3], &[0.0, 0.5, -0.2, 0.1]).unwrap();
        let rewards = [1.0, 0.0, 0.5, -0.3];
        for a in 0..4 {
            for b in 0..4 {
                let g2 = pg_loss_gradients(PgLoss::L2, &[a, b], &pair, &rewards).unwrap();
                let g4 = pg_loss_gradients(PgLoss::L4, &[a, b], &pair, &rewards).unwrap();
                assert!(g2.max_abs_diff(&g4) < 1e-12);
            }
        }
        assert!(pg_loss_gradients(PgLoss::L1, &[0], &pair, &rewards).is_err());
    }
}
