//! Optimal policies under f-divergence regularization and the reward
//! transformations that map one regularizer's optimum onto another's.
//!
//! The maximizer of `E_π[R] - β D_f(π || π_ref)` is
//! `π(y) = π_ref(y) · (f')⁻¹((R(y) - λ) / β)` with `λ` fixed by normalization.

use crate::categorical::ProbSlot;
use crate::error::{arg, Error, Result};

use super::{catalog, FGenerator, FName};

const MAX_DOUBLINGS: usize = 200;
const MAX_BISECTIONS: usize = 200;
const LAMBDA_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimalPolicySolution {
    pub lambda: f64,
    /// Normalized policy. Entries can be exactly zero when `f'(0+)` is finite.
    pub policy: Vec<f64>,
    /// `Σ π_ref (f')⁻¹((R - λ)/β) - 1` at the returned `λ`, before the final
    /// renormalization.
    pub residual: f64,
    pub iterations: usize,
}

impl OptimalPolicySolution {
    pub fn to_slot(&self) -> Result<ProbSlot> {
        ProbSlot::from_probs(&self.policy)
    }

    pub fn total_variation(&self, other: &[f64]) -> f64 {
        0.5 * self.policy.iter().zip(other).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

fn validate(rewards: &[f64], reference: &ProbSlot, beta: f64) -> Result<()> {
    if rewards.len() != reference.len() {
        return arg(format!(
            "{} rewards for a vocabulary of {}",
            rewards.len(),
            reference.len()
        ));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return arg(format!("beta must be positive, got {beta}"));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::Domain(format!("non-finite reward {r}")));
    }
    Ok(())
}

struct Residual<'a> {
    gen: &'a FGenerator,
    rewards: &'a [f64],
    reference: &'a ProbSlot,
    beta: f64,
}

impl Residual<'_> {
    fn ratio(&self, r: f64, lambda: f64) -> f64 {
        self.gen.f_prime_inv((r - lambda) / self.beta).unwrap_or(f64::NAN)
    }

    fn at(&self, lambda: f64) -> f64 {
        self.rewards
            .iter()
            .enumerate()
            .map(|(j, &r)| self.reference.prob(j) * self.ratio(r, lambda))
            .sum::<f64>()
            - 1.0
    }
}

/// Solve for `λ` by bracketed bisection on the nonincreasing residual.
pub fn optimal_policy(
    gen: &FGenerator,
    rewards: &[f64],
    reference: &ProbSlot,
    beta: f64,
) -> Result<OptimalPolicySolution> {
    validate(rewards, reference, beta)?;
    if !gen.has_inverse() {
        return Err(Error::Unsupported(format!(
            "{gen} has no invertible derivative; its optimal policy is not unique"
        )));
    }
    let max_r = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_r = rewards.iter().copied().fold(f64::INFINITY, f64::min);
    if max_r == min_r {
        return Ok(OptimalPolicySolution {
            lambda: max_r - beta * gen.f_prime(1.0),
            policy: reference.probs().to_vec(),
            residual: 0.0,
            iterations: 0,
        });
    }

    let res = Residual {
        gen,
        rewards,
        reference,
        beta,
    };
    let mut trace: Vec<(f64, f64)> = Vec::new();
    let mut eval = |lambda: f64| {
        let v = res.at(lambda);
        trace.push((lambda, v));
        v
    };

    let (_, f_prime_inf) = gen.f_prime_range();
    let (mut lo, mut hi);
    if f_prime_inf.is_finite() {
        // pole: the largest reward reaches f'(∞)
        let pole = max_r - beta * f_prime_inf;
        let mut offset = 1e-9 * (1.0 + pole.abs());
        let mut tries = 0;
        while !(eval(pole + offset) > 0.0) {
            offset *= 1e-3;
            tries += 1;
            if pole + offset <= pole || tries > MAX_DOUBLINGS {
                return Err(Error::Solver(format!("{gen}: no positive residual above the pole {pole}")));
            }
        }
        lo = pole + offset;
        let mut gap = beta;
        let mut doublings = 0;
        while eval(pole + gap) > 0.0 {
            gap *= 2.0;
            doublings += 1;
            if doublings > MAX_DOUBLINGS {
                return Err(Error::Solver(format!("{gen}: upper bracket not found")));
            }
        }
        hi = pole + gap;
    } else {
        let mut gap = beta;
        let mut doublings = 0;
        while !(eval(max_r - gap) > 0.0) {
            gap *= 2.0;
            doublings += 1;
            if doublings > MAX_DOUBLINGS {
                return Err(Error::Solver(format!("{gen}: lower bracket not found")));
            }
        }
        lo = max_r - gap;
        gap = beta;
        doublings = 0;
        while eval(max_r + gap) > 0.0 {
            gap *= 2.0;
            doublings += 1;
            if doublings > MAX_DOUBLINGS {
                return Err(Error::Solver(format!("{gen}: upper bracket not found")));
            }
        }
        hi = max_r + gap;
    }

    let mut iterations = 0;
    while hi - lo > LAMBDA_TOL && iterations < MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if eval(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }

    trace.sort_by(|a, b| a.0.total_cmp(&b.0));
    if trace.windows(2).any(|w| w[1].1 > w[0].1 + 1e-9 * (1.0 + w[0].1.abs())) {
        return Err(Error::Solver(format!("{gen}: normalization residual is not monotone in lambda")));
    }

    let lambda = 0.5 * (lo + hi);
    let raw: Vec<f64> = rewards
        .iter()
        .enumerate()
        .map(|(j, &r)| reference.prob(j) * res.ratio(r, lambda))
        .collect();
    let mass: f64 = raw.iter().sum();
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::Solver(format!("{gen}: degenerate policy mass {mass}")));
    }
    Ok(OptimalPolicySolution {
        lambda,
        policy: raw.iter().map(|p| p / mass).collect(),
        residual: mass - 1.0,
        iterations,
    })
}

/// Rewards `R̃` whose reverse-KL optimum equals the `gen` optimum under `R`:
/// `R̃ = β log(π*/π_ref)`.
pub fn reward_transform(gen: &FGenerator, rewards: &[f64], reference: &ProbSlot, beta: f64) -> Result<Vec<f64>> {
    let sol = optimal_policy(gen, rewards, reference, beta)?;
    sol.policy
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let t = p / reference.prob(j);
            if t > 0.0 && t.is_finite() {
                Ok(beta * t.ln())
            } else {
                Err(Error::Domain(format!(
                    "reward {} at index {j} lies outside the admissible range of {gen} (ratio {t})",
                    rewards[j]
                )))
            }
        })
        .collect()
}

/// Rewards under `gen` whose optimum equals the reverse-KL optimum under `R`:
/// `R_f = β f'(π*/π_ref)` with `λ = 0`.
pub fn inverse_reward_transform(
    gen: &FGenerator,
    rewards: &[f64],
    reference: &ProbSlot,
    beta: f64,
) -> Result<Vec<f64>> {
    if !gen.has_inverse() {
        return Err(Error::Unsupported(format!("{gen} has no invertible derivative")));
    }
    let rkl = catalog(FName::ReverseKl)?;
    let star = optimal_policy(&rkl, rewards, reference, beta)?;
    Ok(star
        .policy
        .iter()
        .enumerate()
        .map(|(j, &p)| beta * gen.f_prime(p / reference.prob(j)))
        .collect())
}
