//! Enumeration audits of the estimator, f-divergence and dynamics claims.
//!
//! Every check produces an [`AuditRow`] holding the observed error next to its
//! bound, so the same rows drive the CLI reports and the test suite.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::categorical::{PolicyPair, ProbSlot, TapeSlot, TopkIndexSet};
use crate::error::Result;
use crate::par::Execution;
use crate::rng::{self, purpose};
use crate::tape::{Gradient, Tape, Var};

mod bench;
mod dynamics;
mod estimators;
mod fdiv;

pub use bench::{bench_checks, HEADLINE_K, SLOPE_MIN_B};
pub use dynamics::{audit_dynamics, RegimeProbe, REGIME_HEADER};
pub use estimators::{audit_estimators, EstimatorClaim, CLAIMS_HEADER};
pub use fdiv::audit_fdiv;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    /// Passes when `observed <= bound`.
    AtMost,
    /// Passes when `observed > bound`.
    Above,
    /// Informational, always passes.
    Report,
}

impl Relation {
    pub fn tag(self) -> &'static str {
        match self {
            Relation::AtMost => "le",
            Relation::Above => "gt",
            Relation::Report => "info",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub suite: String,
    pub check: String,
    pub observed: f64,
    pub bound: f64,
    pub relation: Relation,
    pub pass: bool,
}

impl AuditRow {
    pub fn at_most(suite: &str, check: impl Into<String>, observed: f64, bound: f64) -> Self {
        AuditRow {
            suite: suite.into(),
            check: check.into(),
            observed,
            bound,
            relation: Relation::AtMost,
            pass: observed <= bound,
        }
    }

    pub fn above(suite: &str, check: impl Into<String>, observed: f64, bound: f64) -> Self {
        AuditRow {
            suite: suite.into(),
            check: check.into(),
            observed,
            bound,
            relation: Relation::Above,
            pass: observed > bound,
        }
    }

    pub fn report(suite: &str, check: impl Into<String>, observed: f64) -> Self {
        AuditRow {
            suite: suite.into(),
            check: check.into(),
            observed,
            bound: f64::NAN,
            relation: Relation::Report,
            pass: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
}

pub const AUDIT_HEADER: &str = "suite,check,observed,bound,relation,pass";

impl AuditReport {
    pub fn push(&mut self, row: AuditRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: AuditReport) {
        self.rows.extend(other.rows);
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> Vec<&AuditRow> {
        self.rows.iter().filter(|r| !r.pass).collect()
    }

    /// Rows of one suite.
    pub fn suite<'a>(&'a self, suite: &'a str) -> impl Iterator<Item = &'a AuditRow> + 'a {
        self.rows.iter().filter(move |r| r.suite == suite)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(AUDIT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{},{}",
                r.suite,
                r.check,
                r.observed,
                r.bound,
                r.relation.tag(),
                r.pass
            );
        }
        out
    }
}

/// Sizes and seeds shared by the audits.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditConfig {
    pub seed: u64,
    pub pairs: usize,
    pub vocab: usize,
    /// Random index sets per pair in the Top-k audit.
    pub arbitrary_sets: usize,
    pub topk_k: usize,
    pub variance_pairs: usize,
    pub variance_vocab: usize,
    pub variance_k: usize,
    /// Relative slack allowed on the variance orderings.
    pub variance_slack: f64,
    pub sequence_instances: usize,
    pub alpha: f64,
    pub optimal_vocab: usize,
    pub optimal_instances: usize,
    pub beta: f64,
    pub pg_vocab: usize,
    pub pg_instances: usize,
    pub dynamics_instances: usize,
    pub max_dim: usize,
    pub horizon: usize,
    pub steady_instances: usize,
    pub grid_points: usize,
    pub exec: Execution,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            seed: 0,
            pairs: 100,
            vocab: 8,
            arbitrary_sets: 20,
            topk_k: 3,
            variance_pairs: 100,
            variance_vocab: 32,
            variance_k: 8,
            variance_slack: 0.05,
            sequence_instances: 20,
            alpha: crate::fdiv::DEFAULT_ALPHA,
            optimal_vocab: 5,
            optimal_instances: 20,
            beta: 1.0,
            pg_vocab: 4,
            pg_instances: 20,
            dynamics_instances: 50,
            max_dim: 64,
            horizon: 1000,
            steady_instances: 1000,
            grid_points: 5,
            exec: Execution::Parallel,
        }
    }
}

pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Pair `index` of an audit: theta and reference logits are standard normal.
pub(crate) fn random_pair(seed: u64, index: usize, v: usize) -> Result<PolicyPair> {
    let mut r = rng::stream(seed, index as u64, purpose::PAIR);
    let theta = gaussian(&mut r, v);
    let reference = gaussian(&mut r, v);
    PolicyPair::from_logits(&theta, &reference)
}

/// Same pair with a third, distinct sampling policy attached.
pub(crate) fn random_off_policy_pair(seed: u64, index: usize, v: usize) -> Result<PolicyPair> {
    let mut r = rng::stream(seed, index as u64, purpose::SAMPLING);
    let sampling = ProbSlot::from_logits(&gaussian(&mut r, v))?;
    random_pair(seed, index, v)?.with_sampling(sampling)
}

/// Index set of random size with random members.
pub(crate) fn random_index_set<R: Rng + ?Sized>(rng: &mut R, v: usize) -> Result<TopkIndexSet> {
    let k = rng.random_range(0..=v);
    let mut all: Vec<usize> = (0..v).collect();
    all.shuffle(rng);
    all.truncate(k);
    TopkIndexSet::from_indices(all, v)
}

/// `Σ_p weights[p] · (value, gradient)` of the expression built for token `p`.
pub(crate) fn enumerate<F>(pair: &PolicyPair, weights: &[f64], build: F) -> Result<(f64, Gradient)>
where
    F: for<'t> Fn(&TapeSlot<'t, '_>, usize) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let slot = TapeSlot::new(&tape, pair);
    let mut value = 0.0;
    let mut grad = Gradient::zeros(pair.vocab());
    for (p, &w) in weights.iter().enumerate() {
        let e = build(&slot, p)?;
        value += w * e.value();
        grad.add_scaled(w, &slot.grad(e)?);
    }
    Ok((value, grad))
}

/// Per-sample variance of value and of the gradient (trace of its covariance).
pub(crate) fn enumerate_variance<F>(pair: &PolicyPair, weights: &[f64], build: F) -> Result<(f64, f64)>
where
    F: for<'t> Fn(&TapeSlot<'t, '_>, usize) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let slot = TapeSlot::new(&tape, pair);
    let (mut m1, mut m2, mut g2) = (0.0, 0.0, 0.0);
    let mut g1 = Gradient::zeros(pair.vocab());
    for (p, &w) in weights.iter().enumerate() {
        let e = build(&slot, p)?;
        let g = slot.grad(e)?;
        m1 += w * e.value();
        m2 += w * e.value() * e.value();
        g2 += w * g.norm().powi(2);
        g1.add_scaled(w, &g);
    }
    Ok((m2 - m1 * m1, g2 - g1.norm().powi(2)))
}

/// Largest value of `f(i)` over `0..n`, with errors and NaNs propagated.
pub(crate) fn max_over<F>(n: usize, exec: Execution, f: F) -> Result<f64>
where
    F: Fn(usize) -> Result<f64> + Sync + Send,
{
    let mut worst: f64 = 0.0;
    for x in crate::par::map_indexed(n, exec, f) {
        let x = x?;
        worst = if x.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(x) };
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows() {
        assert!(AuditRow::at_most("s", "c", 1e-10, 1e-9).pass);
        assert!(!AuditRow::at_most("s", "c", f64::NAN, 1e-9).pass);
        assert!(!AuditRow::above("s", "c", 1e-4, 1e-3).pass);
        let mut rep = AuditReport::default();
        rep.push(AuditRow::report("s", "n", 3.0));
        rep.push(AuditRow::at_most("s", "bad", 2.0, 1.0));
        assert!(!rep.passed());
        assert_eq!(rep.failures().len(), 1);
        assert!(rep.to_csv().starts_with(AUDIT_HEADER));
    }

    #[test]
    fn max_over_keeps_nan() {
        let m = max_over(3, Execution::Sequential, |i| Ok(if i == 1 { f64::NAN } else { 1.0 })).unwrap();
        assert!(m.is_nan());
    }
}
