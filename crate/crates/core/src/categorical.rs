//! Categorical policies over one vocabulary slot.
//!
//! Probabilities are kept alongside log-probabilities; every ratio the
//! estimators need is formed as `exp(log a - log b)`.

use rand::Rng;

use crate::error::{arg, Error, Result};
use crate::fdiv::{FGenerator, FName};
use crate::tape::{Gradient, Tape, Var};

/// Raw logits of one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitSlot(Vec<f64>);

impl LogitSlot {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return arg(format!("a slot needs at least 2 entries, got {}", logits.len()));
        }
        if let Some(bad) = logits.iter().find(|z| !z.is_finite()) {
            return Err(Error::Domain(format!("non-finite logit {bad}")));
        }
        Ok(LogitSlot(logits))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Normalized distribution over a slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbSlot {
    log_probs: Vec<f64>,
    probs: Vec<f64>,
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-shifted log-softmax.
pub fn log_softmax(slot: &LogitSlot) -> Result<ProbSlot> {
    let z = slot.as_slice();
    let lse = log_sum_exp(z);
    let log_probs: Vec<f64> = z.iter().map(|v| v - lse).collect();
    ProbSlot::from_log_probs_unchecked(log_probs)
}

impl ProbSlot {
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        log_softmax(&LogitSlot::new(logits.to_vec())?)
    }

    /// From explicit probabilities, which must be positive and sum to 1.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.len() < 2 {
            return arg("a slot needs at least 2 entries");
        }
        if let Some(bad) = probs.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
            return Err(Error::Domain(format!("probability {bad} is not strictly positive")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("probabilities sum to {total}")));
        }
        Ok(ProbSlot {
            log_probs: probs.iter().map(|p| p.ln()).collect(),
            probs: probs.to_vec(),
        })
    }

    fn from_log_probs_unchecked(log_probs: Vec<f64>) -> Result<Self> {
        let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        if let Some(j) = probs.iter().position(|&p| p <= 0.0) {
            return Err(Error::Domain(format!(
                "probability of index {j} underflows (log-prob {})",
                log_probs[j]
            )));
        }
        Ok(ProbSlot { log_probs, probs })
    }

    pub fn uniform(v: usize) -> Result<Self> {
        Self::from_logits(&vec![0.0; v])
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn log_prob(&self, j: usize) -> f64 {
        self.log_probs[j]
    }

    pub fn prob(&self, j: usize) -> f64 {
        self.probs[j]
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn max_abs_diff(&self, other: &ProbSlot) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn total_variation(&self, other: &ProbSlot) -> f64 {
        0.5 * self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample(&self.probs, rng)
    }
}

/// Inverse-CDF draw over `probs` in index order. Zero entries are never drawn.
pub fn sample<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    last
}

/// Precomputed cumulative table for many draws from one distribution.
///
/// Draws are identical to [`sample`] for the same stream state.
#[derive(Clone, Debug)]
pub struct Sampler {
    cdf: Vec<f64>,
}

impl Sampler {
    pub fn new(probs: &[f64]) -> Self {
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|&p| {
                acc += p;
                acc
            })
            .collect();
        Sampler { cdf }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cdf.last().unwrap_or(&0.0);
        let u = rng.random::<f64>() * total;
        let j = self.cdf.partition_point(|&c| c <= u);
        j.min(self.cdf.len() - 1)
    }
}

/// A set of distinct vocabulary indices, kept in insertion order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopkIndexSet {
    indices: Vec<usize>,
    member: Vec<bool>,
}

impl TopkIndexSet {
    /// Validate an arbitrary index set over a vocabulary of size `v`.
    pub fn from_indices(indices: Vec<usize>, v: usize) -> Result<Self> {
        let mut member = vec![false; v];
        for &j in &indices {
            if j >= v {
                return arg(format!("index {j} out of range for V={v}"));
            }
            if member[j] {
                return arg(format!("duplicate index {j}"));
            }
            member[j] = true;
        }
        Ok(TopkIndexSet { indices, member })
    }

    pub fn empty(v: usize) -> Self {
        TopkIndexSet {
            indices: Vec::new(),
            member: vec![false; v],
        }
    }

    pub fn contains(&self, j: usize) -> bool {
        self.member[j]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.member.len()
    }

    /// Total probability mass of the set under `probs`.
    pub fn mass(&self, probs: &[f64]) -> f64 {
        self.indices.iter().map(|&j| probs[j]).sum()
    }
}

/// The `k` most probable indices, ties to the smaller index.
pub fn topk_indices(probs: &[f64], k: usize) -> Result<TopkIndexSet> {
    let v = probs.len();
    if k > v {
        return arg(format!("k={k} exceeds V={v}"));
    }
    let mut order: Vec<usize> = (0..v).collect();
    let by_prob = |a: &usize, b: &usize| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b));
    if k < v && k > 0 {
        order.select_nth_unstable_by(k - 1, by_prob);
    }
    order.truncate(k);
    order.sort_unstable_by(by_prob);
    TopkIndexSet::from_indices(order, v)
}

/// Which divergence an exact computation targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Divergence {
    /// `KL(π_θ || π_ref)`.
    ReverseKl,
    /// `KL(π_ref || π_θ)`.
    ForwardKl,
    /// `Σ π_ref f(π_θ / π_ref)`.
    F(FGenerator),
}

impl From<FGenerator> for Divergence {
    fn from(g: FGenerator) -> Self {
        Divergence::F(g)
    }
}

/// Current policy (differentiable logits) plus frozen reference and optional
/// sampling distributions.
#[derive(Clone, Debug)]
pub struct PolicyPair {
    logits: Vec<f64>,
    theta: ProbSlot,
    reference: ProbSlot,
    sampling: Option<ProbSlot>,
}

impl PolicyPair {
    pub fn new(theta_logits: &[f64], reference: ProbSlot) -> Result<Self> {
        let theta = ProbSlot::from_logits(theta_logits)?;
        if theta.len() != reference.len() {
            return arg(format!(
                "theta has V={} but reference has V={}",
                theta.len(),
                reference.len()
            ));
        }
        Ok(PolicyPair {
            logits: theta_logits.to_vec(),
            theta,
            reference,
            sampling: None,
        })
    }

    pub fn from_logits(theta_logits: &[f64], ref_logits: &[f64]) -> Result<Self> {
        Self::new(theta_logits, ProbSlot::from_logits(ref_logits)?)
    }

    pub fn with_sampling(mut self, sampling: ProbSlot) -> Result<Self> {
        if sampling.len() != self.theta.len() {
            return arg("sampling policy has a different V");
        }
        self.sampling = Some(sampling);
        Ok(self)
    }

    pub fn vocab(&self) -> usize {
        self.theta.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn theta(&self) -> &ProbSlot {
        &self.theta
    }

    pub fn reference(&self) -> &ProbSlot {
        &self.reference
    }

    pub fn explicit_sampling(&self) -> Option<&ProbSlot> {
        self.sampling.as_ref()
    }

    /// Distribution tokens are drawn from: the sampling slot, else theta.
    pub fn sampling(&self) -> &ProbSlot {
        self.sampling.as_ref().unwrap_or(&self.theta)
    }

    pub fn exact(&self, div: impl Into<Divergence>) -> f64 {
        exact_divergence(&self.theta, &self.reference, div.into())
    }

    pub fn exact_grad(&self, div: impl Into<Divergence>) -> Gradient {
        exact_divergence_grad(&self.theta, &self.reference, div.into())
    }
}

/// Full-vocabulary divergence between `theta` and `reference`.
pub fn exact_divergence(theta: &ProbSlot, reference: &ProbSlot, div: Divergence) -> f64 {
    let (lp, lq) = (theta.log_probs(), reference.log_probs());
    match div {
        Divergence::ReverseKl => (0..lp.len()).map(|j| theta.prob(j) * (lp[j] - lq[j])).sum(),
        Divergence::ForwardKl => (0..lp.len()).map(|j| reference.prob(j) * (lq[j] - lp[j])).sum(),
        Divergence::F(g) => match g.name() {
            FName::ReverseKl => exact_divergence(theta, reference, Divergence::ReverseKl),
            FName::ForwardKl => exact_divergence(theta, reference, Divergence::ForwardKl),
            _ => (0..lp.len())
                .map(|j| reference.prob(j) * g.f((lp[j] - lq[j]).exp()))
                .sum(),
        },
    }
}

/// Analytic gradient of [`exact_divergence`] with respect to theta's logits:
/// `π_i (f'(t_i) - Σ_j π_j f'(t_j))`.
pub fn exact_divergence_grad(theta: &ProbSlot, reference: &ProbSlot, div: Divergence) -> Gradient {
    let (lp, lq) = (theta.log_probs(), reference.log_probs());
    let v = lp.len();
    match div {
        Divergence::ReverseKl => {
            let kl = exact_divergence(theta, reference, div);
            Gradient((0..v).map(|i| theta.prob(i) * (lp[i] - lq[i] - kl)).collect())
        }
        Divergence::ForwardKl => Gradient((0..v).map(|i| theta.prob(i) - reference.prob(i)).collect()),
        Divergence::F(g) => {
            let fp: Vec<f64> = (0..v).map(|j| g.f_prime((lp[j] - lq[j]).exp())).collect();
            let mean: f64 = (0..v).map(|j| theta.prob(j) * fp[j]).sum();
            Gradient((0..v).map(|i| theta.prob(i) * (fp[i] - mean)).collect())
        }
    }
}

/// Theta logits registered on a tape, with lazy `log π_θ(j)` nodes.
#[derive(Clone, Debug)]
pub struct TapeSlot<'t, 'a> {
    pair: &'a PolicyPair,
    logits: Vec<Var<'t>>,
    lse: Var<'t>,
}

impl<'t, 'a> TapeSlot<'t, 'a> {
    /// Fresh parameters for the pair's theta logits.
    pub fn new(tape: &'t Tape, pair: &'a PolicyPair) -> Self {
        Self::with_logits(pair, tape.params(pair.logits()))
    }

    /// Reuse existing tape nodes as theta logits (their values must be the
    /// pair's logits).
    pub fn with_logits(pair: &'a PolicyPair, logits: Vec<Var<'t>>) -> Self {
        assert_eq!(logits.len(), pair.vocab(), "logit count differs from V");
        let tape = logits[0].tape();
        let lse = tape.log_sum_exp(&logits);
        TapeSlot { pair, logits, lse }
    }

    pub fn tape(&self) -> &'t Tape {
        self.lse.tape()
    }

    pub fn pair(&self) -> &'a PolicyPair {
        self.pair
    }

    pub fn logits(&self) -> &[Var<'t>] {
        &self.logits
    }

    pub fn log_prob(&self, j: usize) -> Var<'t> {
        self.logits[j] - self.lse
    }

    pub fn grad(&self, output: Var<'t>) -> Result<Gradient> {
        Ok(self.tape().grad(output, &self.logits)?)
    }
}

/// Tape expression of the full-vocabulary divergence.
pub fn exact_divergence_expr<'t>(slot: &TapeSlot<'t, '_>, div: Divergence) -> Var<'t> {
    let reference = slot.pair().reference();
    let v = slot.pair().vocab();
    let terms: Vec<Var<'t>> = (0..v)
        .map(|j| {
            let lp = slot.log_prob(j);
            let lq = reference.log_prob(j);
            match div {
                Divergence::ReverseKl => lp.exp() * (lp - lq),
                Divergence::ForwardKl => reference.prob(j) * (lq - lp),
                Divergence::F(g) => reference.prob(j) * g.f_log_var(lp - lq),
            }
        })
        .collect();
    slot.tape().sum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdiv::{all_generators, DEFAULT_ALPHA};
    use crate::rng;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut impl Rng, v: usize) -> Vec<f64> {
        (0..v).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn log_softmax_examples() {
        let s = ProbSlot::from_logits(&[0.0; 4]).unwrap();
        for &l in s.log_probs() {
            assert_relative_eq!(l, -(4f64.ln()), epsilon = 1e-15);
        }
        let s = ProbSlot::from_logits(&[0.0, 3f64.ln()]).unwrap();
        assert_relative_eq!(s.prob(0), 0.25, epsilon = 1e-15);
        assert_relative_eq!(s.prob(1), 0.75, epsilon = 1e-15);
        let z = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 7.3).collect();
        let a = ProbSlot::from_logits(&z).unwrap();
        let b = ProbSlot::from_logits(&shifted).unwrap();
        for j in 0..4 {
            assert!((a.log_prob(j) - b.log_prob(j)).abs() < 1e-12);
        }
        assert!(ProbSlot::from_logits(&[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn sampling() {
        let mut r = rng::stream(1, 0, rng::purpose::SAMPLING);
        for _ in 0..100 {
            assert_eq!(sample(&[0.0, 0.0, 1.0, 0.0], &mut r), 2);
        }
        let draws = |seed| {
            let mut r = rng::stream(seed, 0, rng::purpose::SAMPLING);
            (0..50).map(|_| sample(&[0.2, 0.3, 0.5], &mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draws(9), draws(9));
        let n = 100_000;
        let ones = (0..n).filter(|_| sample(&[0.25, 0.75], &mut r) == 1).count();
        assert!((ones as f64 / n as f64 - 0.75).abs() < 0.01);
    }

    #[test]
    fn sampler_matches_linear_scan() {
        let probs = ProbSlot::from_logits(&[0.1, 2.0, -1.0, 0.5, 0.0]).unwrap();
        let sampler = Sampler::new(probs.probs());
        let mut a = rng::stream(3, 1, rng::purpose::SAMPLING);
        let mut b = a.clone();
        for _ in 0..10_000 {
            assert_eq!(sampler.sample(&mut a), probs.sample(&mut b));
        }
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[0.1, 0.6, 0.3], 2).unwrap().indices(), &[1, 2]);
        assert!(topk_indices(&[0.1, 0.6, 0.3], 0).unwrap().is_empty());
        assert_eq!(topk_indices(&[0.25; 4], 2).unwrap().indices(), &[0, 1]);
        assert!(topk_indices(&[0.5, 0.5], 3).is_err());
        let full = topk_indices(&[0.2, 0.3, 0.5], 3).unwrap();
        assert!((0..3).all(|j| full.contains(j)));
        assert!(TopkIndexSet::from_indices(vec![1, 1], 3).is_err());
    }

    #[test]
    fn exact_kl_examples() {
        let pair = PolicyPair::new(&[3f64.ln(), 0.0], ProbSlot::from_probs(&[0.5, 0.5]).unwrap()).unwrap();
        assert_relative_eq!(pair.exact(Divergence::ReverseKl), 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln(), epsilon = 1e-15);
        assert!((pair.exact(Divergence::ReverseKl) - 0.130812).abs() < 1e-6);
        assert!((pair.exact(Divergence::ForwardKl) - 0.143841).abs() < 1e-6);

        let same = PolicyPair::new(&[0.2, -0.4, 1.0], ProbSlot::from_logits(&[0.2, -0.4, 1.0]).unwrap()).unwrap();
        for g in all_generators(DEFAULT_ALPHA).unwrap() {
            assert!(same.exact(g).abs() < 1e-12);
        }
        assert!(same.exact_grad(Divergence::ReverseKl).norm() < 1e-15);
        assert!(same.exact_grad(Divergence::ForwardKl).norm() < 1e-15);

        let pair = PolicyPair::new(&[0.0, 0.0], ProbSlot::from_probs(&[0.25, 0.75]).unwrap()).unwrap();
        let kl = pair.exact(Divergence::ReverseKl);
        let g = pair.exact_grad(Divergence::ReverseKl);
        assert_relative_eq!(g.0[0], 0.5 * ((0.5f64 / 0.25).ln() - kl), epsilon = 1e-15);
    }

    #[test]
    fn grad_matches_finite_differences_and_tape() {
        let mut r = rng::stream(11, 0, rng::purpose::PAIR);
        let mut divs = vec![Divergence::ReverseKl, Divergence::ForwardKl];
        divs.extend(all_generators(DEFAULT_ALPHA).unwrap().into_iter().map(Divergence::F));
        for _ in 0..100 {
            let z = gaussian(&mut r, 8);
            let reference = ProbSlot::from_logits(&gaussian(&mut r, 8)).unwrap();
            let pair = PolicyPair::new(&z, reference.clone()).unwrap();
            for &div in &divs {
                let analytic = pair.exact_grad(div);
                let h = 1e-5;
                for i in 0..8 {
                    let mut zp = z.clone();
                    zp[i] += h;
                    let mut zm = z.clone();
                    zm[i] -= h;
                    let fp = exact_divergence(&ProbSlot::from_logits(&zp).unwrap(), &reference, div);
                    let fm = exact_divergence(&ProbSlot::from_logits(&zm).unwrap(), &reference, div);
                    let fd = (fp - fm) / (2.0 * h);
                    let scale = analytic.norm().max(1e-3);
                    assert!((fd - analytic.0[i]).abs() <= 1e-6 * scale, "{div:?} {fd} {}", analytic.0[i]);
                }
                let tape = Tape::new();
                let slot = TapeSlot::new(&tape, &pair);
                let expr = exact_divergence_expr(&slot, div);
                assert!((expr.value() - pair.exact(div)).abs() < 1e-12);
                let tg = slot.grad(expr).unwrap();
                assert!(tg.max_abs_diff(&analytic) < 1e-10, "{div:?}");
            }
        }
    }

    #[test]
    fn divergences_nonnegative() {
        let mut r = rng::stream(12, 0, rng::purpose::PAIR);
        for _ in 0..200 {
            let pair = PolicyPair::from_logits(&gaussian(&mut r, 6), &gaussian(&mut r, 6)).unwrap();
            for g in all_generators(DEFAULT_ALPHA).unwrap() {
                assert!(pair.exact(g) >= 0.0);
            }
        }
    }
}
