//! Sampled and Top-k KL estimators built as tape expressions.
//!
//! Notation for one drawn token `p`: `w = π_ref(p) / π_θ(p)`,
//! `r = π_θ(p) / sg(π_θ(p))` (value 1, gradient `∇log π_θ(p)`), and
//! `s = clip(π_θ(p) / π_sampling(p))`, a frozen importance weight.

use std::fmt;
use std::str::FromStr;

use crate::categorical::{topk_indices, TapeSlot, TopkIndexSet};
use crate::error::{arg, Error, Result};
use crate::tape::{Gradient, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EstimatorVariant {
    K1,
    K2,
    K3,
    K3PP,
    K4,
    K5,
    TopkRev,
    TopkFwd,
}

impl EstimatorVariant {
    pub const SAMPLED: [EstimatorVariant; 6] = [
        EstimatorVariant::K1,
        EstimatorVariant::K2,
        EstimatorVariant::K3,
        EstimatorVariant::K3PP,
        EstimatorVariant::K4,
        EstimatorVariant::K5,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            EstimatorVariant::K1 => "k1",
            EstimatorVariant::K2 => "k2",
            EstimatorVariant::K3 => "k3",
            EstimatorVariant::K3PP => "k3pp",
            EstimatorVariant::K4 => "k4",
            EstimatorVariant::K5 => "k5",
            EstimatorVariant::TopkRev => "topk_rev",
            EstimatorVariant::TopkFwd => "topk_fwd",
        }
    }

    pub fn is_topk(self) -> bool {
        matches!(self, EstimatorVariant::TopkRev | EstimatorVariant::TopkFwd)
    }

    /// Whether the estimator's natural target is `KL(π_ref || π_θ)`.
    pub fn is_forward(self) -> bool {
        matches!(self, EstimatorVariant::K5 | EstimatorVariant::TopkFwd)
    }
}

impl fmt::Display for EstimatorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for EstimatorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "k1" => EstimatorVariant::K1,
            "k2" => EstimatorVariant::K2,
            "k3" => EstimatorVariant::K3,
            "k3pp" | "k3++" => EstimatorVariant::K3PP,
            "k4" => EstimatorVariant::K4,
            "k5" => EstimatorVariant::K5,
            "topk_rev" | "topk-rev" => EstimatorVariant::TopkRev,
            "topk_fwd" | "topk-fwd" => EstimatorVariant::TopkFwd,
            other => return arg(format!("unknown estimator `{other}`")),
        })
    }
}

/// Clip range for the importance weight. `[1, 1]` switches correction off.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipRange {
    pub s_min: f64,
    pub s_max: f64,
}

impl ClipRange {
    pub const UNCLIPPED: ClipRange = ClipRange {
        s_min: 0.0,
        s_max: f64::INFINITY,
    };
    pub const OFF: ClipRange = ClipRange { s_min: 1.0, s_max: 1.0 };
    pub const REVERSE_DEFAULT: ClipRange = ClipRange { s_min: 0.0, s_max: 10.0 };
    pub const FORWARD_DEFAULT: ClipRange = ClipRange { s_min: 0.0, s_max: 2.5 };

    pub fn new(s_min: f64, s_max: f64) -> Result<Self> {
        if !(s_min >= 0.0 && s_max >= s_min) {
            return arg(format!("invalid clip range [{s_min}, {s_max}]"));
        }
        Ok(ClipRange { s_min, s_max })
    }

    pub fn default_for(variant: EstimatorVariant) -> Self {
        if variant.is_forward() {
            Self::FORWARD_DEFAULT
        } else {
            Self::REVERSE_DEFAULT
        }
    }

    pub fn apply(&self, s: f64) -> f64 {
        s.clamp(self.s_min, self.s_max)
    }
}

/// Form of the sampled tail term of a Top-k estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TailForm {
    /// `r·(-log w)` (reverse) and `sg(w)·log w` (forward): the masked sampling
    /// form of each tail sum. Unbiased in value and gradient for any `q`.
    #[default]
    Canonical,
    /// Masked `K4` (reverse) and `K5` (forward). Same values as `Canonical`,
    /// but the expected gradient is off by `±∇π_θ(q)`, since `∇log π_θ` only
    /// averages to zero over the whole vocabulary.
    Baseline,
}

/// Where a Top-k index set comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QSource {
    Sampling,
    Theta,
    Reference,
}

impl QSource {
    /// Sampling policy for the reverse direction, reference for the forward.
    pub fn default_for(variant: EstimatorVariant) -> Self {
        if variant.is_forward() {
            QSource::Reference
        } else {
            QSource::Sampling
        }
    }
}

/// One sampled estimator value, ready for backward.
#[derive(Clone, Copy, Debug)]
pub struct EstimatorSample<'t> {
    pub token: usize,
    pub expr: Var<'t>,
    pub w: f64,
    pub s: f64,
    pub in_topk: bool,
}

impl<'t> EstimatorSample<'t> {
    pub fn value(&self) -> f64 {
        self.expr.value()
    }

    pub fn gradient(&self, slot: &TapeSlot<'t, '_>) -> Result<Gradient> {
        slot.grad(self.expr)
    }
}

/// Frozen per-token quantities shared by all estimators.
pub(crate) struct TokenTerms<'t> {
    /// `log r = lp - sg(lp)`: value 0, gradient `∇log π_θ(p)`.
    pub log_r: Var<'t>,
    /// `log w = log π_ref(p) - lp`.
    pub log_w: Var<'t>,
    pub s: f64,
    pub scaled: bool,
}

pub(crate) fn token_terms<'t>(slot: &TapeSlot<'t, '_>, p: usize, clip: ClipRange) -> TokenTerms<'t> {
    let pair = slot.pair();
    let lp = slot.log_prob(p);
    let lq = pair.reference().log_prob(p);
    let (s, scaled) = match pair.explicit_sampling() {
        Some(sampling) => (clip.apply((lp.value() - sampling.log_prob(p)).exp()), true),
        None => (1.0, false),
    };
    TokenTerms {
        log_r: lp - lp.sg(),
        log_w: lq - lp,
        s,
        scaled,
    }
}

impl<'t> TokenTerms<'t> {
    pub fn weight(&self, expr: Var<'t>) -> Var<'t> {
        if self.scaled {
            expr * self.s
        } else {
            expr
        }
    }

    pub fn w(&self) -> f64 {
        self.log_w.value().exp()
    }
}

fn check_token(slot: &TapeSlot<'_, '_>, p: usize) -> Result<()> {
    if p >= slot.pair().vocab() {
        return arg(format!("token {p} out of range for V={}", slot.pair().vocab()));
    }
    Ok(())
}

/// One of `K1`..`K5`, `K3⁺⁺` from `log w` and `log r`.
pub(crate) fn kl_expr<'t>(variant: EstimatorVariant, lw: Var<'t>, log_r: Var<'t>) -> Result<Var<'t>> {
    let r = log_r.exp();
    Ok(match variant {
        EstimatorVariant::K1 => -lw,
        EstimatorVariant::K2 => 0.5 * lw.square(),
        EstimatorVariant::K3 => -lw + lw.exp() - 1.0,
        EstimatorVariant::K3PP => r * (-lw + lw.exp() - 1.0),
        EstimatorVariant::K4 => r * (-lw).sg(),
        EstimatorVariant::K5 => lw.exp().sg() * lw + log_r,
        EstimatorVariant::TopkRev | EstimatorVariant::TopkFwd => {
            return arg(format!("{variant} needs an index set; use the Top-k estimators"))
        }
    })
}

/// Single-token estimator `K1`..`K5` or `K3⁺⁺`, times `s` when off-policy.
pub fn sampled_kl<'t>(
    variant: EstimatorVariant,
    slot: &TapeSlot<'t, '_>,
    p: usize,
    clip: ClipRange,
) -> Result<EstimatorSample<'t>> {
    check_token(slot, p)?;
    let t = token_terms(slot, p, clip);
    let expr = kl_expr(variant, t.log_w, t.log_r)?;
    Ok(EstimatorSample {
        token: p,
        expr: t.weight(expr),
        w: t.w(),
        s: t.s,
        in_topk: false,
    })
}

fn check_q(slot: &TapeSlot<'_, '_>, q: &TopkIndexSet) -> Result<()> {
    if q.vocab() != slot.pair().vocab() {
        return arg("index set built for a different vocabulary");
    }
    Ok(())
}

/// `Σ_{j∈q} π_θ(j) log(π_θ(j)/π_ref(j))`.
pub fn reverse_head<'t>(slot: &TapeSlot<'t, '_>, q: &TopkIndexSet) -> Vec<Var<'t>> {
    let reference = slot.pair().reference();
    q.indices()
        .iter()
        .map(|&j| {
            let lp = slot.log_prob(j);
            lp.exp() * (lp - reference.log_prob(j))
        })
        .collect()
}

/// Sampled reverse-direction tail term for token `p` (unmasked), times `s`.
pub fn reverse_tail<'t>(slot: &TapeSlot<'t, '_>, p: usize, clip: ClipRange, tail: TailForm) -> Var<'t> {
    let t = token_terms(slot, p, clip);
    let r = t.log_r.exp();
    let expr = match tail {
        TailForm::Canonical => r * (-t.log_w),
        TailForm::Baseline => r * (-t.log_w).sg(),
    };
    t.weight(expr)
}

/// Exact head `Σ_{j∈q} π_θ(j) log(π_θ(j)/π_ref(j))` plus a masked sampled tail.
pub fn topk_reverse_kl<'t>(
    slot: &TapeSlot<'t, '_>,
    p: usize,
    q: &TopkIndexSet,
    clip: ClipRange,
    tail: TailForm,
) -> Result<EstimatorSample<'t>> {
    check_token(slot, p)?;
    check_q(slot, q)?;
    let mut terms = reverse_head(slot, q);
    let t = token_terms(slot, p, clip);
    let in_topk = q.contains(p);
    if !in_topk {
        terms.push(reverse_tail(slot, p, clip, tail));
    }
    Ok(EstimatorSample {
        token: p,
        expr: slot.tape().sum(&terms),
        w: t.w(),
        s: t.s,
        in_topk,
    })
}

/// Exact head `Σ_{j∈q} π_ref(j) log(π_ref(j)/π_θ(j))` plus a masked sampled tail.
pub fn topk_forward_kl<'t>(
    slot: &TapeSlot<'t, '_>,
    p: usize,
    q: &TopkIndexSet,
    clip: ClipRange,
    tail: TailForm,
) -> Result<EstimatorSample<'t>> {
    check_token(slot, p)?;
    check_q(slot, q)?;
    let reference = slot.pair().reference();
    let mut terms: Vec<Var<'t>> = q
        .indices()
        .iter()
        .map(|&j| reference.prob(j) * (reference.log_prob(j) - slot.log_prob(j)))
        .collect();
    let t = token_terms(slot, p, clip);
    let in_topk = q.contains(p);
    if !in_topk {
        let w = t.log_w.exp().sg();
        let tail_expr = match tail {
            TailForm::Canonical => w * t.log_w,
            TailForm::Baseline => w * t.log_w + t.log_r,
        };
        terms.push(t.weight(tail_expr));
    }
    Ok(EstimatorSample {
        token: p,
        expr: slot.tape().sum(&terms),
        w: t.w(),
        s: t.s,
        in_topk,
    })
}

/// Index set of size `k` for a slot, taken from the chosen distribution.
pub fn index_set(slot: &TapeSlot<'_, '_>, k: usize, source: QSource) -> Result<TopkIndexSet> {
    let pair = slot.pair();
    let probs = match source {
        QSource::Sampling => pair.sampling().probs(),
        QSource::Theta => pair.theta().probs(),
        QSource::Reference => pair.reference().probs(),
    };
    topk_indices(probs, k)
}

/// Per-token estimator choice used by sums over positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenKlSpec {
    pub variant: EstimatorVariant,
    pub k: usize,
    pub clip: ClipRange,
    pub tail: TailForm,
    pub q_source: QSource,
}

impl TokenKlSpec {
    pub fn new(variant: EstimatorVariant, k: usize) -> Self {
        TokenKlSpec {
            variant,
            k,
            clip: ClipRange::default_for(variant),
            tail: TailForm::default(),
            q_source: QSource::default_for(variant),
        }
    }

    pub fn with_clip(mut self, clip: ClipRange) -> Self {
        self.clip = clip;
        self
    }

    /// Estimator at one position, with `q` built per [`QSource`] when needed.
    pub fn estimate<'t>(&self, slot: &TapeSlot<'t, '_>, p: usize) -> Result<EstimatorSample<'t>> {
        match self.variant {
            EstimatorVariant::TopkRev => {
                let q = index_set(slot, self.k, self.q_source)?;
                topk_reverse_kl(slot, p, &q, self.clip, self.tail)
            }
            EstimatorVariant::TopkFwd => {
                let q = index_set(slot, self.k, self.q_source)?;
                topk_forward_kl(slot, p, &q, self.clip, self.tail)
            }
            v => sampled_kl(v, slot, p, self.clip),
        }
    }
}

fn check_lengths(trajectory: &[usize], slots: &[TapeSlot<'_, '_>]) -> Result<()> {
    if trajectory.len() != slots.len() {
        return arg(format!(
            "trajectory has {} tokens but {} slots were given",
            trajectory.len(),
            slots.len()
        ));
    }
    if slots.is_empty() {
        return arg("empty trajectory");
    }
    Ok(())
}

/// `sg(Σ_n ρ_n) · Σ_n log π_θ(y_n | h_n)` with `ρ_n = log(π_θ/π_ref)` at
/// position `n`. Its expected gradient is the gradient of the joint KL.
pub fn sequence_kl_estimator<'t>(trajectory: &[usize], slots: &[TapeSlot<'t, '_>]) -> Result<Var<'t>> {
    check_lengths(trajectory, slots)?;
    let mut log_ratio = 0.0;
    let mut lps = Vec::with_capacity(slots.len());
    for (slot, &y) in slots.iter().zip(trajectory) {
        check_token(slot, y)?;
        let lp = slot.log_prob(y);
        log_ratio += lp.value() - slot.pair().reference().log_prob(y);
        lps.push(lp);
    }
    let tape = slots[0].tape();
    Ok(tape.constant(log_ratio) * tape.sum(&lps))
}

/// Sum over positions of the per-token estimator.
pub fn token_kl_sum<'t>(trajectory: &[usize], slots: &[TapeSlot<'t, '_>], spec: &TokenKlSpec) -> Result<Var<'t>> {
    check_lengths(trajectory, slots)?;
    let terms = slots
        .iter()
        .zip(trajectory)
        .map(|(slot, &y)| spec.estimate(slot, y).map(|e| e.expr))
        .collect::<Result<Vec<_>>>()?;
    Ok(slots[0].tape().sum(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::categorical::{PolicyPair, ProbSlot};
    use crate::tape::Tape;
    use approx::assert_relative_eq;

    fn pair_75_25() -> PolicyPair {
        PolicyPair::new(&[3f64.ln(), 0.0], ProbSlot::from_probs(&[0.5, 0.5]).unwrap()).unwrap()
    }

    #[test]
    fn zero_at_equal_policies() {
        let z = [0.3, -0.2, 1.1];
        let pair = PolicyPair::new(&z, ProbSlot::from_logits(&z).unwrap()).unwrap();
        let tape = Tape::new();
        let slot = TapeSlot::new(&tape, &pair);
        for v in EstimatorVariant::SAMPLED {
            for p in 0..3 {
                let e = sampled_kl(v, &slot, p, ClipRange::UNCLIPPED).unwrap();
                assert!(e.value().abs() < 1e-15, "{v}");
            }
        }
        let q = topk_indices(pair.theta().probs(), 1).unwrap();
        for p in 0..3 {
            assert!(topk_forward_kl(&slot, p, &q, ClipRange::UNCLIPPED, TailForm::Canonical).unwrap().value().abs() < 1e-15);
        }
    }

    #[test]
    fn k3_at_w_two() {
        // π_θ(1) = 0.25, π_ref(1) = 0.5
        let pair = pair_75_25();
        let tape = Tape::new();
        let slot = TapeSlot::new(&tape, &pair);
        let e = sampled_kl(EstimatorVariant::K3, &slot, 1, ClipRange::UNCLIPPED).unwrap();
        assert_relative_eq!(e.w, 2.0, epsilon = 1e-15);
        assert!((e.value() - 0.306853).abs() < 1e-6);
    }

    #[test]
    fn k4_enumerates_to_reverse_kl() {
        let pair = pair_75_25();
        let tape = Tape::new();
        let slot = TapeSlot::new(&tape, &pair);
        let mean: f64 = (0..2)
            .map(|p| pair.theta().prob(p) * sampled_kl(EstimatorVariant::K4, &slot, p, ClipRange::UNCLIPPED).unwrap().value())
            .sum();
        assert!((mean - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn topk_boundaries() {
        let pair = PolicyPair::from_logits(&[0.4, -1.0, 0.9, 0.1], &[0.0, 0.5, -0.3, 0.2]).unwrap();
        let tape = Tape::new();
        let slot = TapeSlot::new(&tape, &pair);
        let full = topk_indices(pair.theta().probs(), 4).unwrap();
        let empty = TopkIndexSet::empty(4);
        for p in 0..4 {
            for tail in [TailForm::Canonical, TailForm::Baseline] {
                let v = topk_reverse_kl(&slot, p, &full, ClipRange::UNCLIPPED, tail).unwrap().value();
                assert!((v - pair.exact(crate::Divergence::ReverseKl)).abs() < 1e-12);
                let v = topk_forward_kl(&slot, p, &full, ClipRange::UNCLIPPED, tail).unwrap().value();
                assert!((v - pair.exact(crate::Divergence::ForwardKl)).abs() < 1e-12);
                let k4 = sampled_kl(EstimatorVariant::K4, &slot, p, ClipRange::UNCLIPPED).unwrap().value();
                assert_eq!(topk_reverse_kl(&slot, p, &empty, ClipRange::UNCLIPPED, tail).unwrap().value(), k4);
                let k5 = sampled_kl(EstimatorVariant::K5, &slot, p, ClipRange::UNCLIPPED).unwrap().value();
                assert_eq!(topk_forward_kl(&slot, p, &empty, ClipRange::UNCLIPPED, tail).unwrap().value(), k5);
            }
        }
        let q = TopkIndexSet::from_indices(vec![2, 0], 4).unwrap();
        let head: f64 = [2, 0]
            .iter()
            .map(|&j| pair.theta().prob(j) * (pair.theta().log_prob(j) - pair.reference().log_prob(j)))
            .sum();
        let e = topk_reverse_kl(&slot, 0, &q, ClipRange::UNCLIPPED, TailForm::Canonical).unwrap();
        assert!(e.in_topk);
        assert!((e.value() - head).abs() < 1e-15);
    }

    #[test]
    fn clip_off_equals_uncorrected() {
        let pair = PolicyPair::from_logits(&[0.4, -1.0, 0.9], &[0.0, 0.5, -0.3]).unwrap();
        let off = pair.clone().with_sampling(ProbSlot::from_logits(&[1.0, 0.0, 0.0]).unwrap()).unwrap();
        let tape = Tape::new();
        let a = TapeSlot::new(&tape, &pair);
        let b = TapeSlot::new(&tape, &off);
        for v in EstimatorVariant::SAMPLED {
            for p in 0..3 {
                let x = sampled_kl(v, &a, p, ClipRange::OFF).unwrap();
                let y = sampled_kl(v, &b, p, ClipRange::OFF).unwrap();
                assert_eq!(x.value(), y.value());
                assert_eq!(a.grad(x.expr).unwrap(), b.grad(y.expr).unwrap());
            }
        }
    }

    #[test]
    fn token_sum_linear() {
        let pair = PolicyPair::from_logits(&[0.4, -1.0, 0.9], &[0.0, 0.5, -0.3]).unwrap();
        let tape = Tape::new();
        let logits = tape.params(pair.logits());
        let slots: Vec<_> = (0..3).map(|_| TapeSlot::with_logits(&pair, logits.clone())).collect();
        let spec = TokenKlSpec::new(EstimatorVariant::TopkRev, 1);
        let single = spec.estimate(&slots[0], 1).unwrap().value();
        let one = token_kl_sum(&[1], &slots[..1], &spec).unwrap().value();
        assert_eq!(one, single);
        let three = token_kl_sum(&[1, 1, 1], &slots, &spec).unwrap().value();
        assert_relative_eq!(three, 3.0 * single, epsilon = 1e-15);
        assert!(token_kl_sum(&[1, 1], &slots, &spec).is_err());
    }
}
