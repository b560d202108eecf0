use crate::categorical::{TapeSlot, TopkIndexSet};
use crate::error::{arg, Result};
use crate::estimators::{token_terms, ClipRange, EstimatorSample};
use crate::tape::Var;

use super::{FGenerator, FName};

/// Which side of the divergence the current policy sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightDirection {
    /// `D_f(π_θ || π*)`, weight `φ(w)`.
    ThetaToStar,
    /// `D_f(π* || π_θ)`, weight `ψ(w)`.
    StarToTheta,
}

/// Score-function weight at `w = π*(p) / π_θ(p)`.
pub fn pg_weight(gen: &FGenerator, w: f64, direction: WeightDirection) -> Result<f64> {
    if !(w > 0.0) {
        return arg(format!("weight ratio must be positive, got {w}"));
    }
    Ok(match direction {
        WeightDirection::ThetaToStar => gen.phi(w),
        WeightDirection::StarToTheta => gen.psi(w),
    })
}

impl FGenerator {
    /// `g(w)` on the tape, taking `log w`. The KL members use the log directly.
    pub fn g_log_var<'t>(&self, log_w: Var<'t>) -> Var<'t> {
        match self.name() {
            FName::ReverseKl => -log_w,
            FName::ForwardKl => log_w.exp() * log_w,
            _ => self.g_var(log_w.exp()),
        }
    }

    /// `f(t)` on the tape, taking `log t`.
    pub fn f_log_var<'t>(&self, log_t: Var<'t>) -> Var<'t> {
        match self.name() {
            FName::ReverseKl => log_t.exp() * log_t,
            FName::ForwardKl => -log_t,
            _ => self.f_var(log_t.exp()),
        }
    }
}

fn check(slot: &TapeSlot<'_, '_>, p: usize) -> Result<()> {
    if p >= slot.pair().vocab() {
        return arg(format!("token {p} out of range for V={}", slot.pair().vocab()));
    }
    Ok(())
}

/// `r(p) · g(w(p))`, times `s` when off-policy.
pub fn sampled_fdiv<'t>(
    gen: &FGenerator,
    slot: &TapeSlot<'t, '_>,
    p: usize,
    clip: ClipRange,
) -> Result<EstimatorSample<'t>> {
    check(slot, p)?;
    let t = token_terms(slot, p, clip);
    let expr = t.log_r.exp() * gen.g_log_var(t.log_w);
    Ok(EstimatorSample {
        token: p,
        expr: t.weight(expr),
        w: t.w(),
        s: t.s,
        in_topk: false,
    })
}

/// Exact head `Σ_{j∈q} π_ref(j) f(π_θ(j)/π_ref(j))` plus masked `r·g(w)` tail.
pub fn topk_fdiv<'t>(
    gen: &FGenerator,
    slot: &TapeSlot<'t, '_>,
    p: usize,
    q: &TopkIndexSet,
    clip: ClipRange,
) -> Result<EstimatorSample<'t>> {
    check(slot, p)?;
    if q.vocab() != slot.pair().vocab() {
        return arg("index set built for a different vocabulary");
    }
    let reference = slot.pair().reference();
    let mut terms: Vec<Var<'t>> = q
        .indices()
        .iter()
        .map(|&j| reference.prob(j) * gen.f_log_var(slot.log_prob(j) - reference.log_prob(j)))
        .collect();
    let t = token_terms(slot, p, clip);
    let in_topk = q.contains(p);
    if !in_topk {
        terms.push(t.weight(t.log_r.exp() * gen.g_log_var(t.log_w)));
    }
    Ok(EstimatorSample {
        token: p,
        expr: slot.tape().sum(&terms),
        w: t.w(),
        s: t.s,
        in_topk,
    })
}
