use std::fmt::Write as _;

use super::{
    enumerate, enumerate_variance, gaussian, random_index_set, random_off_policy_pair, random_pair,
    AuditConfig, AuditReport, AuditRow,
};
use crate::categorical::{exact_divergence_grad, topk_indices, Divergence, PolicyPair, ProbSlot, TapeSlot};
use crate::error::Result;
use crate::estimators::{
    sampled_kl, sequence_kl_estimator, token_kl_sum, topk_forward_kl, topk_reverse_kl, ClipRange, EstimatorVariant,
    QSource, TailForm, TokenKlSpec,
};
use crate::rng::{self, purpose};
use crate::tape::{Gradient, Tape};

const VALUE_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-8;

/// What an estimator's expectation is supposed to equal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Target {
    Zero,
    Reverse,
    Forward,
    HalfSquaredLogRatio,
}

impl Target {
    fn tag(self) -> &'static str {
        match self {
            Target::Zero => "zero",
            Target::Reverse => "reverse_kl",
            Target::Forward => "forward_kl",
            Target::HalfSquaredLogRatio => "half_sq_log_ratio",
        }
    }

    fn value(self, pair: &PolicyPair) -> f64 {
        let (t, r) = (pair.theta(), pair.reference());
        match self {
            Target::Zero => 0.0,
            Target::Reverse => pair.exact(Divergence::ReverseKl),
            Target::Forward => pair.exact(Divergence::ForwardKl),
            Target::HalfSquaredLogRatio => (0..t.len())
                .map(|j| 0.5 * t.prob(j) * (r.log_prob(j) - t.log_prob(j)).powi(2))
                .sum(),
        }
    }

    fn grad(self, pair: &PolicyPair) -> Gradient {
        match self {
            Target::Zero | Target::HalfSquaredLogRatio => Gradient::zeros(pair.vocab()),
            Target::Reverse => pair.exact_grad(Divergence::ReverseKl),
            Target::Forward => pair.exact_grad(Divergence::ForwardKl),
        }
    }
}

fn claims(v: EstimatorVariant) -> (Target, Target) {
    use EstimatorVariant::*;
    match v {
        K1 => (Target::Reverse, Target::Zero),
        K2 => (Target::HalfSquaredLogRatio, Target::Reverse),
        K3 => (Target::Reverse, Target::Forward),
        K3PP | K4 | TopkRev => (Target::Reverse, Target::Reverse),
        K5 | TopkFwd => (Target::Forward, Target::Forward),
    }
}

/// One row of the claims matrix: estimator × (value target, gradient target).
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorClaim {
    pub estimator: EstimatorVariant,
    pub value_target: &'static str,
    pub value_err: f64,
    /// `max |E[value] - reverse KL|`; nonzero marks a biased value.
    pub value_bias: f64,
    pub grad_target: &'static str,
    pub grad_err: f64,
    pub pass: bool,
}

pub const CLAIMS_HEADER: &str = "estimator,value_target,value_err,value_bias,grad_target,grad_err,pass";

impl EstimatorClaim {
    pub fn csv(claims: &[EstimatorClaim]) -> String {
        let mut out = String::from(CLAIMS_HEADER);
        out.push('\n');
        for c in claims {
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{},{:e},{}",
                c.estimator, c.value_target, c.value_err, c.value_bias, c.grad_target, c.grad_err, c.pass
            );
        }
        out
    }
}

fn sampled_errors(pair: &PolicyPair, variant: EstimatorVariant, clip: ClipRange) -> Result<(f64, f64, f64)> {
    let (vt, gt) = claims(variant);
    let (value, grad) = enumerate(pair, pair.sampling().probs(), |slot, p| Ok(sampled_kl(variant, slot, p, clip)?.expr))?;
    Ok((
        (value - vt.value(pair)).abs(),
        grad.max_abs_diff(&gt.grad(pair)),
        (value - pair.exact(Divergence::ReverseKl)).abs(),
    ))
}

fn topk_errors(pair: &PolicyPair, variant: EstimatorVariant, q: &crate::TopkIndexSet, clip: ClipRange) -> Result<(f64, f64)> {
    let (vt, gt) = claims(variant);
    let (value, grad) = enumerate(pair, pair.sampling().probs(), |slot, p| {
        Ok(match variant {
            EstimatorVariant::TopkRev => topk_reverse_kl(slot, p, q, clip, TailForm::Canonical)?,
            _ => topk_forward_kl(slot, p, q, clip, TailForm::Canonical)?,
        }
        .expr)
    })?;
    Ok(((value - vt.value(pair)).abs(), grad.max_abs_diff(&gt.grad(pair))))
}

fn claims_matrix(cfg: &AuditConfig, rep: &mut AuditReport) -> Result<Vec<EstimatorClaim>> {
    let mut out = Vec::new();
    for variant in EstimatorVariant::SAMPLED {
        let per_pair = crate::par::map_indexed(cfg.pairs, cfg.exec, |i| {
            sampled_errors(&random_pair(cfg.seed, i, cfg.vocab)?, variant, ClipRange::UNCLIPPED)
        });
        let (mut ve, mut ge, mut bias) = (0.0f64, 0.0f64, 0.0f64);
        for r in per_pair {
            let (a, b, c) = r?;
            ve = ve.max(a);
            ge = ge.max(b);
            bias = bias.max(c);
        }
        let (vt, gt) = claims(variant);
        let mut pass = ve <= VALUE_TOL && ge <= GRAD_TOL;
        rep.push(AuditRow::at_most("table1", format!("{variant}_value_vs_{}", vt.tag()), ve, VALUE_TOL));
        rep.push(AuditRow::at_most("table1", format!("{variant}_grad_vs_{}", gt.tag()), ge, GRAD_TOL));
        if variant == EstimatorVariant::K2 {
            let row = AuditRow::above("table1", "k2_value_biased_vs_reverse_kl", bias, 1e-3);
            pass &= row.pass;
            rep.push(row);
        }
        if variant == EstimatorVariant::K3 {
            // its gradient must not be the reverse-KL gradient
            let mut gap: f64 = 0.0;
            for i in 0..cfg.pairs {
                let pair = random_pair(cfg.seed, i, cfg.vocab)?;
                gap = gap.max(pair.exact_grad(Divergence::ReverseKl).max_abs_diff(&pair.exact_grad(Divergence::ForwardKl)));
            }
            let row = AuditRow::above("table1", "k3_grad_differs_from_reverse_kl_grad", gap, 1e-3);
            pass &= row.pass;
            rep.push(row);
        }
        out.push(EstimatorClaim {
            estimator: variant,
            value_target: vt.tag(),
            value_err: ve,
            value_bias: bias,
            grad_target: gt.tag(),
            grad_err: ge,
            pass,
        });
    }
    Ok(out)
}

fn topk_audit(cfg: &AuditConfig, rep: &mut AuditReport) -> Result<()> {
    let v = cfg.vocab;
    for variant in [EstimatorVariant::TopkRev, EstimatorVariant::TopkFwd] {
        let source = QSource::default_for(variant);
        let per_pair = crate::par::map_indexed(cfg.pairs, cfg.exec, |i| -> Result<[f64; 6]> {
            let pair = random_pair(cfg.seed, i, v)?;
            let tape = Tape::new();
            let slot = TapeSlot::new(&tape, &pair);
            let mut e = [0.0f64; 6];
            for k in 0..=v {
                let q = crate::estimators::index_set(&slot, k, source)?;
                let (a, b) = topk_errors(&pair, variant, &q, ClipRange::UNCLIPPED)?;
                e[0] = e[0].max(a);
                e[1] = e[1].max(b);
            }
            let mut r = rng::stream(cfg.seed, i as u64, purpose::INDEX_SET);
            for _ in 0..cfg.arbitrary_sets {
                let q = random_index_set(&mut r, v)?;
                let (a, b) = topk_errors(&pair, variant, &q, ClipRange::UNCLIPPED)?;
                e[2] = e[2].max(a);
                e[3] = e[3].max(b);
            }
            // boundaries, on an off-policy copy with the default clip
            let off = random_off_policy_pair(cfg.seed, i, v)?;
            let tape = Tape::new();
            let slot = TapeSlot::new(&tape, &off);
            let clip = ClipRange::default_for(variant);
            let full = topk_indices(off.theta().probs(), v)?;
            let empty = crate::TopkIndexSet::empty(v);
            let exact = claims(variant).0.value(&off);
            let sampled = if variant == EstimatorVariant::TopkRev {
                EstimatorVariant::K4
            } else {
                EstimatorVariant::K5
            };
            for p in 0..v {
                let (head, tail) = match variant {
                    EstimatorVariant::TopkRev => (
                        topk_reverse_kl(&slot, p, &full, clip, TailForm::Canonical)?,
                        topk_reverse_kl(&slot, p, &empty, clip, TailForm::Canonical)?,
                    ),
                    _ => (
                        topk_forward_kl(&slot, p, &full, clip, TailForm::Canonical)?,
                        topk_forward_kl(&slot, p, &empty, clip, TailForm::Canonical)?,
                    ),
                };
                e[4] = e[4].max((head.value() - exact).abs());
                e[5] = e[5].max((tail.value() - sampled_kl(sampled, &slot, p, clip)?.value()).abs());
            }
            Ok(e)
        });
        let mut worst = [0.0f64; 6];
        for e in per_pair {
            let e = e?;
            for (w, x) in worst.iter_mut().zip(e) {
                *w = w.max(x);
            }
        }
        let t = variant.tag();
        rep.push(AuditRow::at_most("topk", format!("{t}_value_all_k"), worst[0], VALUE_TOL));
        rep.push(AuditRow::at_most("topk", format!("{t}_grad_all_k"), worst[1], GRAD_TOL));
        rep.push(AuditRow::at_most("topk", format!("{t}_value_arbitrary_q"), worst[2], VALUE_TOL));
        rep.push(AuditRow::at_most("topk", format!("{t}_grad_arbitrary_q"), worst[3], GRAD_TOL));
        rep.push(AuditRow::at_most("topk", format!("{t}_k_eq_v_is_exact"), worst[4], 1e-12));
        rep.push(AuditRow::at_most("topk", format!("{t}_k0_is_clipped_sampled"), worst[5], 0.0));
    }
    Ok(())
}

/// Witness for the uncorrected off-policy bias.
fn witness() -> Result<PolicyPair> {
    PolicyPair::from_logits(&[0.4, -1.0, 0.9], &[0.0, 0.5, -0.3])?.with_sampling(ProbSlot::from_logits(&[1.0, 0.0, 0.0])?)
}

fn off_policy_audit(cfg: &AuditConfig, rep: &mut AuditReport) -> Result<()> {
    let v = cfg.vocab;
    for variant in EstimatorVariant::SAMPLED {
        let (mut ve, mut ge) = (0.0f64, 0.0f64);
        for r in crate::par::map_indexed(cfg.pairs, cfg.exec, |i| {
            sampled_errors(&random_off_policy_pair(cfg.seed, i, v)?, variant, ClipRange::UNCLIPPED)
        }) {
            let (a, b, _) = r?;
            ve = ve.max(a);
            ge = ge.max(b);
        }
        rep.push(AuditRow::at_most("off_policy", format!("{variant}_value"), ve, VALUE_TOL));
        rep.push(AuditRow::at_most("off_policy", format!("{variant}_grad"), ge, GRAD_TOL));
    }
    for variant in [EstimatorVariant::TopkRev, EstimatorVariant::TopkFwd] {
        let (mut ve, mut ge) = (0.0f64, 0.0f64);
        for r in crate::par::map_indexed(cfg.pairs, cfg.exec, |i| {
            let pair = random_off_policy_pair(cfg.seed, i, v)?;
            let tape = Tape::new();
            let slot = TapeSlot::new(&tape, &pair);
            let q = crate::estimators::index_set(&slot, cfg.topk_k.min(v), QSource::default_for(variant))?;
            topk_errors(&pair, variant, &q, ClipRange::UNCLIPPED)
        }) {
            let (a, b) = r?;
            ve = ve.max(a);
            ge = ge.max(b);
        }
        rep.push(AuditRow::at_most("off_policy", format!("{}_value", variant.tag()), ve, VALUE_TOL));
        rep.push(AuditRow::at_most("off_policy", format!("{}_grad", variant.tag()), ge, GRAD_TOL));
    }
    let w = witness()?;
    let (value_bias, grad_bias, _) = sampled_errors(&w, EstimatorVariant::K4, ClipRange::OFF)?;
    rep.push(AuditRow::above("off_policy", "uncorrected_k4_value_bias_on_witness", value_bias, 1e-3));
    rep.push(AuditRow::above("off_policy", "uncorrected_k4_grad_bias_on_witness", grad_bias, 1e-3));
    Ok(())
}

/// Tabular model of length 2: row 0 for the first token, row `1 + y0` for
/// the second.
struct TwoStep {
    theta: Vec<Vec<f64>>,
    reference: Vec<Vec<f64>>,
    v: usize,
}

impl TwoStep {
    fn random(seed: u64, index: usize, v: usize, equal: bool) -> Self {
        let mut r = rng::stream(seed, index as u64, purpose::PAIR);
        let theta: Vec<Vec<f64>> = (0..=v).map(|_| gaussian(&mut r, v)).collect();
        let reference = if equal {
            theta.clone()
        } else {
            (0..=v).map(|_| gaussian(&mut r, v)).collect()
        };
        TwoStep { theta, reference, v }
    }

    fn pair(&self, row: usize) -> Result<PolicyPair> {
        PolicyPair::from_logits(&self.theta[row], &self.reference[row])
    }

    fn rows(y: [usize; 2]) -> [usize; 2] {
        [0, 1 + y[0]]
    }

    /// Enumerated expected gradient of an expression built per trajectory.
    fn expected_grad<F>(&self, build: F) -> Result<Vec<f64>>
    where
        F: for<'t, 'a> Fn(&[usize], &[TapeSlot<'t, 'a>]) -> Result<crate::Var<'t>>,
    {
        let v = self.v;
        let pairs: Vec<PolicyPair> = (0..=v).map(|r| self.pair(r)).collect::<Result<_>>()?;
        let mut total = vec![0.0; (v + 1) * v];
        for y0 in 0..v {
            for y1 in 0..v {
                let y = [y0, y1];
                let rows = Self::rows(y);
                let tape = Tape::new();
                let flat: Vec<f64> = self.theta.concat();
                let params = tape.params(&flat);
                let slots: Vec<TapeSlot> = rows
                    .iter()
                    .map(|&r| TapeSlot::with_logits(&pairs[r], params[r * v..(r + 1) * v].to_vec()))
                    .collect();
                let prob = pairs[rows[0]].theta().prob(y0) * pairs[rows[1]].theta().prob(y1);
                let g = tape.grad(build(&y, &slots)?, &params)?;
                for (t, x) in total.iter_mut().zip(&g.0) {
                    *t += prob * x;
                }
            }
        }
        Ok(total)
    }

    /// Analytic gradient of the joint reverse KL.
    fn joint_kl_grad(&self) -> Result<Vec<f64>> {
        let v = self.v;
        let first = self.pair(0)?;
        let mut out = vec![0.0; (v + 1) * v];
        let a: Vec<f64> = (0..v)
            .map(|y0| {
                Ok(first.theta().log_prob(y0) - first.reference().log_prob(y0)
                    + self.pair(1 + y0)?.exact(Divergence::ReverseKl))
            })
            .collect::<Result<_>>()?;
        let mean: f64 = (0..v).map(|j| first.theta().prob(j) * a[j]).sum();
        for j in 0..v {
            out[j] = first.theta().prob(j) * (a[j] - mean);
        }
        for y0 in 0..v {
            let g = self.pair(1 + y0)?.exact_grad(Divergence::ReverseKl);
            for j in 0..v {
                out[(1 + y0) * v + j] = first.theta().prob(y0) * g.0[j];
            }
        }
        Ok(out)
    }

    /// `Σ_n E_{h_n}[∇ KL_n(h_n)]` with the history held fixed.
    fn token_kl_grad(&self) -> Result<Vec<f64>> {
        let v = self.v;
        let first = self.pair(0)?;
        let mut out = first.exact_grad(Divergence::ReverseKl).0;
        for y0 in 0..v {
            let p = self.pair(1 + y0)?;
            out.extend(exact_divergence_grad(p.theta(), p.reference(), Divergence::ReverseKl).0.iter().map(|g| first.theta().prob(y0) * g));
        }
        Ok(out)
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sequence_audit(cfg: &AuditConfig, rep: &mut AuditReport) -> Result<()> {
    const V: usize = 3;
    let per = crate::par::map_indexed(cfg.sequence_instances, cfg.exec, |i| -> Result<[f64; 6]> {
        let m = TwoStep::random(cfg.seed, i, V, false);
        let seq = m.expected_grad(sequence_kl_estimator)?;
        let joint = m.joint_kl_grad()?;
        let token = m.token_kl_grad()?;
        let mut e = [0.0; 6];
        e[0] = max_diff(&seq, &joint);
        e[5] = max_diff(&token, &joint);
        let spec_k4 = TokenKlSpec::new(EstimatorVariant::K4, 0);
        let spec_topk = TokenKlSpec::new(EstimatorVariant::TopkRev, 1);
        e[1] = max_diff(&m.expected_grad(|y, s| token_kl_sum(y, s, &spec_k4))?, &token);
        e[2] = max_diff(&m.expected_grad(|y, s| token_kl_sum(y, s, &spec_topk))?, &token);
        // E[ρ_0 ∇log π(y_1 | y_0)], the past term of position 1
        let past = m.expected_grad(|y, s| {
            let rho0 = s[0].log_prob(y[0]).value() - s[0].pair().reference().log_prob(y[0]);
            Ok(s[1].log_prob(y[1]) * rho0)
        })?;
        e[3] = past.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let eq = TwoStep::random(cfg.seed, i, V, true);
        let zero = eq.expected_grad(sequence_kl_estimator)?;
        e[4] = zero.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        Ok(e)
    });
    let mut worst = [0.0f64; 6];
    for e in per {
        for (w, x) in worst.iter_mut().zip(e?) {
            *w = w.max(x);
        }
    }
    rep.push(AuditRow::at_most("sequence", "sequence_estimator_grad_vs_joint_kl", worst[0], VALUE_TOL));
    rep.push(AuditRow::at_most("sequence", "token_sum_k4_grad_vs_per_position", worst[1], VALUE_TOL));
    rep.push(AuditRow::at_most("sequence", "token_sum_topk_grad_vs_per_position", worst[2], VALUE_TOL));
    rep.push(AuditRow::at_most("sequence", "past_term_expectation", worst[3], 1e-10));
    rep.push(AuditRow::at_most("sequence", "equal_policies_zero_grad", worst[4], 1e-12));
    rep.push(AuditRow::above("sequence", "token_sum_differs_from_joint_kl_grad", worst[5], 1e-3));
    Ok(())
}

fn variance_audit(cfg: &AuditConfig, rep: &mut AuditReport) -> Result<()> {
    let v = cfg.variance_vocab;
    let k = cfg.variance_k.min(v);
    let ratios = crate::par::map_indexed(cfg.variance_pairs, cfg.exec, |i| -> Result<(f64, f64)> {
        let pair = random_pair(cfg.seed ^ 0x5eed, i, v)?;
        let probs = pair.theta().probs();
        let q = topk_indices(pair.sampling().probs(), k)?;
        let (topk, _) = enumerate_variance(&pair, probs, |s, p| {
            Ok(topk_reverse_kl(s, p, &q, ClipRange::UNCLIPPED, TailForm::Canonical)?.expr)
        })?;
        let (k4, _) = enumerate_variance(&pair, probs, |s, p| Ok(sampled_kl(EstimatorVariant::K4, s, p, ClipRange::UNCLIPPED)?.expr))?;
        let (exact, _) = enumerate_variance(&pair, probs, |s, _| Ok(crate::exact_divergence_expr(s, Divergence::ReverseKl)))?;
        Ok((topk / k4, exact))
    });
    let (mut worst, mut strict, mut exact): (f64, usize, f64) = (0.0, 0, 0.0);
    for r in ratios {
        let (ratio, e) = r?;
        worst = worst.max(ratio);
        strict += usize::from(ratio > 1.0);
        exact = exact.max(e.abs());
    }
    rep.push(AuditRow::at_most("variance", format!("topk{k}_over_k4_value_variance"), worst, 1.0 + cfg.variance_slack));
    rep.push(AuditRow::report("variance", "topk_over_k4_strict_violations", strict as f64));
    rep.push(AuditRow::at_most("variance", "exact_value_variance", exact, 1e-12));
    Ok(())
}

/// Claims matrix plus the Top-k, off-policy, sequence and variance audits.
pub fn audit_estimators(cfg: &AuditConfig) -> Result<(AuditReport, Vec<EstimatorClaim>)> {
    let mut rep = AuditReport::default();
    let claims = claims_matrix(cfg, &mut rep)?;
    topk_audit(cfg, &mut rep)?;
    off_policy_audit(cfg, &mut rep)?;
    sequence_audit(cfg, &mut rep)?;
    variance_audit(cfg, &mut rep)?;
    Ok((rep, claims))
}
