use rand::Rng;

use super::{
    enumerate, enumerate_variance, gaussian, max_over, random_index_set, random_off_policy_pair, random_pair,
    AuditConfig, AuditReport, AuditRow,
};
use crate::categorical::{topk_indices, Divergence, PolicyPair, ProbSlot, TapeSlot, TopkIndexSet};
use crate::error::{Error, Result};
use crate::estimators::{sampled_kl, ClipRange, EstimatorVariant};
use crate::fdiv::{
    all_generators, catalog, inverse_reward_transform, regularizer_score_grad, optimal_policy, pg_loss_gradients,
    pg_weight, reward_transform, sampled_fdiv, topk_fdiv, FGenerator, FName, PgLoss, WeightDirection,
};
use crate::rng::{self, purpose};
use crate::tape::{Gradient, Tape};

const VALUE_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-8;

fn unbiasedness(gen: &FGenerator, pair: &PolicyPair, q: Option<&TopkIndexSet>) -> Result<(f64, f64)> {
    let div = Divergence::F(*gen);
    let (value, grad) = enumerate(pair, pair.sampling().probs(), |slot, p| {
        Ok(match q {
            Some(q) => topk_fdiv(gen, slot, p, q, ClipRange::UNCLIPPED)?,
            None => sampled_fdiv(gen, slot, p, ClipRange::UNCLIPPED)?,
        }
        .expr)
    })?;
    Ok(((value - pair.exact(div)).abs(), grad.max_abs_diff(&pair.exact_grad(div))))
}

fn estimator_audit(cfg: &AuditConfig, gens: &[FGenerator], rep: &mut AuditReport) -> Result<()> {
    let v = cfg.vocab;
    for gen in gens {
        let per = crate::par::map_indexed(cfg.pairs, cfg.exec, |i| -> Result<[f64; 8]> {
            let pair = random_pair(cfg.seed, i, v)?;
            let mut e = [0.0f64; 8];
            (e[0], e[1]) = unbiasedness(gen, &pair, None)?;
            let q = topk_indices(pair.theta().probs(), cfg.topk_k.min(v))?;
            (e[2], e[3]) = unbiasedness(gen, &pair, Some(&q))?;
            let mut r = rng::stream(cfg.seed, i as u64, purpose::INDEX_SET);
            for _ in 0..cfg.arbitrary_sets {
                let (a, b) = unbiasedness(gen, &pair, Some(&random_index_set(&mut r, v)?))?;
                e[2] = e[2].max(a);
                e[3] = e[3].max(b);
            }
            let off = random_off_policy_pair(cfg.seed, i, v)?;
            (e[4], e[5]) = unbiasedness(gen, &off, None)?;
            let tape = Tape::new();
            let slot = TapeSlot::new(&tape, &off);
            let full = topk_indices(off.theta().probs(), v)?;
            let empty = TopkIndexSet::empty(v);
            let clip = ClipRange::REVERSE_DEFAULT;
            for p in 0..v {
                let head = topk_fdiv(gen, &slot, p, &full, clip)?.value();
                e[6] = e[6].max((head - off.exact(Divergence::F(*gen))).abs());
                let tail = topk_fdiv(gen, &slot, p, &empty, clip)?.value();
                e[7] = e[7].max((tail - sampled_fdiv(gen, &slot, p, clip)?.value()).abs());
            }
            Ok(e)
        });
        let mut w = [0.0f64; 8];
        for e in per {
            for (a, b) in w.iter_mut().zip(e?) {
                *a = if b.is_nan() { f64::NAN } else { a.max(b) };
            }
        }
        let t = gen.name().tag();
        rep.push(AuditRow::at_most("fdiv_estimators", format!("{t}_kfpp_value"), w[0], VALUE_TOL));
        rep.push(AuditRow::at_most("fdiv_estimators", format!("{t}_kfpp_grad"), w[1], GRAD_TOL));
        rep.push(AuditRow::at_most("fdiv_estimators", format!("{t}_topk_value"), w[2], VALUE_TOL));
        rep.push(AuditRow::at_most("fdiv_estimators", format!("{t}_topk_grad"), w[3], GRAD_TOL));
        rep.push(AuditRow::at_most("fdiv_estimators", format!("{t}_kfpp_off_policy_value"), w[4], VALUE_TOL));
        rep.push(AuditRow::at_most("fdiv_estimators", format!("{t}_kfpp_off_policy_grad"), w[5], GRAD_TOL));
        rep.push(AuditRow::at_most("fdiv_estimators", format!("{t}_topk_k_eq_v_is_exact"), w[6], 1e-12));
        rep.push(AuditRow::at_most("fdiv_estimators", format!("{t}_topk_k0_is_sampled"), w[7], 0.0));
    }
    Ok(())
}

/// `E_θ[weight(w) ∇log π_θ]` with `w = π*/π_θ`.
fn score_weighted(gen: &FGenerator, theta: &ProbSlot, star: &ProbSlot, dir: WeightDirection) -> Result<Gradient> {
    let v = theta.len();
    let mut g = Gradient::zeros(v);
    for p in 0..v {
        let w = (star.log_prob(p) - theta.log_prob(p)).exp();
        let c = theta.prob(p) * pg_weight(gen, w, dir)?;
        for j in 0..v {
            g.0[j] += c * (if j == p { 1.0 } else { 0.0 } - theta.prob(j));
        }
    }
    Ok(g)
}

/// Tape gradient of `D_f(π* || π_θ) = Σ π_θ f(π*/π_θ)`.
fn star_to_theta_grad(gen: &FGenerator, pair: &PolicyPair) -> Result<Gradient> {
    let tape = Tape::new();
    let slot = TapeSlot::new(&tape, pair);
    let star = pair.reference();
    let terms: Vec<_> = (0..pair.vocab())
        .map(|j| {
            let lp = slot.log_prob(j);
            lp.exp() * gen.f_log_var(-lp + star.log_prob(j))
        })
        .collect();
    slot.grad(tape.sum(&terms))
}

fn weight_audit(cfg: &AuditConfig, gens: &[FGenerator], rep: &mut AuditReport) -> Result<()> {
    for gen in gens {
        let phi = max_over(cfg.pairs, cfg.exec, |i| {
            let pair = random_pair(cfg.seed ^ 0xf1, i, cfg.vocab)?;
            let g = score_weighted(gen, pair.theta(), pair.reference(), WeightDirection::ThetaToStar)?;
            Ok(g.max_abs_diff(&pair.exact_grad(Divergence::F(*gen))))
        })?;
        let psi = max_over(cfg.pairs, cfg.exec, |i| {
            let pair = random_pair(cfg.seed ^ 0xf1, i, cfg.vocab)?;
            let g = score_weighted(gen, pair.theta(), pair.reference(), WeightDirection::StarToTheta)?;
            Ok(g.max_abs_diff(&star_to_theta_grad(gen, &pair)?))
        })?;
        rep.push(AuditRow::at_most("pg_weights", format!("{}_phi_grad_identity", gen.name().tag()), phi, GRAD_TOL));
        rep.push(AuditRow::at_most("pg_weights", format!("{}_psi_grad_identity", gen.name().tag()), psi, GRAD_TOL));
    }
    Ok(())
}

fn optimal_instance(cfg: &AuditConfig, i: usize) -> Result<(Vec<f64>, ProbSlot)> {
    let mut r = rng::stream(cfg.seed, i as u64, purpose::GRADIENT);
    let reference = ProbSlot::from_logits(&gaussian(&mut r, cfg.optimal_vocab))?;
    let rewards = gaussian(&mut r, cfg.optimal_vocab).iter().map(|x| 0.25 * x).collect();
    Ok((rewards, reference))
}

fn optimal_audit(cfg: &AuditConfig, gens: &[FGenerator], rep: &mut AuditReport) -> Result<()> {
    let rkl = catalog(FName::ReverseKl)?;
    let beta = cfg.beta;
    for gen in gens.iter().filter(|g| g.has_inverse()) {
        let per = crate::par::map_indexed(cfg.optimal_instances, cfg.exec, |i| -> Result<Option<[f64; 4]>> {
            let (rewards, reference) = optimal_instance(cfg, i)?;
            let sol = optimal_policy(gen, &rewards, &reference, beta)?;
            let norm = (sol.policy.iter().sum::<f64>() - 1.0).abs();
            // rewards outside the admissible range give a policy with zeros
            let tilde = match reward_transform(gen, &rewards, &reference, beta) {
                Err(Error::Domain(_)) => return Ok(None),
                other => other?,
            };
            let via_rkl = optimal_policy(&rkl, &tilde, &reference, beta)?;
            let forward = sol.total_variation(&via_rkl.policy);
            let star = optimal_policy(&rkl, &rewards, &reference, beta)?;
            let r_f = inverse_reward_transform(gen, &rewards, &reference, beta)?;
            let back = optimal_policy(gen, &r_f, &reference, beta)?;
            Ok(Some([norm, sol.residual.abs(), forward, star.total_variation(&back.policy)]))
        });
        let mut w = [0.0f64; 4];
        let mut skipped = 0;
        for e in per {
            let Some(e) = e? else {
                skipped += 1;
                continue;
            };
            for (a, b) in w.iter_mut().zip(e) {
                *a = if b.is_nan() { f64::NAN } else { a.max(b) };
            }
        }
        let t = gen.name().tag();
        rep.push(AuditRow::report("optimal", format!("{t}_instances_outside_admissible_range"), skipped as f64));
        rep.push(AuditRow::at_most("optimal", format!("{t}_admissible_instances_missing"), f64::from(u8::from(skipped == cfg.optimal_instances)), 0.0));
        rep.push(AuditRow::at_most("optimal", format!("{t}_policy_normalized"), w[0], 1e-10));
        rep.push(AuditRow::at_most("optimal", format!("{t}_normalization_residual"), w[1], 1e-10));
        rep.push(AuditRow::at_most("optimal", format!("{t}_reward_transform_tv"), w[2], 1e-8));
        rep.push(AuditRow::at_most("optimal", format!("{t}_inverse_transform_tv"), w[3], 1e-8));
    }

    // softmax tilt for the reverse KL
    let tilt = max_over(cfg.optimal_instances, cfg.exec, |i| {
        let (rewards, reference) = optimal_instance(cfg, i)?;
        let sol = optimal_policy(&rkl, &rewards, &reference, beta)?;
        let un: Vec<f64> = (0..rewards.len()).map(|j| reference.prob(j) * (rewards[j] / beta).exp()).collect();
        let z: f64 = un.iter().sum();
        Ok(sol.policy.iter().zip(&un).map(|(a, b)| (a - b / z).abs()).fold(0.0, f64::max))
    })?;
    rep.push(AuditRow::at_most("optimal", "rkl_matches_softmax_tilt", tilt, 1e-12));

    let tv = catalog(FName::TotalVariation)?;
    let (rewards, reference) = optimal_instance(cfg, 0)?;
    let unsupported = matches!(optimal_policy(&tv, &rewards, &reference, beta), Err(Error::Unsupported(_)));
    rep.push(AuditRow::at_most("optimal", "tv_optimal_policy_unsupported", f64::from(u8::from(!unsupported)), 0.0));

    // forward-KL transform: increasing and convex in R, inverse concave
    let fkl = catalog(FName::ForwardKl)?;
    let (mut order, mut convex, mut concave) = (0usize, f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..cfg.pairs {
        let mut r = rng::stream(cfg.seed ^ 0x11, i as u64, purpose::GRADIENT);
        let v = cfg.optimal_vocab.max(3);
        let reference = ProbSlot::uniform(v)?;
        let start: f64 = r.random_range(-1.0..0.0);
        let h: f64 = r.random_range(0.05..0.3);
        let rewards: Vec<f64> = (0..v).map(|j| start + h * j as f64).collect();
        let tilde = reward_transform(&fkl, &rewards, &reference, beta)?;
        order += tilde.windows(2).filter(|w| !(w[0] < w[1])).count();
        for w in tilde.windows(3) {
            convex = convex.min(w[0] - 2.0 * w[1] + w[2]);
        }
        let r_f = inverse_reward_transform(&fkl, &rewards, &reference, beta)?;
        for w in r_f.windows(3) {
            concave = concave.max(w[0] - 2.0 * w[1] + w[2]);
        }
    }
    rep.push(AuditRow::at_most("optimal", "fkl_transform_order_violations", order as f64, 0.0));
    rep.push(AuditRow::above("optimal", "fkl_transform_min_second_difference", convex, 0.0));
    rep.push(AuditRow::above("optimal", "fkl_inverse_transform_neg_max_second_difference", -concave, 0.0));
    Ok(())
}

fn pg_audit(cfg: &AuditConfig, rep: &mut AuditReport) -> Result<()> {
    let v = cfg.pg_vocab;
    let per = crate::par::map_indexed(cfg.pg_instances, cfg.exec, |i| -> Result<[f64; 4]> {
        let pair = random_pair(cfg.seed ^ 0x99, i, v)?;
        let mut r = rng::stream(cfg.seed ^ 0x99, i as u64, purpose::GRADIENT);
        let rewards = gaussian(&mut r, v);
        let mut expected: Vec<Gradient> = vec![Gradient::zeros(v); PgLoss::ALL.len()];
        let mut score = Gradient::zeros(v);
        let mut l4_l2: f64 = 0.0;
        for a in 0..v {
            for b in 0..v {
                let group = [a, b];
                let prob = pair.theta().prob(a) * pair.theta().prob(b);
                let grads: Vec<Gradient> = PgLoss::ALL
                    .iter()
                    .map(|&l| pg_loss_gradients(l, &group, &pair, &rewards))
                    .collect::<Result<_>>()?;
                l4_l2 = l4_l2.max(grads[4].max_abs_diff(&grads[1]));
                for (e, g) in expected.iter_mut().zip(&grads) {
                    e.add_scaled(prob, g);
                }
                score.add_scaled(prob, &regularizer_score_grad(&group, &pair)?);
            }
        }
        let [l1, l2, l3, l3pp, _, l5] = [0, 1, 2, 3, 4, 5].map(|k| expected[k].clone());
        let mut sum15 = l1.clone();
        sum15.add_scaled(1.0, &l5);
        let mut sum12 = l1;
        sum12.add_scaled(1.0, &l2);
        Ok([
            l4_l2,
            l3.max_abs_diff(&sum15),
            l3pp.max_abs_diff(&sum12),
            score.max_abs_diff(&pair.exact_grad(Divergence::ReverseKl)),
        ])
    });
    let mut w = [0.0f64; 4];
    for e in per {
        for (a, b) in w.iter_mut().zip(e?) {
            *a = if b.is_nan() { f64::NAN } else { a.max(b) };
        }
    }
    rep.push(AuditRow::at_most("pg_losses", "l4_grad_equals_l2_grad", w[0], 1e-12));
    rep.push(AuditRow::at_most("pg_losses", "expected_l3_equals_l1_plus_l5", w[1], VALUE_TOL));
    rep.push(AuditRow::at_most("pg_losses", "expected_l3pp_equals_l1_plus_l2", w[2], VALUE_TOL));
    rep.push(AuditRow::at_most("pg_losses", "regularizer_score_identity", w[3], VALUE_TOL));
    Ok(())
}

/// Gradient variance of the baselined estimators against their canonical forms.
fn baseline_variance_audit(cfg: &AuditConfig, rep: &mut AuditReport) -> Result<()> {
    let rkl = catalog(FName::ReverseKl)?;
    let fkl = catalog(FName::ForwardKl)?;
    let per = crate::par::map_indexed(cfg.variance_pairs, cfg.exec, |i| -> Result<(f64, f64)> {
        let pair = random_pair(cfg.seed ^ 0x7a, i, cfg.vocab)?;
        let probs = pair.theta().probs();
        let var = |f: &dyn for<'t> Fn(&TapeSlot<'t, '_>, usize) -> Result<crate::Var<'t>>| {
            enumerate_variance(&pair, probs, |s, p| f(s, p)).map(|x| x.1)
        };
        let k4 = var(&|s, p| Ok(sampled_kl(EstimatorVariant::K4, s, p, ClipRange::UNCLIPPED)?.expr))?;
        let rev = var(&|s, p| Ok(sampled_fdiv(&rkl, s, p, ClipRange::UNCLIPPED)?.expr))?;
        let k5 = var(&|s, p| Ok(sampled_kl(EstimatorVariant::K5, s, p, ClipRange::UNCLIPPED)?.expr))?;
        let fwd = var(&|s, p| Ok(sampled_fdiv(&fkl, s, p, ClipRange::UNCLIPPED)?.expr))?;
        Ok((k4 / rev, k5 / fwd))
    });
    let (mut w4, mut w5, mut s4, mut s5) = (0.0f64, 0.0f64, 0usize, 0usize);
    for r in per {
        let (a, b) = r?;
        w4 = w4.max(a);
        w5 = w5.max(b);
        s4 += usize::from(a > 1.0);
        s5 += usize::from(b > 1.0);
    }
    let bound = 1.0 + cfg.variance_slack;
    rep.push(AuditRow::at_most("variance", "k4_over_canonical_rkl_grad_variance", w4, bound));
    rep.push(AuditRow::report("variance", "k4_over_canonical_rkl_strict_violations", s4 as f64));
    rep.push(AuditRow::at_most("variance", "k5_over_canonical_fkl_grad_variance", w5, bound));
    rep.push(AuditRow::report("variance", "k5_over_canonical_fkl_strict_violations", s5 as f64));
    Ok(())
}

/// Generator estimators, PG weights, optimal policies, transforms and PG losses.
pub fn audit_fdiv(cfg: &AuditConfig) -> Result<AuditReport> {
    let gens = all_generators(cfg.alpha)?;
    let mut rep = AuditReport::default();
    estimator_audit(cfg, &gens, &mut rep)?;
    weight_audit(cfg, &gens, &mut rep)?;
    optimal_audit(cfg, &gens, &mut rep)?;
    pg_audit(cfg, &mut rep)?;
    baseline_variance_audit(cfg, &mut rep)?;
    Ok(rep)
}
