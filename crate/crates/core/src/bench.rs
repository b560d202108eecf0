//! Synthetic bias-variance sweep for per-token reverse-KL gradients.
//!
//! Each trial draws `π_ref = softmax(z_ref)` and `π = softmax(s z)` with
//! Gaussian logits, tuning `s` so that the top-32 mass of `π` hits a target.
//! Four estimator arms are compared against the exact logit gradient:
//!
//! * `sampled`: mean of `B` draws of `K4`,
//! * `truncated`: exact top-K head only (biased, no draws),
//! * `topk`: exact top-K head plus the mean of `B` masked tail draws,
//! * `exact`: the full-vocabulary sum.
//!
//! Draws for a given `(trial, B)` are shared by every arm and every `K`.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::categorical::{exact_divergence_expr, topk_indices, Divergence, PolicyPair, Sampler, TapeSlot};
use crate::error::{arg, Error, Result};
use crate::estimators::{reverse_head, reverse_tail, sampled_kl, ClipRange, EstimatorVariant, TailForm};
use crate::par::{map_indexed, Execution};
use crate::rng::{self, purpose};
use crate::tape::{Gradient, Tape};

/// Concentration is always measured as top-32 mass.
pub const MASS_K: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTaskSpec {
    pub vocab: usize,
    pub target_mass: f64,
    pub k_list: Vec<usize>,
    pub b_list: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub tail: TailForm,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        SynthTaskSpec {
            vocab: 2000,
            target_mass: 0.8,
            k_list: vec![4, 8, 16, 32],
            b_list: (0..14).map(|i| 1 << i).collect(),
            trials: 200,
            seed: 0,
            tail: TailForm::Canonical,
        }
    }
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < MASS_K + 1 {
            return arg(format!("vocab must exceed {MASS_K}, got {}", self.vocab));
        }
        let uniform = MASS_K as f64 / self.vocab as f64;
        if !(self.target_mass > uniform && self.target_mass < 1.0) {
            return arg(format!(
                "target mass must lie in ({uniform}, 1), got {}",
                self.target_mass
            ));
        }
        if self.k_list.is_empty() || self.b_list.is_empty() || self.trials == 0 {
            return arg("k_list, b_list and trials must be nonempty");
        }
        if let Some(k) = self.k_list.iter().find(|&&k| k == 0 || k > self.vocab) {
            return arg(format!("K={k} outside 1..=V"));
        }
        if self.b_list.contains(&0) {
            return arg("B must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arm {
    Exact,
    Sampled,
    Topk,
    Truncated,
}

impl Arm {
    pub fn tag(self) -> &'static str {
        match self {
            Arm::Exact => "exact",
            Arm::Sampled => "sampled",
            Arm::Topk => "topk",
            Arm::Truncated => "truncated",
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Arm::Exact),
            "sampled" => Ok(Arm::Sampled),
            "topk" => Ok(Arm::Topk),
            "truncated" => Ok(Arm::Truncated),
            other => arg(format!("unknown arm `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelRmseRecord {
    pub arm: Arm,
    /// Head size; 0 for `sampled`, V for `exact`.
    pub k: usize,
    pub b: usize,
    pub m: f64,
    pub vocab: usize,
    pub trials: usize,
    pub rel_rmse: f64,
}

/// Mass of the `k` most probable entries.
pub fn top_mass(probs: &[f64], k: usize) -> f64 {
    let mut sorted = probs.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    sorted.iter().take(k).sum()
}

fn softmax(z: &[f64], s: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (s * (v - max)).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub scale: f64,
    pub mass: f64,
    /// `(s, M32)` at every evaluated scale, in evaluation order.
    pub trace: Vec<(f64, f64)>,
}

/// Bisection on `s ↦ M32(softmax(s z))` to within `1e-3` of `m`.
pub fn calibrate_scale_for(z: &[f64], m: f64) -> Result<Calibration> {
    let mut trace = Vec::new();
    let mut mass = |s: f64| {
        let v = top_mass(&softmax(z, s), MASS_K);
        trace.push((s, v));
        v
    };
    if (mass(0.0) - m).abs() <= 1e-3 {
        return Ok(Calibration {
            scale: 0.0,
            mass: trace[0].1,
            trace,
        });
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut doublings = 0;
    while mass(hi) < m {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return Err(Error::Calibration(format!("top-{MASS_K} mass {m} not reached")));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = mass(mid);
        if (v - m).abs() <= 1e-3 {
            return Ok(Calibration {
                scale: mid,
                mass: v,
                trace,
            });
        }
        if v < m {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Calibration(format!("bisection for mass {m} did not converge")))
}

/// Draw Gaussian logits from `rng` and calibrate their scale.
pub fn calibrate_scale<R: Rng + ?Sized>(m: f64, vocab: usize, rng: &mut R) -> Result<f64> {
    let z: Vec<f64> = (0..vocab).map(|_| StandardNormal.sample(rng)).collect();
    Ok(calibrate_scale_for(&z, m)?.scale)
}

/// One synthetic slot and its exact reverse-KL logit gradient.
pub struct SynthTask {
    pub pair: PolicyPair,
    pub scale: f64,
    pub oracle: Gradient,
}

pub fn synth_task(spec: &SynthTaskSpec, trial: usize) -> Result<SynthTask> {
    let mut r = rng::stream(spec.seed, trial as u64, purpose::BENCH_TASK);
    let z: Vec<f64> = (0..spec.vocab).map(|_| StandardNormal.sample(&mut r)).collect();
    let z_ref: Vec<f64> = (0..spec.vocab).map(|_| StandardNormal.sample(&mut r)).collect();
    let scale = calibrate_scale_for(&z, spec.target_mass)?.scale;
    let logits: Vec<f64> = z.iter().map(|v| scale * v).collect();
    let pair = PolicyPair::from_logits(&logits, &z_ref)?;
    let oracle = pair.exact_grad(Divergence::ReverseKl);
    Ok(SynthTask { pair, scale, oracle })
}

fn layout(spec: &SynthTaskSpec) -> Vec<(Arm, usize, usize)> {
    let mut ks = spec.k_list.clone();
    ks.sort_unstable();
    ks.dedup();
    let mut bs = spec.b_list.clone();
    bs.sort_unstable();
    bs.dedup();
    let mut out = Vec::new();
    for arm in [Arm::Exact, Arm::Sampled, Arm::Topk, Arm::Truncated] {
        let arm_ks = match arm {
            Arm::Exact => vec![spec.vocab],
            Arm::Sampled => vec![0],
            _ => ks.clone(),
        };
        for &k in &arm_ks {
            for &b in &bs {
                out.push((arm, k, b));
            }
        }
    }
    out
}

fn rel_err2(est: &Gradient, oracle: &Gradient) -> f64 {
    let num: f64 = est.0.iter().zip(&oracle.0).map(|(a, b)| (a - b).powi(2)).sum();
    num / oracle.norm().powi(2)
}

/// Squared relative error of every layout cell for one trial.
fn trial_errors(spec: &SynthTaskSpec, cells: &[(Arm, usize, usize)], trial: usize) -> Result<Vec<f64>> {
    let task = synth_task(spec, trial)?;
    let pair = &task.pair;
    let sampler = Sampler::new(pair.theta().probs());
    let clip = ClipRange::UNCLIPPED;

    let mut draws_by_b = std::collections::BTreeMap::new();
    for &(_, _, b) in cells {
        draws_by_b.entry(b).or_insert_with(|| {
            let mut r = rng::substream(spec.seed, trial as u64, b as u64, purpose::BENCH_DRAWS);
            (0..b).map(|_| sampler.sample(&mut r)).collect::<Vec<usize>>()
        });
    }
    let mut head_sets = std::collections::BTreeMap::new();
    for &(arm, k, _) in cells {
        if matches!(arm, Arm::Topk | Arm::Truncated) {
            head_sets.entry(k).or_insert(topk_indices(pair.theta().probs(), k)?);
        }
    }

    let mut out = Vec::with_capacity(cells.len());
    for &(arm, k, b) in cells {
        let tape = Tape::new();
        let slot = TapeSlot::new(&tape, pair);
        let draws = &draws_by_b[&b];
        let expr = match arm {
            Arm::Exact => exact_divergence_expr(&slot, Divergence::ReverseKl),
            Arm::Truncated => tape.sum(&reverse_head(&slot, &head_sets[&k])),
            Arm::Sampled => {
                let terms = draws
                    .iter()
                    .map(|&p| sampled_kl(EstimatorVariant::K4, &slot, p, clip).map(|e| e.expr))
                    .collect::<Result<Vec<_>>>()?;
                tape.sum(&terms) * (1.0 / b as f64)
            }
            Arm::Topk => {
                let q = &head_sets[&k];
                let tails: Vec<_> = draws
                    .iter()
                    .filter(|&&p| !q.contains(p))
                    .map(|&p| reverse_tail(&slot, p, clip, spec.tail))
                    .collect();
                let mut terms = reverse_head(&slot, q);
                terms.push(tape.sum(&tails) * (1.0 / b as f64));
                tape.sum(&terms)
            }
        };
        out.push(rel_err2(&slot.grad(expr)?, &task.oracle));
    }
    Ok(out)
}

/// Full sweep. Rows come out ordered by (estimator, K, B).
pub fn run_sweep(spec: &SynthTaskSpec, exec: Execution) -> Result<Vec<RelRmseRecord>> {
    spec.validate()?;
    let cells = layout(spec);
    let per_trial = map_indexed(spec.trials, exec, |t| trial_errors(spec, &cells, t));
    let mut sums = vec![0.0; cells.len()];
    for errs in per_trial {
        for (acc, e) in sums.iter_mut().zip(errs?) {
            *acc += e;
        }
    }
    Ok(cells
        .iter()
        .zip(sums)
        .map(|(&(arm, k, b), s)| RelRmseRecord {
            arm,
            k,
            b,
            m: spec.target_mass,
            vocab: spec.vocab,
            trials: spec.trials,
            rel_rmse: (s / spec.trials as f64).sqrt(),
        })
        .collect())
}

/// Smallest swept `B` at which the Top-k arm beats the truncated arm for head
/// size `k`, or `None` if it never does.
pub fn critical_sample_size(records: &[RelRmseRecord], k: usize) -> Result<Option<usize>> {
    let curve = |arm| {
        let mut c: Vec<(usize, f64)> = records
            .iter()
            .filter(|r| r.arm == arm && r.k == k)
            .map(|r| (r.b, r.rel_rmse))
            .collect();
        c.sort_by_key(|x| x.0);
        c
    };
    let (topk, trunc) = (curve(Arm::Topk), curve(Arm::Truncated));
    if topk.is_empty() || topk.len() != trunc.len() || topk.iter().zip(&trunc).any(|(a, b)| a.0 != b.0) {
        return arg(format!("records do not hold matching B sweeps for K={k}"));
    }
    Ok(topk.iter().zip(&trunc).find(|(a, b)| a.1 < b.1).map(|(a, _)| a.0))
}

/// Least-squares slope of `log rel_rmse` against `log B` over `B >= b_min`.
pub fn loglog_slope(records: &[RelRmseRecord], arm: Arm, k: usize, b_min: usize) -> Result<f64> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.arm == arm && r.k == k && r.b >= b_min && r.rel_rmse > 0.0)
        .map(|r| ((r.b as f64).ln(), r.rel_rmse.ln()))
        .collect();
    if pts.len() < 2 {
        return arg("need at least two points for a slope");
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

pub const CSV_HEADER: &str = "estimator,K,B,m,V,trials,rel_rmse";

pub fn to_csv(records: &[RelRmseRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:e}",
            r.arm.tag(),
            r.k,
            r.b,
            r.m,
            r.vocab,
            r.trials,
            r.rel_rmse
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration() {
        let mut r = rng::stream(1, 0, purpose::BENCH_TASK);
        let z: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut r)).collect();
        let zero = top_mass(&softmax(&z, 0.0), MASS_K);
        assert!((zero - 32.0 / 2000.0).abs() < 1e-15);
        let cal = calibrate_scale_for(&z, 0.8).unwrap();
        assert!((cal.mass - 0.8).abs() <= 1e-3);
        let mut trace = cal.trace.clone();
        trace.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(trace.windows(2).all(|w| w[1].1 >= w[0].1));
    }

    #[test]
    fn critical_size_edge_cases() {
        let rec = |arm, b, v| RelRmseRecord {
            arm,
            k: 4,
            b,
            m: 0.8,
            vocab: 100,
            trials: 1,
            rel_rmse: v,
        };
        let better = vec![rec(Arm::Topk, 1, 0.1), rec(Arm::Topk, 2, 0.05), rec(Arm::Truncated, 1, 0.5), rec(Arm::Truncated, 2, 0.5)];
        assert_eq!(critical_sample_size(&better, 4).unwrap(), Some(1));
        let worse = vec![rec(Arm::Topk, 1, 0.9), rec(Arm::Topk, 2, 0.8), rec(Arm::Truncated, 1, 0.5), rec(Arm::Truncated, 2, 0.5)];
        assert_eq!(critical_sample_size(&worse, 4).unwrap(), None);
        assert!(critical_sample_size(&worse[..3], 4).is_err());
    }

    #[test]
    fn small_sweep_is_deterministic_and_exact_arm_is_zero() {
        let spec = SynthTaskSpec {
            vocab: 200,
            target_mass: 0.8,
            k_list: vec![4, 32],
            b_list: vec![1, 16, 256],
            trials: 8,
            seed: 3,
            tail: TailForm::Canonical,
        };
        let a = run_sweep(&spec, Execution::Parallel).unwrap();
        let b = run_sweep(&spec, Execution::Sequential).unwrap();
        assert_eq!(to_csv(&a), to_csv(&b));
        for r in a.iter().filter(|r| r.arm == Arm::Exact) {
            assert!(r.rel_rmse < 1e-12);
        }
        let trunc: Vec<f64> = a.iter().filter(|r| r.arm == Arm::Truncated && r.k == 4).map(|r| r.rel_rmse).collect();
        assert!(trunc.iter().all(|&v| v == trunc[0]));
    }
}
