use std::fmt::Write as _;

use rand::Rng;

use super::{gaussian, max_over, AuditConfig, AuditReport, AuditRow};
use crate::dynamics::{
    closed_form, iterate, mode_solution, observed_regime, quadratic_kl, regime_of, steady_state, step, DynamicsConfig,
    DynamicsState, FisherSpec, Regime,
};
use crate::error::Result;
use crate::rng::{self, purpose};

pub const GRID_ETAS: [f64; 5] = [0.0, 0.5, 0.9, 0.95, 0.99];
/// `αβλ_max` values probed at `η = 0.9`.
pub const PROBES: [f64; 3] = [0.5, 1.2, 1.9];
const BLOWUP: f64 = 1e6;
const MAX_STEPS: usize = 10_000;

/// One cell of the regime grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeProbe {
    pub eta: f64,
    pub x: f64,
    pub predicted: Regime,
    pub observed: Regime,
}

pub const REGIME_HEADER: &str = "eta,alpha_beta_lambda_max,predicted,observed,match";

impl RegimeProbe {
    pub fn csv(probes: &[RegimeProbe]) -> String {
        let mut out = String::from(REGIME_HEADER);
        out.push('\n');
        for p in probes {
            let _ = writeln!(
                out,
                "{},{:e},{},{},{}",
                p.eta,
                p.x,
                p.predicted.tag(),
                p.observed.tag(),
                p.predicted == p.observed
            );
        }
        out
    }
}

/// `n` points log-spaced over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Simulate the stiffest mode alone (`λ = 1`, `β = 1`, `α = x`, `g = 0`).
pub fn probe(eta: f64, x: f64) -> Result<RegimeProbe> {
    let fisher = FisherSpec::diagonal(vec![1.0])?;
    let cfg = DynamicsConfig::new(x, 1.0, eta, vec![0.0])?;
    let mut s = DynamicsState::new(vec![0.0], vec![1.0]);
    let mut trace = vec![1.0];
    for _ in 0..MAX_STEPS {
        s = step(&s, &cfg, &fisher)?;
        let d = s.delta[0];
        trace.push(d);
        if !d.is_finite() || d.abs() > BLOWUP || d == 0.0 {
            break;
        }
    }
    Ok(RegimeProbe {
        eta,
        x,
        predicted: regime_of(eta, x),
        observed: observed_regime(&trace, BLOWUP),
    })
}

pub fn regime_grid(points: usize) -> Result<Vec<RegimeProbe>> {
    let mut out = Vec::new();
    for eta in GRID_ETAS {
        for x in log_grid(1e-3, 4.0, points) {
            out.push(probe(eta, x)?);
        }
    }
    for x in PROBES {
        out.push(probe(0.9, x)?);
    }
    Ok(out)
}

struct Instance {
    fisher: FisherSpec,
    cfg: DynamicsConfig,
    init: DynamicsState,
}

/// Random stable instance with `αβλ_max` below `stiffness · (1 + η)`.
fn instance(seed: u64, i: usize, max_dim: usize, stiffness: f64) -> Result<Instance> {
    let mut r = rng::stream(seed, i as u64, purpose::FISHER);
    let d = r.random_range(1..=max_dim);
    let fisher = FisherSpec::random(&mut r, d, 1e-3, 10.0)?;
    let eta: f64 = r.random_range(0.0..0.99);
    let x: f64 = r.random_range(0.01..stiffness * (1.0 + eta));
    let beta: f64 = (r.random_range(-1.0f64..1.0) * 10f64.ln()).exp();
    let alpha = x / (beta * fisher.lambda_max());
    let g = gaussian(&mut r, d);
    let init = DynamicsState::new(gaussian(&mut r, d), gaussian(&mut r, d));
    Ok(Instance {
        cfg: DynamicsConfig::new(alpha, beta, eta, g)?,
        fisher,
        init,
    })
}

fn closed_form_audit(cfg: &AuditConfig, rep: &mut AuditReport) -> Result<()> {
    let checkpoints: Vec<usize> = [1, 10, 100, cfg.horizon].into_iter().filter(|&k| k <= cfg.horizon).collect();
    let worst = max_over(cfg.dynamics_instances, cfg.exec, |i| {
        let inst = instance(cfg.seed, i, cfg.max_dim, 0.98)?;
        let mut s = inst.init.clone();
        let mut done = 0;
        let mut worst: f64 = 0.0;
        for &k in &checkpoints {
            s = iterate(&s, &inst.cfg, &inst.fisher, k - done)?;
            done = k;
            worst = worst.max(s.rel_diff(&closed_form(k, &inst.cfg, &inst.fisher, &inst.init)?));
        }
        Ok(worst)
    })?;
    rep.push(AuditRow::at_most("dynamics", "closed_form_vs_iterated_rel", worst, 1e-10));

    let modes = max_over(cfg.dynamics_instances, cfg.exec, |i| {
        let inst = instance(cfg.seed, i, cfg.max_dim.min(16), 0.98)?;
        let k = 37;
        let cf = inst.fisher.project(&closed_form(k, &inst.cfg, &inst.fisher, &inst.init)?.delta);
        let d0 = inst.fisher.project(&inst.init.delta);
        let g = inst.fisher.project(&inst.cfg.g);
        let mut worst: f64 = 0.0;
        for m in 0..inst.fisher.dim() {
            let v = mode_solution(&inst.cfg, inst.fisher.eigenvalues()[m], d0[m], g[m], k)?;
            worst = worst.max((v - cf[m]).abs() / cf.norm().max(1.0));
        }
        Ok(worst)
    })?;
    rep.push(AuditRow::at_most("dynamics", "mode_solution_vs_closed_form", modes, 1e-12));
    Ok(())
}

fn steady_audit(cfg: &AuditConfig, rep: &mut AuditReport) -> Result<()> {
    let converge = max_over(cfg.dynamics_instances.min(20), cfg.exec, |i| {
        let inst = instance(cfg.seed ^ 0x55, i, 16, 0.9)?;
        let ss = steady_state(&inst.cfg, &inst.fisher)?;
        let zero = DynamicsState::new(vec![0.0; inst.fisher.dim()], vec![0.0; inst.fisher.dim()]);
        let end = iterate(&zero, &inst.cfg, &inst.fisher, MAX_STEPS)?;
        Ok((&end.delta - &ss.delta_star).norm() / ss.delta_star.norm().max(1.0))
    })?;
    rep.push(AuditRow::at_most("steady_state", "long_run_lag_vs_delta_star", converge, 1e-8));

    let per = crate::par::map_indexed(cfg.steady_instances, cfg.exec, |i| -> Result<(f64, f64, f64)> {
        let inst = instance(cfg.seed ^ 0x77, i, 16, 0.999)?;
        let ss = steady_state(&inst.cfg, &inst.fisher)?;
        let kl = quadratic_kl(&inst.fisher, &ss.delta_star);
        let trace_gap = inst.fisher.lambda_max() - inst.fisher.trace();
        Ok((
            ss.delta_star.norm() / ss.norm_bound,
            (kl - ss.kl_star).abs() / ss.kl_star.max(1.0),
            trace_gap,
        ))
    });
    let (mut ratio, mut kl_err, mut trace_gap) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    for r in per {
        let (a, b, c) = r?;
        ratio = ratio.max(a);
        kl_err = kl_err.max(b);
        trace_gap = trace_gap.max(c);
    }
    rep.push(AuditRow::at_most("steady_state", "delta_star_norm_over_bound", ratio, 1.0 + 1e-12));
    rep.push(AuditRow::at_most("steady_state", "quadratic_kl_vs_formula", kl_err, 1e-10));
    rep.push(AuditRow::at_most("steady_state", "lambda_max_minus_trace", trace_gap, 1e-12));

    // larger eta, larger quasi-steady KL
    let drops = crate::par::map_indexed(cfg.dynamics_instances, cfg.exec, |i| -> Result<usize> {
        let mut inst = instance(cfg.seed ^ 0x99, i, 16, 0.9)?;
        let x = inst.cfg.alpha * inst.cfg.beta * inst.fisher.lambda_max();
        if x >= 1.0 {
            inst.cfg.alpha *= 0.9 / x;
        }
        let mut last = f64::NEG_INFINITY;
        let mut drops = 0;
        for eta in [0.0, 0.5, 0.9, 0.95, 0.99] {
            inst.cfg.eta = eta;
            let kl = steady_state(&inst.cfg, &inst.fisher)?.kl_star;
            drops += usize::from(kl < last);
            last = kl;
        }
        Ok(drops)
    });
    let drops: usize = drops.into_iter().sum::<Result<usize>>()?;
    rep.push(AuditRow::at_most("steady_state", "kl_star_decreases_in_eta", drops as f64, 0.0));

    let unstable = DynamicsConfig::new(2.0, 1.0, 0.5, vec![1.0])?;
    let refused = steady_state(&unstable, &FisherSpec::diagonal(vec![1.0])?).is_err();
    rep.push(AuditRow::at_most("steady_state", "unstable_config_accepted", f64::from(u8::from(!refused)), 0.0));
    Ok(())
}

/// Closed form, regime grid and steady-state checks.
pub fn audit_dynamics(cfg: &AuditConfig) -> Result<(AuditReport, Vec<RegimeProbe>)> {
    let mut rep = AuditReport::default();
    closed_form_audit(cfg, &mut rep)?;
    let grid = regime_grid(cfg.grid_points)?;
    let mismatches = grid.iter().filter(|p| p.predicted != p.observed).count();
    rep.push(AuditRow::at_most("regimes", "grid_mismatches", mismatches as f64, 0.0));
    for p in grid.iter().filter(|p| p.eta == 0.9 && PROBES.contains(&p.x)) {
        rep.push(AuditRow::at_most(
            "regimes",
            format!("probe_{}_{}", p.x, p.predicted.tag()),
            f64::from(u8::from(p.predicted != p.observed)),
            0.0,
        ));
    }
    steady_audit(cfg, &mut rep)?;
    Ok((rep, grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_probes_classify_as_expected() {
        assert_eq!(probe(0.9, 0.5).unwrap().observed, Regime::StableMonotone);
        assert_eq!(probe(0.9, 1.2).unwrap().observed, Regime::StableOscillatory);
        assert_eq!(probe(0.9, 1.9).unwrap().observed, Regime::Unstable);
        let g = log_grid(1e-3, 4.0, 5);
        assert!((g[0] - 1e-3).abs() < 1e-18 && (g[4] - 4.0).abs() < 1e-12);
    }
}
