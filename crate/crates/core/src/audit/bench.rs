use super::{AuditReport, AuditRow};
use crate::bench::{critical_sample_size, loglog_slope, Arm, RelRmseRecord, SynthTaskSpec};
use crate::error::Result;

/// Smallest `B` used for the sampled-arm slope fit.
pub const SLOPE_MIN_B: usize = 64;
/// Head size compared against the sampled arm.
pub const HEADLINE_K: usize = 32;

fn curve(records: &[RelRmseRecord], arm: Arm, k: usize) -> Vec<(usize, f64)> {
    let mut c: Vec<(usize, f64)> = records
        .iter()
        .filter(|r| r.arm == arm && r.k == k)
        .map(|r| (r.b, r.rel_rmse))
        .collect();
    c.sort_by_key(|x| x.0);
    c
}

/// Shape checks on a finished sweep. Head sizes missing from the sweep are
/// reported and skipped.
pub fn bench_checks(spec: &SynthTaskSpec, records: &[RelRmseRecord]) -> Result<AuditReport> {
    let mut rep = AuditReport::default();
    let sampled = curve(records, Arm::Sampled, 0);

    if spec.k_list.contains(&HEADLINE_K) {
        let topk = curve(records, Arm::Topk, HEADLINE_K);
        let losses = topk.iter().zip(&sampled).filter(|(t, s)| !(t.1 < s.1)).count();
        rep.push(AuditRow::at_most("bench", format!("topk{HEADLINE_K}_not_below_sampled"), losses as f64, 0.0));
    } else {
        rep.push(AuditRow::report("bench", format!("topk{HEADLINE_K}_not_swept"), 1.0));
    }

    for &k in &spec.k_list {
        let t = curve(records, Arm::Truncated, k);
        if let [.., a, b] = t.as_slice() {
            let gap = (a.1 - b.1).abs() / a.1.max(b.1);
            rep.push(AuditRow::at_most("bench", format!("truncated{k}_last_two_rel_gap"), gap, 0.05));
        }
    }

    for k in [4, 8] {
        if spec.k_list.contains(&k) {
            let b = critical_sample_size(records, k)?;
            let found = b.map_or(f64::INFINITY, |b| b as f64);
            rep.push(AuditRow::at_most("bench", format!("critical_b_k{k}"), found, *spec.b_list.iter().max().unwrap_or(&0) as f64));
        }
    }
    for &k in &spec.k_list {
        if let Some(b) = critical_sample_size(records, k)? {
            rep.push(AuditRow::report("bench", format!("critical_b_k{k}_value"), b as f64));
        }
    }

    if sampled.iter().filter(|x| x.0 >= SLOPE_MIN_B).count() >= 2 {
        let slope = loglog_slope(records, Arm::Sampled, 0, SLOPE_MIN_B)?;
        rep.push(AuditRow::at_most("bench", "sampled_loglog_slope_upper", slope, -0.4));
        rep.push(AuditRow::above("bench", "sampled_loglog_slope_lower", slope, -0.6));
    }
    Ok(rep)
}
