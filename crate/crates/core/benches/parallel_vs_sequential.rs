use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use emapg::audit::{audit_estimators, AuditConfig};
use emapg::bench::{run_sweep, SynthTaskSpec};
use emapg::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn sweep(c: &mut Criterion) {
    let spec = SynthTaskSpec {
        vocab: 500,
        trials: 32,
        k_list: vec![8, 32],
        b_list: vec![64, 512],
        ..SynthTaskSpec::default()
    };
    let mut group = c.benchmark_group("relrmse_sweep");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| run_sweep(&spec, exec).unwrap())
        });
    }
    group.finish();
}

fn estimator_audit(c: &mut Criterion) {
    let mut group = c.benchmark_group("estimator_audit");
    group.sample_size(10);
    for (name, exec) in MODES {
        let cfg = AuditConfig {
            exec,
            ..AuditConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| audit_estimators(cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, sweep, estimator_audit);
criterion_main!(benches);
