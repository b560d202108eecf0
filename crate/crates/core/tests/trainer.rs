use emapg::trainer::{train, ModelKind, TaskSpec, TrainConfig};
use emapg::{EstimatorVariant, TokenKlSpec};

#[test]
fn default_run_learns_target_token() {
    let task = TaskSpec::target_token(16, 8, 3).unwrap();
    let cfg = TrainConfig::default();
    let out = train(&task, &cfg).unwrap();
    let r = &out.metrics.records;
    assert_eq!(r.len(), 500);
    let best = r.iter().map(|x| x.mean_reward).fold(0.0, f64::max);
    assert!(best > 0.5);
    assert!(r.iter().all(|x| x.kl_value.is_finite() && x.lag_norm.is_finite()));
}

#[test]
fn strong_fixed_anchor_keeps_policy_near_init() {
    let task = TaskSpec::target_token(16, 8, 3).unwrap();
    let cfg = TrainConfig {
        beta: 10.0,
        eta: 1.0,
        steps: 200,
        ..TrainConfig::default()
    };
    let out = train(&task, &cfg).unwrap();
    let kl = out.max_slot_kl_from_init().unwrap();
    assert!(kl < 0.05, "{kl}");
    assert_eq!(out.ema, out.initial);
}

#[test]
fn markov_model_and_forward_estimator_run() {
    let task = TaskSpec::target_token(6, 4, 0).unwrap();
    let cfg = TrainConfig {
        model: ModelKind::Markov,
        kl: TokenKlSpec::new(EstimatorVariant::TopkFwd, 3),
        steps: 60,
        group_size: 32,
        ..TrainConfig::default()
    };
    let out = train(&task, &cfg).unwrap();
    assert_eq!(out.params.logits.len(), 4 * 6 * 6);
    let r = &out.metrics.records;
    assert!(r[59].mean_reward > r[0].mean_reward);
}

#[test]
fn runs_are_deterministic_across_execution_modes() {
    let task = TaskSpec::target_token(8, 4, 1).unwrap();
    let base = TrainConfig {
        steps: 20,
        group_size: 16,
        kl: TokenKlSpec::new(EstimatorVariant::K3, 0),
        ..TrainConfig::default()
    };
    let a = train(&task, &base).unwrap();
    let b = train(&task, &TrainConfig { exec: emapg::Execution::Sequential, ..base.clone() }).unwrap();
    assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
    assert_eq!(a.params, b.params);
}
