//! Desk-scale EMA policy gradient on enumerable sequence tasks.
//!
//! One step: sample a group of `N` sequences from a frozen copy of the policy,
//! compute group-centred advantages, run `Λ` inner updates of
//! `-J + β KL̂(θ || θ_ema)`, then (every `T_ema` steps) move the anchor
//! `θ_ema ← η θ_ema + (1 - η) θ`.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::categorical::{PolicyPair, ProbSlot, TapeSlot, TopkIndexSet};
use crate::error::{arg, Error, Result};
use crate::estimators::{index_set, ClipRange, EstimatorVariant, TokenKlSpec};
use crate::par::{map_indexed, Execution};
use crate::rng::{self, purpose};
use crate::tape::{Tape, Var};

pub type RewardFn = Arc<dyn Fn(&[usize]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct TaskSpec {
    pub name: String,
    pub vocab: usize,
    pub len: usize,
    pub reward: RewardFn,
}

impl std::fmt::Debug for TaskSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskSpec")
            .field("name", &self.name)
            .field("vocab", &self.vocab)
            .field("len", &self.len)
            .finish()
    }
}

impl TaskSpec {
    /// Reward = fraction of positions holding `target`.
    pub fn target_token(vocab: usize, len: usize, target: usize) -> Result<Self> {
        if vocab < 2 || len == 0 || target >= vocab {
            return arg(format!("invalid target-token task V={vocab} L={len} target={target}"));
        }
        Ok(TaskSpec {
            name: format!("target_token_{target}"),
            vocab,
            len,
            reward: Arc::new(move |y: &[usize]| {
                y.iter().filter(|&&t| t == target).count() as f64 / y.len() as f64
            }),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ModelKind {
    /// One logit row per position.
    #[default]
    Tabular,
    /// One logit row per (position, previous token); position 0 uses context 0.
    Markov,
}

/// Logit table of the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub kind: ModelKind,
    pub vocab: usize,
    pub len: usize,
    pub logits: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(kind: ModelKind, vocab: usize, len: usize) -> Self {
        let rows = match kind {
            ModelKind::Tabular => len,
            ModelKind::Markov => len * vocab,
        };
        PolicyParams {
            kind,
            vocab,
            len,
            logits: vec![0.0; rows * vocab],
        }
    }

    pub fn from_logits(kind: ModelKind, vocab: usize, len: usize, logits: Vec<f64>) -> Result<Self> {
        let p = Self::zeros(kind, vocab, len);
        if logits.len() != p.logits.len() {
            return arg(format!("expected {} logits, got {}", p.logits.len(), logits.len()));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Domain("non-finite logit".into()));
        }
        Ok(PolicyParams { logits, ..p })
    }

    /// Start of the logit row used at position `n` after `prefix`.
    pub fn row_offset(&self, n: usize, prefix: &[usize]) -> usize {
        let row = match self.kind {
            ModelKind::Tabular => n,
            ModelKind::Markov => n * self.vocab + if n == 0 { 0 } else { prefix[n - 1] },
        };
        row * self.vocab
    }

    pub fn row(&self, n: usize, prefix: &[usize]) -> &[f64] {
        let o = self.row_offset(n, prefix);
        &self.logits[o..o + self.vocab]
    }

    pub fn slot(&self, n: usize, prefix: &[usize]) -> Result<ProbSlot> {
        ProbSlot::from_logits(self.row(n, prefix))
    }

    /// `log π(y)` of a whole sequence.
    pub fn sequence_log_prob(&self, y: &[usize]) -> Result<f64> {
        (0..y.len()).map(|n| Ok(self.slot(n, y)?.log_prob(y[n]))).sum()
    }

    pub fn distance(&self, other: &PolicyParams) -> f64 {
        self.logits
            .iter()
            .zip(&other.logits)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Self {
        Optimizer {
            kind,
            lr,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// Descend along `grad`; returns the norm of the applied update.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) -> f64 {
        let mut norm2 = 0.0;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    let d = self.lr * g;
                    *p -= d;
                    norm2 += d * d;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let d = self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                    params[i] -= d;
                    norm2 += d * d;
                }
            }
        }
        norm2.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub group_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub eta: f64,
    pub t_ema: usize,
    pub inner_epochs: usize,
    pub kl: TokenKlSpec,
    pub eps_high: f64,
    pub eps_low: f64,
    pub optimizer: OptimizerKind,
    pub model: ModelKind,
    pub steps: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 64,
            lr: 0.05,
            beta: 0.001,
            eta: 0.9,
            t_ema: 10,
            inner_epochs: 1,
            kl: TokenKlSpec::new(EstimatorVariant::TopkRev, 8),
            eps_high: 0.28,
            eps_low: 0.2,
            optimizer: OptimizerKind::ADAM,
            model: ModelKind::Tabular,
            steps: 500,
            seed: 0,
            exec: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, task: &TaskSpec) -> Result<()> {
        if self.group_size < 2 {
            return arg("group_size must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return arg(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        if self.eps_high < 0.0 || self.eps_low < 0.0 {
            return arg("clip epsilons must be nonnegative");
        }
        if self.t_ema == 0 || self.inner_epochs == 0 {
            return arg("t_ema and inner_epochs must be positive");
        }
        if !(self.lr > 0.0) || !(self.beta >= 0.0) {
            return arg("lr must be positive and beta nonnegative");
        }
        if self.kl.variant.is_topk() && self.kl.k > task.vocab {
            return arg(format!("k={} exceeds V={}", self.kl.k, task.vocab));
        }
        Ok(())
    }
}

/// `A_i = R_i - mean(R)` and the sample standard deviation (`N - 1`).
pub fn grpo_advantages(rewards: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = rewards.len();
    if n < 2 {
        return arg("advantages need at least 2 rewards");
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let a: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    let std = (a.iter().map(|x| x * x).sum::<f64>() / (n - 1) as f64).sqrt();
    Ok((a, std))
}

pub const STD_FLOOR: f64 = 1e-6;

/// Clip-higher mask: drop positive-advantage tokens whose ratio ran above
/// `1 + ε_high` and negative-advantage tokens whose ratio fell below `1 - ε_low`.
pub fn clip_mask(advantage: f64, s: f64, eps_high: f64, eps_low: f64) -> f64 {
    if (advantage > 0.0 && s > 1.0 + eps_high) || (advantage < 0.0 && s < 1.0 - eps_low) {
        0.0
    } else {
        1.0
    }
}

/// One group of rollouts with the frozen per-position sampling distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sequences: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    /// `old[i][n]`: distribution `y_n` of member `i` was drawn from.
    pub old: Vec<Vec<ProbSlot>>,
}

/// Sample `n` sequences position by position. Member `i` of step `step`
/// uses its own stream, so the batch does not depend on scheduling.
pub fn rollout(params: &PolicyParams, task: &TaskSpec, n: usize, seed: u64, step: usize, exec: Execution) -> Result<Batch> {
    let members = map_indexed(n, exec, |i| -> Result<(Vec<usize>, Vec<ProbSlot>)> {
        let mut r = rng::substream(seed, step as u64, i as u64, purpose::ROLLOUT);
        let mut y = Vec::with_capacity(task.len);
        let mut slots = Vec::with_capacity(task.len);
        for pos in 0..task.len {
            let slot = params.slot(pos, &y)?;
            y.push(slot.sample(&mut r));
            slots.push(slot);
        }
        Ok((y, slots))
    });
    let mut batch = Batch {
        sequences: Vec::with_capacity(n),
        rewards: Vec::with_capacity(n),
        old: Vec::with_capacity(n),
    };
    for m in members {
        let (y, slots) = m?;
        batch.rewards.push((task.reward)(&y));
        batch.sequences.push(y);
        batch.old.push(slots);
    }
    Ok(batch)
}

/// Pieces of one evaluation of the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub objective: f64,
    /// `(1/N) Σ_i KL̂_i`.
    pub kl: f64,
    pub grad: Vec<f64>,
    /// Gradient of the `β KL̂` part alone.
    pub kl_grad: Vec<f64>,
    pub masked: usize,
    pub tokens: usize,
}

/// Frozen per-batch context: advantages, std and index sets.
#[derive(Clone, Debug)]
pub struct BatchContext {
    pub advantages: Vec<f64>,
    pub std: f64,
    pub index_sets: Vec<Vec<Option<TopkIndexSet>>>,
}

impl BatchContext {
    /// Index sets are computed once here (from the frozen sampling and anchor
    /// distributions) and reused by every inner epoch.
    pub fn new(batch: &Batch, anchor: &PolicyParams, params: &PolicyParams, kl: &TokenKlSpec) -> Result<Self> {
        let (advantages, std) = grpo_advantages(&batch.rewards)?;
        let mut index_sets = Vec::with_capacity(batch.sequences.len());
        for (y, old) in batch.sequences.iter().zip(&batch.old) {
            let mut row = Vec::with_capacity(y.len());
            for n in 0..y.len() {
                row.push(if kl.variant.is_topk() {
                    let pair = PolicyPair::new(params.row(n, y), anchor.slot(n, y)?)?.with_sampling(old[n].clone())?;
                    let tape = Tape::new();
                    let slot = TapeSlot::new(&tape, &pair);
                    Some(index_set(&slot, kl.k, kl.q_source)?)
                } else {
                    None
                });
            }
            index_sets.push(row);
        }
        Ok(BatchContext {
            advantages,
            std,
            index_sets,
        })
    }
}

/// Value and gradient of `-J + β (1/N) Σ_i KL̂_i` at `params`.
pub fn evaluate_loss(
    params: &PolicyParams,
    anchor: &PolicyParams,
    batch: &Batch,
    ctx: &BatchContext,
    cfg: &TrainConfig,
) -> Result<LossEval> {
    let n_members = batch.sequences.len();
    let len = batch.sequences.first().map_or(0, |y| y.len());
    let scale = 1.0 / (n_members * len) as f64 / ctx.std.max(STD_FLOOR);

    let pairs: Vec<Vec<PolicyPair>> = batch
        .sequences
        .iter()
        .zip(&batch.old)
        .map(|(y, old)| {
            (0..y.len())
                .map(|n| PolicyPair::new(params.row(n, y), anchor.slot(n, y)?)?.with_sampling(old[n].clone()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let tape = Tape::new();
    let theta = tape.params(&params.logits);
    let mut pg_terms: Vec<Var<'_>> = Vec::new();
    let mut kl_terms: Vec<Var<'_>> = Vec::new();
    let mut masked = 0;
    for (i, y) in batch.sequences.iter().enumerate() {
        let a = ctx.advantages[i];
        for n in 0..y.len() {
            let o = params.row_offset(n, y);
            let slot = TapeSlot::with_logits(&pairs[i][n], theta[o..o + params.vocab].to_vec());
            let lp = slot.log_prob(y[n]);
            let s = (lp.value() - batch.old[i][n].log_prob(y[n])).exp();
            let m = clip_mask(a, s, cfg.eps_high, cfg.eps_low);
            if m == 0.0 {
                masked += 1;
            } else {
                pg_terms.push(lp * (s * a * scale));
            }
            let est = match &ctx.index_sets[i][n] {
                Some(q) => match cfg.kl.variant {
                    EstimatorVariant::TopkRev => {
                        crate::estimators::topk_reverse_kl(&slot, y[n], q, cfg.kl.clip, cfg.kl.tail)?
                    }
                    _ => crate::estimators::topk_forward_kl(&slot, y[n], q, cfg.kl.clip, cfg.kl.tail)?,
                },
                None => cfg.kl.estimate(&slot, y[n])?,
            };
            kl_terms.push(est.expr);
        }
    }
    let objective = tape.sum(&pg_terms);
    let kl = tape.sum(&kl_terms) * (1.0 / n_members as f64);
    let kl_part = kl * cfg.beta;
    let loss = kl_part - objective;
    let grad = tape.grad(loss, &theta)?;
    let kl_grad = tape.grad(kl_part, &theta)?;
    if !loss.value().is_finite() || grad.0.iter().any(|g| !g.is_finite()) {
        return Err(Error::Training {
            step: 0,
            reason: format!("non-finite loss {} (objective {}, kl {})", loss.value(), objective.value(), kl.value()),
        });
    }
    Ok(LossEval {
        loss: loss.value(),
        objective: objective.value(),
        kl: kl.value(),
        grad: grad.0,
        kl_grad: kl_grad.0,
        masked,
        tokens: n_members * len,
    })
}

/// Per-step diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub kl_value: f64,
    pub lag_norm: f64,
    pub adv_std: f64,
    pub clip_rate: f64,
    pub loss: f64,
    pub update_norm: f64,
}

/// Inner epochs on one batch, then the anchor update when `step % T_ema == 0`.
pub fn train_step(
    params: &mut PolicyParams,
    ema: &mut PolicyParams,
    opt: &mut Optimizer,
    batch: &Batch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepRecord> {
    let ctx = BatchContext::new(batch, ema, params, &cfg.kl)?;
    let mut first: Option<LossEval> = None;
    let (mut masked, mut tokens) = (0, 0);
    let mut update_norm: f64 = 0.0;
    for _ in 0..cfg.inner_epochs {
        let eval = evaluate_loss(params, ema, batch, &ctx, cfg).map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training { step, reason },
            other => other,
        })?;
        update_norm = update_norm.max(opt.apply(&mut params.logits, &eval.grad));
        masked += eval.masked;
        tokens += eval.tokens;
        first.get_or_insert(eval);
    }
    if step % cfg.t_ema == 0 {
        for (e, p) in ema.logits.iter_mut().zip(&params.logits) {
            *e = cfg.eta * *e + (1.0 - cfg.eta) * p;
        }
    }
    let first = first.expect("at least one inner epoch");
    Ok(StepRecord {
        step,
        mean_reward: batch.rewards.iter().sum::<f64>() / batch.rewards.len() as f64,
        kl_value: first.kl,
        lag_norm: params.distance(ema),
        adv_std: ctx.std,
        clip_rate: masked as f64 / tokens.max(1) as f64,
        loss: first.loss,
        update_norm,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainMetrics {
    pub records: Vec<StepRecord>,
}

pub const METRICS_HEADER: &str = "step,mean_reward,kl_value,lag_norm,adv_std,clip_rate";

impl TrainMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e}",
                r.step, r.mean_reward, r.kl_value, r.lag_norm, r.adv_std, r.clip_rate
            );
        }
        out
    }
}

/// Result of a full run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub metrics: TrainMetrics,
    pub params: PolicyParams,
    pub ema: PolicyParams,
    pub initial: PolicyParams,
}

impl TrainOutcome {
    /// Largest per-slot `KL(π_θ || π_init)` over the tabular rows.
    pub fn max_slot_kl_from_init(&self) -> Result<f64> {
        let v = self.params.vocab;
        let rows = self.params.logits.len() / v;
        let mut worst: f64 = 0.0;
        for r in 0..rows {
            let pair = PolicyPair::from_logits(&self.params.logits[r * v..(r + 1) * v], &self.initial.logits[r * v..(r + 1) * v])?;
            worst = worst.max(pair.exact(crate::categorical::Divergence::ReverseKl));
        }
        Ok(worst)
    }
}

/// Run `cfg.steps` steps from uniform logits.
pub fn train(task: &TaskSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(task, cfg, PolicyParams::zeros(cfg.model, task.vocab, task.len))
}

pub fn train_from(task: &TaskSpec, cfg: &TrainConfig, init: PolicyParams) -> Result<TrainOutcome> {
    cfg.validate(task)?;
    if init.vocab != task.vocab || init.len != task.len {
        return arg("initial parameters do not match the task");
    }
    let mut params = init.clone();
    let mut ema = init.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, params.logits.len());
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = rollout(&params, task, cfg.group_size, cfg.seed, step, cfg.exec)?;
        records.push(train_step(&mut params, &mut ema, &mut opt, &batch, cfg, step)?);
    }
    Ok(TrainOutcome {
        metrics: TrainMetrics { records },
        params,
        ema,
        initial: init,
    })
}

/// Clip range matching the estimator's direction.
pub fn default_clip(variant: EstimatorVariant) -> ClipRange {
    ClipRange::default_for(variant)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages() {
        let (a, std) = grpo_advantages(&[0.3, 0.3, 0.3]).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
        assert_eq!(std, 0.0);
        let (a, std) = grpo_advantages(&[1.0, 0.0]).unwrap();
        assert_eq!(a, vec![0.5, -0.5]);
        assert!((std - 0.5f64.sqrt()).abs() < 1e-15);
        let (a, _) = grpo_advantages(&[0.1, 0.7, 0.25, 0.9]).unwrap();
        assert!(a.iter().sum::<f64>().abs() < 1e-12);
        assert!(grpo_advantages(&[1.0]).is_err());
    }

    #[test]
    fn masks() {
        assert_eq!(clip_mask(1.0, 1.3, 0.28, 0.2), 0.0);
        assert_eq!(clip_mask(-1.0, 0.75, 0.28, 0.2), 0.0);
        assert_eq!(clip_mask(1.0, 1.0, 0.28, 0.2), 1.0);
        assert_eq!(clip_mask(0.0, 5.0, 0.28, 0.2), 1.0);
    }

    #[test]
    fn rollout_properties() {
        let task = TaskSpec::target_token(16, 8, 3).unwrap();
        let mut hot = PolicyParams::zeros(ModelKind::Tabular, 16, 8);
        for n in 0..8 {
            hot.logits[n * 16 + 5] = 800.0;
        }
        let b = rollout(&hot, &task, 10, 1, 1, Execution::Sequential);
        // a one-hot row underflows the other entries, which slots reject
        assert!(b.is_err());
        for n in 0..8 {
            hot.logits[n * 16 + 5] = 60.0;
        }
        let b = rollout(&hot, &task, 10, 1, 1, Execution::Sequential).unwrap();
        assert!(b.sequences.iter().all(|y| y == &vec![5; 8]));

        let uniform = PolicyParams::zeros(ModelKind::Tabular, 16, 8);
        let a = rollout(&uniform, &task, 256, 7, 1, Execution::Parallel).unwrap();
        let b = rollout(&uniform, &task, 256, 7, 1, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        let mean = a.rewards.iter().sum::<f64>() / 256.0;
        assert!((mean - 1.0 / 16.0).abs() < 0.02);
    }

    #[test]
    fn flat_rewards_without_penalty_do_not_move() {
        let task = TaskSpec {
            name: "flat".into(),
            vocab: 4,
            len: 3,
            reward: Arc::new(|_| 0.5),
        };
        let cfg = TrainConfig {
            steps: 3,
            group_size: 8,
            t_ema: 1,
            beta: 0.0,
            kl: TokenKlSpec::new(EstimatorVariant::TopkRev, 2),
            ..TrainConfig::default()
        };
        let init = PolicyParams::from_logits(ModelKind::Tabular, 4, 3, (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let out = train_from(&task, &cfg, init.clone()).unwrap();
        assert_eq!(out.params, init);
        assert!(out.ema.distance(&init) < 1e-14);
    }

    #[test]
    fn steps_zero_is_a_no_op() {
        let task = TaskSpec::target_token(4, 2, 0).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            kl: TokenKlSpec::new(EstimatorVariant::TopkRev, 2),
            ..TrainConfig::default()
        };
        let out = train(&task, &cfg).unwrap();
        assert!(out.metrics.records.is_empty());
        assert_eq!(out.params, out.initial);
    }

    #[test]
    fn ema_schedule_and_frozen_anchor() {
        let task = TaskSpec::target_token(6, 3, 1).unwrap();
        let cfg = TrainConfig {
            steps: 25,
            group_size: 16,
            t_ema: 5,
            eta: 0.5,
            kl: TokenKlSpec::new(EstimatorVariant::TopkRev, 2),
            ..TrainConfig::default()
        };
        let mut params = PolicyParams::zeros(ModelKind::Tabular, 6, 3);
        let mut ema = params.clone();
        let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, params.logits.len());
        for step in 1..=cfg.steps {
            let before = ema.clone();
            let batch = rollout(&params, &task, cfg.group_size, cfg.seed, step, cfg.exec).unwrap();
            train_step(&mut params, &mut ema, &mut opt, &batch, &cfg, step).unwrap();
            if step % cfg.t_ema != 0 {
                assert_eq!(ema, before);
            } else {
                assert_ne!(ema, before);
            }
        }
        let frozen = TrainConfig {
            eta: 1.0,
            steps: 20,
            ..cfg
        };
        let out = train(&task, &frozen).unwrap();
        assert_eq!(out.ema, out.initial);
    }

    #[test]
    fn beta_zero_sgd_is_plain_masked_policy_gradient() {
        let task = TaskSpec::target_token(5, 2, 2).unwrap();
        let cfg = TrainConfig {
            beta: 0.0,
            optimizer: OptimizerKind::Sgd,
            inner_epochs: 1,
            group_size: 6,
            kl: TokenKlSpec::new(EstimatorVariant::TopkRev, 2),
            ..TrainConfig::default()
        };
        let mut params = PolicyParams::from_logits(ModelKind::Tabular, 5, 2, (0..10).map(|i| 0.1 * i as f64).collect()).unwrap();
        let batch = rollout(&params, &task, 6, 3, 1, Execution::Sequential).unwrap();
        let before = params.clone();
        let mut ema = params.clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, cfg.lr, 10);
        train_step(&mut params, &mut ema, &mut opt, &batch, &cfg, 1).unwrap();

        // hand-written score-function gradient: on-policy, s = 1, mask = 1
        let (a, std) = grpo_advantages(&batch.rewards).unwrap();
        let mut expected = before.logits.clone();
        for (i, y) in batch.sequences.iter().enumerate() {
            for n in 0..2 {
                let probs = before.slot(n, y).unwrap();
                for j in 0..5 {
                    let score = if j == y[n] { 1.0 } else { 0.0 } - probs.prob(j);
                    expected[n * 5 + j] += cfg.lr * a[i] * score / (6.0 * 2.0 * std);
                }
            }
        }
        for (x, e) in params.logits.iter().zip(&expected) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn lag_stays_within_geometric_bound() {
        let task = TaskSpec::target_token(8, 4, 0).unwrap();
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 0.5,
            t_ema: 1,
            eta: 0.9,
            steps: 100,
            group_size: 32,
            kl: TokenKlSpec::new(EstimatorVariant::TopkRev, 2),
            ..TrainConfig::default()
        };
        let out = train(&task, &cfg).unwrap();
        let max_update = out.metrics.records.iter().map(|r| r.update_norm).fold(0.0, f64::max);
        let bound = 2.0 * max_update / (1.0 - cfg.eta);
        assert!(out.metrics.records.iter().all(|r| r.lag_norm <= bound));
    }

    fn recorded_batch(cfg: &TrainConfig) -> (TaskSpec, PolicyParams, PolicyParams, Batch) {
        let task = TaskSpec::target_token(6, 3, 2).unwrap();
        let params = PolicyParams::from_logits(ModelKind::Tabular, 6, 3, (0..18).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
        let anchor = PolicyParams::from_logits(ModelKind::Tabular, 6, 3, (0..18).map(|i| 0.5 * (i as f64 * 0.4).sin()).collect()).unwrap();
        let old = PolicyParams::from_logits(ModelKind::Tabular, 6, 3, params.logits.iter().map(|z| z + 0.1).collect()).unwrap();
        let batch = rollout(&old, &task, cfg.group_size, 11, 1, Execution::Sequential).unwrap();
        (task, params, anchor, batch)
    }

    #[test]
    fn kl_part_is_the_token_kl_sum_gradient() {
        for variant in [EstimatorVariant::TopkRev, EstimatorVariant::TopkFwd, EstimatorVariant::K3, EstimatorVariant::K4] {
            let cfg = TrainConfig {
                group_size: 5,
                beta: 0.7,
                kl: TokenKlSpec::new(variant, 3),
                ..TrainConfig::default()
            };
            let (_, params, anchor, batch) = recorded_batch(&cfg);
            let ctx = BatchContext::new(&batch, &anchor, &params, &cfg.kl).unwrap();
            let eval = evaluate_loss(&params, &anchor, &batch, &ctx, &cfg).unwrap();

            let tape = Tape::new();
            let theta = tape.params(&params.logits);
            let mut total = Vec::new();
            for (y, old) in batch.sequences.iter().zip(&batch.old) {
                let pairs: Vec<PolicyPair> = (0..y.len())
                    .map(|n| {
                        PolicyPair::new(params.row(n, y), anchor.slot(n, y).unwrap())
                            .unwrap()
                            .with_sampling(old[n].clone())
                            .unwrap()
                    })
                    .collect();
                let slots: Vec<TapeSlot> = (0..y.len())
                    .map(|n| {
                        let o = params.row_offset(n, y);
                        TapeSlot::with_logits(&pairs[n], theta[o..o + 6].to_vec())
                    })
                    .collect();
                total.push(crate::estimators::token_kl_sum(y, &slots, &cfg.kl).unwrap());
            }
            let kl = tape.sum(&total) * (cfg.beta / 5.0);
            let g = tape.grad(kl, &theta).unwrap();
            assert!((kl.value() - cfg.beta * eval.kl).abs() < 1e-12);
            for (a, b) in g.0.iter().zip(&eval.kl_grad) {
                assert!((a - b).abs() < 1e-12, "{variant}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn fixed_anchor_k3_matches_grpo_k3_loss() {
        let cfg = TrainConfig {
            group_size: 7,
            eta: 1.0,
            beta: 0.3,
            kl: TokenKlSpec::new(EstimatorVariant::K3, 0),
            ..TrainConfig::default()
        };
        let (_, params, anchor, batch) = recorded_batch(&cfg);
        let ctx = BatchContext::new(&batch, &anchor, &params, &cfg.kl).unwrap();
        let eval = evaluate_loss(&params, &anchor, &batch, &ctx, &cfg).unwrap();

        // -1/(N L) Σ s M A/std log π + β/N Σ s (e^{lw} - lw - 1), lw = log π_ref - log π
        let (a, std) = grpo_advantages(&batch.rewards).unwrap();
        let (mut j, mut kl) = (0.0, 0.0);
        for (i, y) in batch.sequences.iter().enumerate() {
            for n in 0..3 {
                let lp = params.slot(n, y).unwrap().log_prob(y[n]);
                let lr = anchor.slot(n, y).unwrap().log_prob(y[n]);
                let s = (lp - batch.old[i][n].log_prob(y[n])).exp();
                j += s * clip_mask(a[i], s, cfg.eps_high, cfg.eps_low) * a[i] / std * lp;
                let lw = lr - lp;
                kl += cfg.kl.clip.apply(s) * (lw.exp() - lw - 1.0);
            }
        }
        let expected = -j / 21.0 + cfg.beta * kl / 7.0;
        assert!((eval.loss - expected).abs() < 1e-12, "{} vs {expected}", eval.loss);

        let task = TaskSpec::target_token(6, 3, 2).unwrap();
        let out = train(&task, &TrainConfig { steps: 3, ..cfg }).unwrap();
        assert_eq!(out.ema, out.initial);
    }
}
