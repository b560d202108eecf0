//! Flat `key = value` configuration files and `--key value` overrides.

use std::path::Path;

use emapg::audit::AuditConfig;
use emapg::bench::SynthTaskSpec;
use emapg::trainer::{ModelKind, OptimizerKind, TrainConfig};
use emapg::{ClipRange, EstimatorVariant, Execution, QSource, TailForm, TokenKlSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Configuration or argument problem; exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T, UsageError> {
    Err(UsageError(msg.into()))
}

/// Read the file (if any), then apply overrides in order.
pub fn load_table(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Table, UsageError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| UsageError(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<Table>(&text).map_err(|e| UsageError(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
        return usage(format!("config must be flat `key = value` pairs; `{k}` is a table"));
    }
    for (key, raw) in overrides {
        table.insert(key.replace('-', "_"), parse_value(raw));
    }
    Ok(table)
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn resolve<T: DeserializeOwned>(table: Table) -> Result<T, UsageError> {
    table.try_into().map_err(|e: toml::de::Error| UsageError(format!("config: {}", e.message())))
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    #[default]
    Parallel,
    Sequential,
}

impl From<Exec> for Execution {
    fn from(e: Exec) -> Self {
        match e {
            Exec::Parallel => Execution::Parallel,
            Exec::Sequential => Execution::Sequential,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    #[default]
    Canonical,
    Baseline,
}

impl From<Tail> for TailForm {
    fn from(t: Tail) -> Self {
        match t {
            Tail::Canonical => TailForm::Canonical,
            Tail::Baseline => TailForm::Baseline,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum QSrc {
    Sampling,
    Theta,
    Reference,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    #[default]
    Tabular,
    Markov,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorsAudit {
    pub seed: u64,
    pub pairs: usize,
    pub vocab: usize,
    pub arbitrary_sets: usize,
    pub topk_k: usize,
    pub variance_pairs: usize,
    pub variance_vocab: usize,
    pub variance_k: usize,
    pub variance_slack: f64,
    pub sequence_instances: usize,
    pub execution: Exec,
}

impl Default for EstimatorsAudit {
    fn default() -> Self {
        let a = AuditConfig::default();
        EstimatorsAudit {
            seed: a.seed,
            pairs: a.pairs,
            vocab: a.vocab,
            arbitrary_sets: a.arbitrary_sets,
            topk_k: a.topk_k,
            variance_pairs: a.variance_pairs,
            variance_vocab: a.variance_vocab,
            variance_k: a.variance_k,
            variance_slack: a.variance_slack,
            sequence_instances: a.sequence_instances,
            execution: Exec::Parallel,
        }
    }
}

impl EstimatorsAudit {
    pub fn to_core(&self) -> AuditConfig {
        AuditConfig {
            seed: self.seed,
            pairs: self.pairs,
            vocab: self.vocab,
            arbitrary_sets: self.arbitrary_sets,
            topk_k: self.topk_k,
            variance_pairs: self.variance_pairs,
            variance_vocab: self.variance_vocab,
            variance_k: self.variance_k,
            variance_slack: self.variance_slack,
            sequence_instances: self.sequence_instances,
            exec: self.execution.into(),
            ..AuditConfig::default()
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FdivAudit {
    pub seed: u64,
    pub pairs: usize,
    pub vocab: usize,
    pub arbitrary_sets: usize,
    pub topk_k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub optimal_vocab: usize,
    pub optimal_instances: usize,
    pub pg_vocab: usize,
    pub pg_instances: usize,
    pub variance_pairs: usize,
    pub variance_slack: f64,
    pub execution: Exec,
}

impl Default for FdivAudit {
    fn default() -> Self {
        let a = AuditConfig::default();
        FdivAudit {
            seed: a.seed,
            pairs: a.pairs,
            vocab: a.vocab,
            arbitrary_sets: a.arbitrary_sets,
            topk_k: a.topk_k,
            alpha: a.alpha,
            beta: a.beta,
            optimal_vocab: a.optimal_vocab,
            optimal_instances: a.optimal_instances,
            pg_vocab: a.pg_vocab,
            pg_instances: a.pg_instances,
            variance_pairs: a.variance_pairs,
            variance_slack: a.variance_slack,
            execution: Exec::Parallel,
        }
    }
}

impl FdivAudit {
    pub fn to_core(&self) -> AuditConfig {
        AuditConfig {
            seed: self.seed,
            pairs: self.pairs,
            vocab: self.vocab,
            arbitrary_sets: self.arbitrary_sets,
            topk_k: self.topk_k,
            alpha: self.alpha,
            beta: self.beta,
            optimal_vocab: self.optimal_vocab,
            optimal_instances: self.optimal_instances,
            pg_vocab: self.pg_vocab,
            pg_instances: self.pg_instances,
            variance_pairs: self.variance_pairs,
            variance_slack: self.variance_slack,
            exec: self.execution.into(),
            ..AuditConfig::default()
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Dynamics {
    pub seed: u64,
    pub instances: usize,
    pub max_dim: usize,
    pub horizon: usize,
    pub steady_instances: usize,
    pub grid_points: usize,
    pub execution: Exec,
}

impl Default for Dynamics {
    fn default() -> Self {
        let a = AuditConfig::default();
        Dynamics {
            seed: a.seed,
            instances: a.dynamics_instances,
            max_dim: a.max_dim,
            horizon: a.horizon,
            steady_instances: a.steady_instances,
            grid_points: a.grid_points,
            execution: Exec::Parallel,
        }
    }
}

impl Dynamics {
    pub fn to_core(&self) -> Result<AuditConfig, UsageError> {
        if self.max_dim == 0 || self.horizon == 0 || self.grid_points == 0 {
            return usage("max_dim, horizon and grid_points must be positive");
        }
        Ok(AuditConfig {
            seed: self.seed,
            dynamics_instances: self.instances,
            max_dim: self.max_dim,
            horizon: self.horizon,
            steady_instances: self.steady_instances,
            grid_points: self.grid_points,
            exec: self.execution.into(),
            ..AuditConfig::default()
        })
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Bench {
    pub seed: u64,
    pub vocab: usize,
    pub target_mass: f64,
    pub k_list: Vec<usize>,
    pub b_list: Vec<usize>,
    pub trials: usize,
    pub tail: Tail,
    pub execution: Exec,
}

impl Default for Bench {
    fn default() -> Self {
        let s = SynthTaskSpec::default();
        Bench {
            seed: s.seed,
            vocab: s.vocab,
            target_mass: s.target_mass,
            k_list: s.k_list,
            b_list: s.b_list,
            trials: s.trials,
            tail: Tail::Canonical,
            execution: Exec::Parallel,
        }
    }
}

impl Bench {
    pub fn to_core(&self) -> SynthTaskSpec {
        SynthTaskSpec {
            vocab: self.vocab,
            target_mass: self.target_mass,
            k_list: self.k_list.clone(),
            b_list: self.b_list.clone(),
            trials: self.trials,
            seed: self.seed,
            tail: self.tail.into(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Train {
    pub seed: u64,
    pub vocab: usize,
    pub len: usize,
    pub target: usize,
    pub model: Model,
    pub group_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub eta: f64,
    pub t_ema: usize,
    pub inner_epochs: usize,
    pub estimator: String,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_max: Option<f64>,
    pub tail: Tail,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_source: Option<QSrc>,
    pub eps_high: f64,
    pub eps_low: f64,
    pub optimizer: Optimizer,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub execution: Exec,
}

impl Default for Train {
    fn default() -> Self {
        let c = TrainConfig::default();
        Train {
            seed: c.seed,
            vocab: 16,
            len: 8,
            target: 0,
            model: Model::Tabular,
            group_size: c.group_size,
            lr: c.lr,
            beta: c.beta,
            eta: c.eta,
            t_ema: c.t_ema,
            inner_epochs: c.inner_epochs,
            estimator: c.kl.variant.tag().into(),
            k: c.kl.k,
            s_min: None,
            s_max: None,
            tail: Tail::Canonical,
            q_source: None,
            eps_high: c.eps_high,
            eps_low: c.eps_low,
            optimizer: Optimizer::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: c.steps,
            execution: Exec::Parallel,
        }
    }
}

impl Train {
    pub fn to_core(&self) -> Result<TrainConfig, UsageError> {
        let variant: EstimatorVariant = self
            .estimator
            .parse()
            .map_err(|e| UsageError(format!("config: estimator: {e}")))?;
        let default_clip = ClipRange::default_for(variant);
        let clip = ClipRange::new(
            self.s_min.unwrap_or(default_clip.s_min),
            self.s_max.unwrap_or(default_clip.s_max),
        )
        .map_err(|e| UsageError(format!("config: {e}")))?;
        let mut kl = TokenKlSpec::new(variant, self.k).with_clip(clip);
        kl.tail = self.tail.into();
        if let Some(q) = self.q_source {
            kl.q_source = match q {
                QSrc::Sampling => QSource::Sampling,
                QSrc::Theta => QSource::Theta,
                QSrc::Reference => QSource::Reference,
            };
        }
        Ok(TrainConfig {
            group_size: self.group_size,
            lr: self.lr,
            beta: self.beta,
            eta: self.eta,
            t_ema: self.t_ema,
            inner_epochs: self.inner_epochs,
            kl,
            eps_high: self.eps_high,
            eps_low: self.eps_low,
            optimizer: match self.optimizer {
                Optimizer::Adam => OptimizerKind::Adam {
                    beta1: self.adam_beta1,
                    beta2: self.adam_beta2,
                    eps: self.adam_eps,
                },
                Optimizer::Sgd => OptimizerKind::Sgd,
            },
            model: match self.model {
                Model::Tabular => ModelKind::Tabular,
                Model::Markov => ModelKind::Markov,
            },
            steps: self.steps,
            seed: self.seed,
            exec: self.execution.into(),
        })
    }
}
