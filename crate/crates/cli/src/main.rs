//! `emapg`: run the audits, the synthetic benchmark and the toy trainer from
//! flat TOML configs.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use emapg::audit::{self, AuditReport, EstimatorClaim, RegimeProbe};
use emapg::trainer::{self, TaskSpec};
use emapg::{bench, rng};
use serde::Serialize;

use config::UsageError;

#[derive(Parser)]
#[command(name = "emapg", version, about = "KL estimator and reference-policy laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact-enumeration audit of the KL estimators.
    AuditEstimators(RunArgs),
    /// Audit of the f-divergence estimators, weights, optima and losses.
    AuditFdiv(RunArgs),
    /// Relative-RMSE sweep of Top-k against sampled estimation.
    Bench(RunArgs),
    /// Reference-lag dynamics: closed form, regimes and steady state.
    Dynamics(RunArgs),
    /// Train a toy policy with a group-relative objective and a KL penalty.
    Train(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::AuditEstimators(_) => "audit-estimators",
            Command::AuditFdiv(_) => "audit-fdiv",
            Command::Bench(_) => "bench",
            Command::Dynamics(_) => "dynamics",
            Command::Train(_) => "train",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::AuditEstimators(a)
            | Command::AuditFdiv(a)
            | Command::Bench(a)
            | Command::Dynamics(a)
            | Command::Train(a) => a,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default `out/<subcommand>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Further `--key value` pairs, applied over the config file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

enum Failure {
    Usage(String),
    Audit(Vec<String>),
    Runtime(anyhow::Error),
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<emapg::Error> for Failure {
    fn from(e: emapg::Error) -> Self {
        match e {
            emapg::Error::Argument(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

/// Split `--key value` / `--key=value` tokens. Known flags may also appear here.
fn split_overrides(raw: &[String]) -> Result<Vec<(String, String)>, UsageError> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(tok) = it.next() {
        let Some(key) = tok.strip_prefix("--").filter(|k| !k.is_empty()) else {
            return Err(UsageError(format!("expected `--key value`, found `{tok}`")));
        };
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| UsageError(format!("missing value for `--{key}`")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

struct Resolved {
    table: toml::Table,
    seed: Option<u64>,
    out: PathBuf,
}

fn resolve_args(cmd: &Command) -> Result<Resolved, UsageError> {
    let args = cmd.args();
    let mut config = args.config.clone();
    let mut seed = args.seed;
    let mut out = args.out.clone();
    let mut rest = Vec::new();
    for (k, v) in split_overrides(&args.overrides)? {
        match k.as_str() {
            "config" => config = Some(PathBuf::from(v)),
            "out" => out = Some(PathBuf::from(v)),
            "seed" => seed = Some(v.parse().map_err(|_| UsageError(format!("invalid seed `{v}`")))?),
            _ => rest.push((k, v)),
        }
    }
    let mut table = config::load_table(config.as_deref(), &rest)?;
    if seed.is_some() {
        table.remove("seed");
    }
    let out = out.unwrap_or_else(|| Path::new("out").join(cmd.name()));
    Ok(Resolved { table, seed, out })
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    subcommand: &'a str,
    version: &'a str,
    seed: u64,
    generator: &'a str,
    files: Vec<&'a str>,
    config: &'a C,
}

struct Output {
    dir: PathBuf,
    files: Vec<&'static str>,
}

impl Output {
    fn new(dir: PathBuf) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Output { dir, files: Vec::new() })
    }

    fn write(&mut self, name: &'static str, body: &str) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        self.files.push(name);
        Ok(())
    }

    fn manifest<C: Serialize>(&mut self, subcommand: &str, seed: u64, config: &C) -> anyhow::Result<()> {
        let files = self.files.clone();
        let m = Manifest {
            subcommand,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            generator: rng::GENERATOR,
            files,
            config,
        };
        let body = toml::to_string(&m).context("serializing manifest")?;
        self.write("manifest.toml", &body)
    }
}

fn verdict(name: &str, rep: &AuditReport) -> Result<(), Failure> {
    let failed: Vec<String> = rep
        .failures()
        .into_iter()
        .map(|r| format!("{}/{}: observed {:e}, bound {:e}", r.suite, r.check, r.observed, r.bound))
        .collect();
    let total = rep.rows.len();
    if failed.is_empty() {
        println!("{name}: {total} checks passed");
        Ok(())
    } else {
        println!("{name}: {} of {total} checks failed", failed.len());
        Err(Failure::Audit(failed))
    }
}

fn with_seed<T>(mut cfg: T, seed: Option<u64>, set: impl Fn(&mut T, u64)) -> T {
    if let Some(s) = seed {
        set(&mut cfg, s);
    }
    cfg
}

fn run(cmd: &Command) -> Result<(), Failure> {
    let r = resolve_args(cmd)?;
    let name = cmd.name();
    match cmd {
        Command::AuditEstimators(_) => {
            let cfg = with_seed(config::resolve::<config::EstimatorsAudit>(r.table)?, r.seed, |c, s| c.seed = s);
            let (rep, claims) = audit::audit_estimators(&cfg.to_core())?;
            let mut out = Output::new(r.out)?;
            out.write("claims.csv", &EstimatorClaim::csv(&claims))?;
            out.write("checks.csv", &rep.to_csv())?;
            out.manifest(name, cfg.seed, &cfg)?;
            verdict(name, &rep)
        }
        Command::AuditFdiv(_) => {
            let cfg = with_seed(config::resolve::<config::FdivAudit>(r.table)?, r.seed, |c, s| c.seed = s);
            let rep = audit::audit_fdiv(&cfg.to_core())?;
            let mut out = Output::new(r.out)?;
            out.write("checks.csv", &rep.to_csv())?;
            out.manifest(name, cfg.seed, &cfg)?;
            verdict(name, &rep)
        }
        Command::Dynamics(_) => {
            let cfg = with_seed(config::resolve::<config::Dynamics>(r.table)?, r.seed, |c, s| c.seed = s);
            let (rep, grid) = audit::audit_dynamics(&cfg.to_core()?)?;
            let mut out = Output::new(r.out)?;
            out.write("regimes.csv", &RegimeProbe::csv(&grid))?;
            out.write("checks.csv", &rep.to_csv())?;
            out.manifest(name, cfg.seed, &cfg)?;
            verdict(name, &rep)
        }
        Command::Bench(_) => {
            let cfg = with_seed(config::resolve::<config::Bench>(r.table)?, r.seed, |c, s| c.seed = s);
            let spec = cfg.to_core();
            let records = bench::run_sweep(&spec, cfg.execution.into())?;
            let rep = audit::bench_checks(&spec, &records)?;
            let mut out = Output::new(r.out)?;
            out.write("rel_rmse.csv", &bench::to_csv(&records))?;
            out.write("checks.csv", &rep.to_csv())?;
            out.manifest(name, cfg.seed, &cfg)?;
            verdict(name, &rep)
        }
        Command::Train(_) => {
            let cfg = with_seed(config::resolve::<config::Train>(r.table)?, r.seed, |c, s| c.seed = s);
            let task = TaskSpec::target_token(cfg.vocab, cfg.len, cfg.target)?;
            let core = cfg.to_core()?;
            let outcome = trainer::train(&task, &core)?;
            let mut out = Output::new(r.out)?;
            out.write("metrics.csv", &outcome.metrics.to_csv())?;
            out.manifest(name, cfg.seed, &cfg)?;
            if let Some(last) = outcome.metrics.records.last() {
                println!(
                    "train: {} steps, final mean reward {:.4}, kl {:.4e}",
                    last.step, last.mean_reward, last.kl_value
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Audit(rows)) => {
            for row in rows {
                eprintln!("FAIL {row}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_tokens() {
        let raw: Vec<String> = ["--lr", "0.1", "--k=4"].iter().map(|s| s.to_string()).collect();
        let got = split_overrides(&raw).unwrap();
        assert_eq!(got, vec![("lr".into(), "0.1".into()), ("k".into(), "4".into())]);
        assert!(split_overrides(&["--lr".to_string()]).is_err());
        assert!(split_overrides(&["lr".to_string()]).is_err());
    }
}
