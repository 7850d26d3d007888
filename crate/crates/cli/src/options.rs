//! Flags, config resolution and `--set` overrides.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use intentflow::config::ExperimentConfig;
use intentflow::reward::RfsConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad input: flags, files, configs. Exit code 1.
    User(String),
    /// Anything else. Exit code 2.
    Internal(String),
}

impl From<intentflow::Error> for CliError {
    fn from(e: intentflow::Error) -> Self {
        if e.is_user_error() {
            CliError::User(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn user<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::User(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "intentflow", version, about = "Intent-conditioned flow policies and multi-intent GRPO on synthetic driving scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scene pool and split and print pool statistics.
    GenData(GenDataArgs),
    /// Stage 1: flow matching with CFG dropout, plus the intent classifier.
    Sft(SftArgs),
    /// Stage 2: GRPO from an SFT checkpoint.
    Rl(RlArgs),
    /// Held-out evaluation, best-of-K curves, diversity and export.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Named preset (main, single-gt, S1..S4, reward-A..D, tau-0.5, mean, paper-config, smoke).
    #[arg(long, default_value = "main")]
    pub preset: String,
    /// TOML experiment config; replaces the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config field, e.g. `--set grpo.beta=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (default runs/<preset>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scene pool file; default `<out>/pool.jsonl` if present, else generated.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Pool size; the split is scaled to match.
    #[arg(long)]
    pub n_scenes: Option<usize>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Training-side reward: standard, max-dense, softmax-dense, softmax-sparse or mean-dense.
    #[arg(long)]
    pub reward: Option<String>,
    /// Label-softmax temperature of the training-side reward.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SftArgs {
    #[command(flatten)]
    pub common: Common,
    /// Skip the intent-free baseline used for ordinary sampling.
    #[arg(long)]
    pub no_ordinary: bool,
    /// Print the minibatch loss every N steps (0 = never).
    #[arg(long, default_value_t = 1000)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct RlArgs {
    #[command(flatten)]
    pub common: Common,
    /// SFT checkpoint (default `<out>/ckpt-sft`).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Group composition: multi, single-gt, single-predicted, single-top-rater, single-random.
    #[arg(long)]
    pub composition: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Run directory (default `<out>/rl`).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Policy checkpoint (default `<out>/ckpt-sft`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Intent-free baseline for ordinary sampling (default `<out>/ckpt-sft-ordinary`).
    #[arg(long)]
    pub ordinary: Option<PathBuf>,
    /// Best-of-K curves for all six strategies.
    #[arg(long)]
    pub bon: bool,
    /// Diversity report.
    #[arg(long)]
    pub diversity: bool,
    /// Analysis export directory (default `<out>/analysis`).
    #[arg(long)]
    pub export: Option<PathBuf>,
    /// RL run directory for the init-vs-peak block (default `<out>/rl` if present).
    #[arg(long)]
    pub run: Option<PathBuf>,
}

pub fn reward_variant(name: &str, tau: Option<f64>) -> CliResult<RfsConfig> {
    let t = tau.unwrap_or(0.3);
    Ok(match name {
        "standard" => RfsConfig::standard(),
        "max-dense" => RfsConfig::max_dense(),
        "softmax-dense" => RfsConfig::softmax_dense(t),
        "softmax-sparse" => RfsConfig::softmax_sparse(t),
        "mean-dense" => RfsConfig::mean_dense(),
        other => return user(format!("unknown reward variant {other:?}")),
    })
}

/// Sets a dotted key inside a TOML document. The value is parsed as TOML and
/// falls back to a plain string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        return user(format!("--set expects KEY=VALUE, got {assignment:?}"));
    };
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        table = match table.get_mut(*part) {
            Some(toml::Value::Table(t)) => t,
            _ => return user(format!("--set: {key:?} is not a config field")),
        };
    }
    let last = parts[parts.len() - 1];
    if !table.contains_key(last) {
        return user(format!("--set: {key:?} is not a config field"));
    }
    table.insert(last.to_string(), value);
    Ok(())
}

pub fn resolve_config(c: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(&c.preset)?,
    };
    if let Some(n) = c.n_scenes {
        if n < 2 {
            return user("--n-scenes needs at least 2 scenes");
        }
        cfg.pool = intentflow::config::PoolConfig {
            seed: cfg.pool.seed,
            split_seed: cfg.pool.split_seed,
            ..intentflow::config::PoolConfig::sized(n)
        };
    }
    if let Some(s) = c.split_seed {
        cfg.pool.split_seed = s;
    }
    if let Some(r) = &c.reward {
        cfg.grpo.reward = reward_variant(r, c.tau)?;
    } else if let Some(t) = c.tau {
        cfg.grpo.reward.temperature = t;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    if !c.overrides.is_empty() {
        let mut doc = toml::Table::try_from(&cfg).map_err(|e| CliError::Internal(e.to_string()))?;
        for o in &c.overrides {
            apply_override(&mut doc, o)?;
        }
        cfg = doc.try_into().map_err(|e: toml::de::Error| CliError::User(format!("--set: {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn or_default(path: &Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| dir.join(name))
}
