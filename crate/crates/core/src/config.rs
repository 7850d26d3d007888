//! Experiment configuration: every tunable of a run, named presets, TOML
//! files and stable digests.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::BonConfig;
use crate::flowpolicy::{Architecture, SftConfig};
use crate::grpo::{Composition, GrpoConfig, RlSchedule};
use crate::hash::fnv1a;
use crate::reward::RfsConfig;

/// Bumped whenever a preset's constants change.
pub const PRESET_VERSION: u32 = 1;

pub const PRESET_NAMES: [&str; 16] = [
    "main",
    "single-gt",
    "single-predicted",
    "single-top-rater",
    "single-random",
    "S1",
    "S2",
    "S3",
    "S4",
    "reward-A",
    "reward-B",
    "reward-C",
    "reward-D",
    "tau-0.5",
    "mean",
    "paper-config",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub n_scenes: usize,
    pub seed: u64,
    pub train_n: usize,
    pub held_n: usize,
    pub split_seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            n_scenes: 438,
            seed: 0,
            train_n: 338,
            held_n: 100,
            split_seed: 43,
        }
    }
}

impl PoolConfig {
    /// Pool of `n` scenes split roughly 77/23 like the default.
    pub fn sized(n: usize) -> Self {
        let held_n = (n * 100 / 438).max(1).min(n.saturating_sub(1));
        PoolConfig {
            n_scenes: n,
            train_n: n - held_n,
            held_n,
            ..PoolConfig::default()
        }
    }

    pub fn digest(&self) -> u64 {
        fnv1a(serde_json::to_string(self).expect("pool config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub preset: String,
    pub preset_version: u32,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub pool: PoolConfig,
    pub arch: Architecture,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub schedule: RlSchedule,
    pub bon: BonConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: "main".into(),
            preset_version: PRESET_VERSION,
            output_dir: PathBuf::from("runs/main"),
            workers: 0,
            pool: PoolConfig::default(),
            arch: Architecture::default(),
            sft: SftConfig::default(),
            grpo: GrpoConfig::default(),
            schedule: RlSchedule::default(),
            bon: BonConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig {
            preset: name.into(),
            output_dir: PathBuf::from("runs").join(name),
            ..ExperimentConfig::default()
        };
        let g = &mut cfg.grpo;
        match name {
            "main" => {}
            "single-gt" | "single-predicted" | "single-top-rater" | "single-random" => {
                g.composition = Composition::parse(name).expect("single composition name");
            }
            "S1" | "S2" | "S3" | "S4" => g.samples_per_intent = name[1..].parse().expect("S digit"),
            "reward-A" => g.reward = RfsConfig::standard(),
            "reward-B" => g.reward = RfsConfig::max_dense(),
            "reward-C" => g.reward = RfsConfig::softmax_sparse(1.0),
            "reward-D" => g.reward = RfsConfig::softmax_dense(1.0),
            "tau-0.5" => g.reward = RfsConfig::softmax_dense(0.5),
            "mean" => g.reward = RfsConfig::mean_dense(),
            "paper-config" => g.learning_rate = 5e-7,
            "smoke" => return Ok(ExperimentConfig::smoke(10)),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {} or smoke",
                    PRESET_NAMES.join(", ")
                )))
            }
        }
        Ok(cfg)
    }

    /// Tiny end-to-end run over `n` scenes.
    pub fn smoke(n: usize) -> Self {
        let mut cfg = ExperimentConfig {
            preset: "smoke".into(),
            output_dir: PathBuf::from("runs/smoke"),
            pool: PoolConfig::sized(n),
            ..ExperimentConfig::default()
        };
        cfg.sft.steps = 60;
        cfg.sft.batch_size = 8;
        cfg.sft.classifier.steps = 200;
        cfg.grpo.batch_scenes = 2;
        cfg.schedule.iterations = 4;
        cfg.schedule.eval_interval = 2;
        cfg.schedule.diversity_interval = 4;
        cfg.schedule.checkpoint_interval = 2;
        cfg.bon.n_pool = 16;
        cfg.bon.k_max = 16;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes to TOML")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("experiment config serializes to JSON")
    }

    /// FNV-1a over the canonical JSON form.
    pub fn digest(&self) -> u64 {
        fnv1a(self.to_json().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pool;
        if p.n_scenes == 0 || p.train_n == 0 || p.held_n == 0 {
            return Err(Error::Config("pool and both splits must be non-empty".into()));
        }
        if p.train_n + p.held_n > p.n_scenes {
            return Err(Error::Config(format!(
                "split {}+{} exceeds pool size {}",
                p.train_n, p.held_n, p.n_scenes
            )));
        }
        if self.sft.steps == 0 || self.sft.batch_size == 0 {
            return Err(Error::Config("SFT needs positive steps and batch size".into()));
        }
        if self.schedule.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        if self.bon.k_max == 0 || self.bon.k_max > self.bon.n_pool {
            return Err(Error::Config("best-of-K needs 0 < k_max <= n_pool".into()));
        }
        self.grpo.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn main_preset_matches_defaults() {
        let cfg = ExperimentConfig::preset("main").unwrap();
        assert_eq!(cfg.grpo.composition, Composition::Multi);
        assert_eq!(cfg.grpo.samples_per_intent, 2);
        assert_eq!(cfg.grpo.group_size(), 16);
        assert_eq!(cfg.grpo.reward, RfsConfig::softmax_dense(0.3));
        assert_eq!((cfg.pool.n_scenes, cfg.pool.train_n, cfg.pool.held_n, cfg.pool.split_seed), (438, 338, 100, 43));
        assert_eq!(cfg.sft.p_drop, 0.1);
    }

    #[test]
    fn every_preset_builds_and_validates() {
        for name in PRESET_NAMES.iter().chain(["smoke"].iter()) {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.preset, *name);
        }
        assert!(ExperimentConfig::preset("S5").is_err());
    }

    #[test]
    fn s4_has_group_of_32() {
        let cfg = ExperimentConfig::preset("S4").unwrap();
        assert_eq!(cfg.grpo.samples_per_intent, 4);
        assert_eq!(cfg.grpo.group_size(), 32);
    }

    #[test]
    fn compositions_share_pool_digest() {
        let main = ExperimentConfig::preset("main").unwrap();
        for name in ["single-gt", "single-predicted", "single-top-rater", "single-random"] {
            let other = ExperimentConfig::preset(name).unwrap();
            assert_eq!(other.pool.digest(), main.pool.digest());
            assert_ne!(other.digest(), main.digest());
            let mut same = other.clone();
            same.grpo.composition = Composition::Multi;
            same.preset = main.preset.clone();
            same.output_dir = main.output_dir.clone();
            assert_eq!(same, main);
        }
    }

    #[test]
    fn toml_round_trip() {
        for name in PRESET_NAMES {
            let cfg = ExperimentConfig::preset(name).unwrap();
            let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.digest(), cfg.digest());
        }
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[grpo]\nbeta = 0.01\n").unwrap();
        assert_eq!(cfg.grpo.beta, 0.01);
        assert_eq!(cfg.grpo.clip_low, 0.2);
        assert_eq!(cfg.pool, PoolConfig::default());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(ExperimentConfig::from_toml_str("[grpo]\nbetta = 0.01\n").is_err());
        assert!(ExperimentConfig::from_toml_str("colour = 1\n").is_err());
    }

    #[test]
    fn invalid_split_rejected() {
        let err = ExperimentConfig::from_toml_str("[pool]\nn_scenes = 10\ntrain_n = 8\nheld_n = 5\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
