//! GRPO training loop, metrics records and output sinks.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::group::{build_group, draw_batch_intent, grpo_loss, GrpoConfig, RolloutGroup};
use crate::error::{Error, Result};
use crate::evalkit::{diversity_report, held_out_eval, DiversityConfig, HeldOutConfig};
use crate::flowpolicy::{save_checkpoint, Checkpoint, PolicyParams};
use crate::hash::derive_seed;
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlSchedule {
    pub iterations: usize,
    pub eval_interval: usize,
    /// Diversity report cadence; 0 disables it.
    pub diversity_interval: usize,
    /// Checkpoint cadence; 0 keeps only the final checkpoint.
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub heldout: HeldOutConfig,
    pub diversity: DiversityConfig,
}

impl Default for RlSchedule {
    fn default() -> Self {
        RlSchedule {
            iterations: 5000,
            eval_interval: 50,
            diversity_interval: 50,
            checkpoint_interval: 500,
            seed: 0,
            heldout: HeldOutConfig::default(),
            diversity: DiversityConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversitySummary {
    pub d1: f64,
    pub d2: f64,
    pub d3_1: f64,
    pub d3_16: f64,
    pub gap: f64,
}

/// One line of the metrics log. Iteration `i` describes the batch consumed
/// by update `i` and evaluations of the parameters after that update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub train_reward: Option<f64>,
    pub loss: Option<f64>,
    pub surrogate: Option<f64>,
    pub kl_penalty: Option<f64>,
    pub mean_abs_ratio_dev: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub skipped: usize,
    pub zero_variance_groups: usize,
    pub heldout_rfs: Option<f64>,
    pub heldout_tr: Option<f64>,
    pub diversity: Option<DiversitySummary>,
}

impl MetricsRecord {
    fn empty(iteration: usize) -> Self {
        MetricsRecord {
            iteration,
            train_reward: None,
            loss: None,
            surrogate: None,
            kl_penalty: None,
            mean_abs_ratio_dev: None,
            clip_fraction: None,
            skipped: 0,
            zero_variance_groups: 0,
            heldout_rfs: None,
            heldout_tr: None,
            diversity: None,
        }
    }
}

/// Receives everything a run produces.
pub trait RlSink<S: Scalar> {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()>;
    fn timing(&mut self, _iteration: usize, _seconds: f64) -> Result<()> {
        Ok(())
    }
    fn checkpoint(&mut self, _iteration: usize, _params: &PolicyParams<S>, _opt: &Adam<S>) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<MetricsRecord>,
}

impl<S: Scalar> RlSink<S> for MemorySink {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.records.push(rec.clone());
        Ok(())
    }
}

/// Writes `metrics.jsonl` (each line tagged with the config digest),
/// `timing.jsonl` and `ckpt-rl-<iter>` files.
/// Wall-clock time only goes to the timing file, so the metrics log of a
/// seeded run is reproducible byte for byte.
pub struct FileSink {
    dir: PathBuf,
    metrics: std::fs::File,
    timing: std::fs::File,
    pub config_json: String,
    pub config_digest: u64,
    pub records: Vec<MetricsRecord>,
}

impl FileSink {
    pub fn create(dir: &Path, config_json: String, config_digest: u64) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            std::fs::File::create(&p).map_err(|e| Error::io(&p, e))
        };
        Ok(FileSink {
            dir: dir.to_path_buf(),
            metrics: open("metrics.jsonl")?,
            timing: open("timing.jsonl")?,
            config_json,
            config_digest,
            records: Vec::new(),
        })
    }

    pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
        dir.join(format!("ckpt-rl-{iteration:06}"))
    }
}

impl<S: Scalar> RlSink<S> for FileSink {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        let mut value = serde_json::to_value(rec).expect("metrics serialize");
        value
            .as_object_mut()
            .expect("metrics record is an object")
            .insert("config_digest".into(), format!("{:016x}", self.config_digest).into());
        let line = value.to_string();
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(self.dir.join("metrics.jsonl"), e))?;
        self.records.push(rec.clone());
        Ok(())
    }

    fn timing(&mut self, iteration: usize, seconds: f64) -> Result<()> {
        writeln!(self.timing, "{{\"iteration\":{iteration},\"wall_seconds\":{seconds}}}")
            .map_err(|e| Error::io(self.dir.join("timing.jsonl"), e))
    }

    fn checkpoint(&mut self, iteration: usize, params: &PolicyParams<S>, opt: &Adam<S>) -> Result<()> {
        let ck = Checkpoint {
            stage: "rl".into(),
            iteration: iteration as u64,
            params: params.clone(),
            optimizer: opt.clone(),
            config_json: self.config_json.clone(),
            config_digest: self.config_digest,
        };
        save_checkpoint(&ck, &FileSink::checkpoint_path(&self.dir, iteration))
    }
}

#[derive(Debug, Clone)]
pub struct RlSummary {
    pub init_heldout: f64,
    pub peak_heldout: f64,
    pub peak_iteration: usize,
    pub final_heldout: Option<f64>,
    pub records: Vec<MetricsRecord>,
}

fn evaluate<S: Scalar>(
    params: &PolicyParams<S>,
    held: &[&Scene<S>],
    sched: &RlSchedule,
    iteration: usize,
    rec: &mut MetricsRecord,
) -> Result<()> {
    if iteration.is_multiple_of(sched.eval_interval.max(1)) {
        let h = held_out_eval(params, held, &sched.heldout)?;
        rec.heldout_rfs = Some(h.rfs_mean);
        rec.heldout_tr = Some(h.trust_region_rate);
    }
    if sched.diversity_interval > 0 && iteration.is_multiple_of(sched.diversity_interval) {
        let d = diversity_report(params, held, &sched.diversity)?;
        rec.diversity = Some(DiversitySummary {
            d1: d.d1,
            d2: d.d2,
            d3_1: d.d3_1,
            d3_16: d.d3_16,
            gap: d.gap,
        });
    }
    Ok(())
}

/// Builds the groups of one batch; each scene draws from its own stream.
pub fn build_batch<S: Scalar>(
    params: &PolicyParams<S>,
    scenes: &[&Scene<S>],
    cfg: &GrpoConfig,
    seed: u64,
    iteration: usize,
) -> Result<Vec<RolloutGroup<S>>> {
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "batch-intent", iteration as u64));
    let batch_intent = draw_batch_intent(&mut batch_rng);
    scenes
        .par_iter()
        .map(|scene| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &scene.scene_id, iteration as u64));
            build_group(params, scene, cfg, batch_intent, &mut rng)
        })
        .collect()
}

/// Runs GRPO from `init` (also the frozen reference policy).
pub fn train_rl<S: Scalar>(
    init: &PolicyParams<S>,
    train: &[&Scene<S>],
    held: &[&Scene<S>],
    cfg: &GrpoConfig,
    sched: &RlSchedule,
    sink: &mut dyn RlSink<S>,
) -> Result<RlSummary> {
    cfg.validate()?;
    if train.is_empty() || held.is_empty() {
        return Err(Error::EmptyInput("RL needs non-empty train and held-out splits"));
    }
    let reference = init.clone();
    let mut params = init.clone();
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        params.len(),
    );
    let flow = params.arch().flow_range();
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(sched.seed, "scene-order", 0));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    let mut records = Vec::new();
    let mut rec = MetricsRecord::empty(0);
    evaluate(&params, held, sched, 0, &mut rec)?;
    sink.record(&rec)?;
    records.push(rec);

    let mut bad_streak = 0;
    for iteration in 1..=sched.iterations {
        let started = Instant::now();
        let mut batch = Vec::with_capacity(cfg.batch_scenes);
        while batch.len() < cfg.batch_scenes.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]]);
            cursor += 1;
        }
        let groups = build_batch(&params, &batch, cfg, sched.seed, iteration)?;
        let mut rec = MetricsRecord::empty(iteration);
        let n_groups = groups.len() as f64;
        rec.train_reward = Some(groups.iter().map(|g| g.rewards.iter().map(|r| r.as_f64()).sum::<f64>() / g.len() as f64).sum::<f64>() / n_groups);
        rec.zero_variance_groups = groups.iter().filter(|g| g.advantages.iter().all(|a| *a == S::zero())).count();

        for epoch in 0..cfg.ppo_epochs {
            let loss = match grpo_loss(&params, &reference, &groups, cfg) {
                Ok(l) if l.total.is_finite() => l,
                Ok(_) | Err(Error::AllSamplesSkipped(_)) => {
                    bad_streak += 1;
                    if bad_streak >= 2 {
                        return Err(Error::NonFiniteLoss(bad_streak));
                    }
                    break;
                }
                Err(e) => return Err(e),
            };
            bad_streak = 0;
            if epoch == 0 {
                rec.loss = Some(loss.total);
                rec.surrogate = Some(loss.surrogate);
                rec.kl_penalty = Some(loss.ref_penalty);
                rec.mean_abs_ratio_dev = Some(loss.stats.mean_abs_ratio_dev);
                let kept = loss.stats.samples - loss.stats.skipped;
                rec.clip_fraction = Some(loss.stats.clipped as f64 / kept as f64);
                rec.skipped = loss.stats.skipped;
            }
            opt.update(params.as_mut_slice(), &loss.grad_total(), flow.clone());
        }
        evaluate(&params, held, sched, iteration, &mut rec)?;
        sink.record(&rec)?;
        sink.timing(iteration, started.elapsed().as_secs_f64())?;
        let last = iteration == sched.iterations;
        if last || (sched.checkpoint_interval > 0 && iteration % sched.checkpoint_interval == 0) {
            sink.checkpoint(iteration, &params, &opt)?;
        }
        records.push(rec);
    }

    let evals: Vec<(usize, f64)> = records.iter().filter_map(|r| r.heldout_rfs.map(|h| (r.iteration, h))).collect();
    let (peak_iteration, peak_heldout) = evals
        .iter()
        .copied()
        .fold((0, f64::NEG_INFINITY), |best, e| if e.1 > best.1 { e } else { best });
    Ok(RlSummary {
        init_heldout: evals[0].1,
        peak_heldout,
        peak_iteration,
        final_heldout: records.last().and_then(|r| r.heldout_rfs),
        records,
    })
}
