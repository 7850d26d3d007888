//! Rollout groups, advantage normalization and the clipped objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowpolicy::{replay_logprob, replay_logprob_grad, sample_sde, PolicyParams, SampledPath, SamplerConfig};
use crate::intent::{rule_label, Intent, NUM_INTENTS};
use crate::reward::{rfs, RfsConfig};
use crate::scalar::{lit, Scalar};
use crate::scene::Scene;

/// Rule assigning conditioning intents to the rollouts of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    Multi,
    SingleGt,
    SinglePredicted,
    SingleTopRater,
    SingleRandom,
}

impl Composition {
    pub const ALL: [Composition; 5] = [
        Composition::Multi,
        Composition::SingleGt,
        Composition::SinglePredicted,
        Composition::SingleTopRater,
        Composition::SingleRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Composition::Multi => "multi",
            Composition::SingleGt => "single-gt",
            Composition::SinglePredicted => "single-predicted",
            Composition::SingleTopRater => "single-top-rater",
            Composition::SingleRandom => "single-random",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Composition::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn is_single(self) -> bool {
        self != Composition::Multi
    }
}

/// Which std the advantage normalization divides by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdMode {
    Population,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub clip_low: f64,
    pub clip_high: f64,
    pub beta: f64,
    pub adv_epsilon: f64,
    pub std_mode: StdMode,
    pub samples_per_intent: usize,
    pub composition: Composition,
    pub learning_rate: f64,
    pub batch_scenes: usize,
    /// Rollout and replay sampler; replay uses the same guidance scale.
    pub sampler: SamplerConfig,
    pub reward: RfsConfig,
    /// Gradient steps per batch of rollouts.
    pub ppo_epochs: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            clip_low: 0.2,
            clip_high: 0.2,
            beta: 0.002,
            adv_epsilon: 1e-6,
            std_mode: StdMode::Population,
            samples_per_intent: 2,
            composition: Composition::Multi,
            learning_rate: 1e-4,
            batch_scenes: 4,
            sampler: SamplerConfig::default(),
            reward: RfsConfig::softmax_dense(0.3),
            ppo_epochs: 1,
        }
    }
}

impl GrpoConfig {
    /// Rollouts per scene: `8 S` for every composition.
    pub fn group_size(&self) -> usize {
        NUM_INTENTS * self.samples_per_intent
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.clip_low) || !unit(self.clip_high) {
            return Err(Error::Config("clip ranges must lie in (0, 1)".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if self.samples_per_intent == 0 || self.batch_scenes == 0 || self.ppo_epochs == 0 {
            return Err(Error::Config("samples_per_intent, batch_scenes and ppo_epochs must be positive".into()));
        }
        if self.sampler.n_steps == 0 || !(self.sampler.noise_level > 0.0) {
            return Err(Error::Config("rollouts need at least one step and positive noise".into()));
        }
        self.reward.validate(crate::geometry::HORIZON, crate::geometry::DT)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub composition: Composition,
    /// Distinct conditioning intents (C).
    pub intents: Vec<Intent>,
    /// Rollouts per intent (S for multi, the full group for single variants).
    pub samples_per_intent: usize,
}

#[derive(Debug, Clone)]
pub struct RolloutGroup<S> {
    pub scene_id: String,
    pub paths: Vec<SampledPath<S>>,
    pub rewards: Vec<S>,
    pub advantages: Vec<S>,
    pub spec: GroupSpec,
}

impl<S> RolloutGroup<S> {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// Conditioning intent of a single-intent composition. `batch_intent` is the
/// per-batch draw used by `single-random`.
pub fn single_intent<S: Scalar>(
    params: &PolicyParams<S>,
    scene: &Scene<S>,
    composition: Composition,
    batch_intent: Intent,
) -> Intent {
    match composition {
        Composition::SingleGt => rule_label(&scene.logged_trajectory),
        Composition::SinglePredicted => params.classifier().predict(&scene.context),
        Composition::SingleTopRater => rule_label(&scene.top_rater().trajectory),
        Composition::SingleRandom => batch_intent,
        Composition::Multi => unreachable!("multi composition spans all intents"),
    }
}

/// `(R - mean) / (std + eps)` within one group.
pub fn normalize_advantages<S: Scalar>(rewards: &[S], eps: S, mode: StdMode) -> Result<Vec<S>> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    let n: S = lit(rewards.len() as f64);
    let mean = rewards.iter().copied().sum::<S>() / n;
    let ss: S = rewards.iter().map(|r| (*r - mean) * (*r - mean)).sum();
    let denom = match mode {
        StdMode::Population => n,
        StdMode::Sample => n - S::one(),
    };
    let std = (ss / denom).sqrt();
    Ok(rewards.iter().map(|r| (*r - mean) / (std + eps)).collect())
}

pub fn draw_batch_intent<R: Rng + ?Sized>(rng: &mut R) -> Intent {
    Intent::ALL[rng.random_range(0..NUM_INTENTS)]
}

/// Samples, scores and normalizes one group.
pub fn build_group<S: Scalar, R: Rng + ?Sized>(
    params: &PolicyParams<S>,
    scene: &Scene<S>,
    cfg: &GrpoConfig,
    batch_intent: Intent,
    rng: &mut R,
) -> Result<RolloutGroup<S>> {
    let spec = if cfg.composition == Composition::Multi {
        GroupSpec {
            composition: cfg.composition,
            intents: Intent::ALL.to_vec(),
            samples_per_intent: cfg.samples_per_intent,
        }
    } else {
        GroupSpec {
            composition: cfg.composition,
            intents: vec![single_intent(params, scene, cfg.composition, batch_intent)],
            samples_per_intent: cfg.group_size(),
        }
    };
    let mut paths = Vec::with_capacity(cfg.group_size());
    for intent in &spec.intents {
        for _ in 0..spec.samples_per_intent {
            paths.push(sample_sde(params, &scene.context, (*intent).into(), &cfg.sampler, rng));
        }
    }
    let rewards = paths
        .iter()
        .map(|p| rfs(&p.trajectory, scene, &cfg.reward))
        .collect::<Result<Vec<S>>>()?;
    let advantages = normalize_advantages(&rewards, lit(cfg.adv_epsilon), cfg.std_mode)?;
    Ok(RolloutGroup {
        scene_id: scene.scene_id.clone(),
        paths,
        rewards,
        advantages,
        spec,
    })
}

/// `-min(rho A, clip(rho, 1 - lo, 1 + hi) A)`.
pub fn clipped_term(rho: f64, adv: f64, lo: f64, hi: f64) -> f64 {
    -(rho * adv).min(rho.clamp(1.0 - lo, 1.0 + hi) * adv)
}

/// Whether the unclipped branch is the active minimum (carries gradient).
pub fn unclipped_active(rho: f64, adv: f64, lo: f64, hi: f64) -> bool {
    rho * adv <= rho.clamp(1.0 - lo, 1.0 + hi) * adv
}

/// `exp(delta) - delta - 1` with `delta = log p_ref - log p`.
pub fn k3(delta: f64) -> f64 {
    delta.exp() - delta - 1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub samples: usize,
    pub skipped: usize,
    pub clipped: usize,
    pub mean_abs_ratio_dev: f64,
    pub max_abs_ratio_dev: f64,
}

#[derive(Debug, Clone)]
pub struct GrpoLoss<S> {
    /// Clipped surrogate averaged over samples, then groups.
    pub surrogate: f64,
    /// Reference penalty averaged the same way (before the beta factor).
    pub ref_penalty: f64,
    pub total: f64,
    /// Gradient of the surrogate alone.
    pub grad_surrogate: Vec<S>,
    /// Gradient of `beta * ref_penalty`.
    pub grad_ref: Vec<S>,
    pub stats: LossStats,
}

impl<S: Scalar> GrpoLoss<S> {
    pub fn grad_total(&self) -> Vec<S> {
        self.grad_surrogate.iter().zip(&self.grad_ref).map(|(a, b)| *a + *b).collect()
    }
}

struct SampleTerm<S> {
    surrogate: f64,
    penalty: f64,
    ratio_dev: f64,
    clipped: bool,
    grad_logp: Vec<S>,
    coeff_s: f64,
    coeff_r: f64,
}

fn sample_term<S: Scalar>(
    params: &PolicyParams<S>,
    ref_params: &PolicyParams<S>,
    path: &SampledPath<S>,
    adv: f64,
    cfg: &GrpoConfig,
) -> Result<Option<SampleTerm<S>>> {
    let mut grad_logp = params.zeros_like();
    let logp = replay_logprob_grad(params, path, S::one(), &mut grad_logp)?.as_f64();
    let logp_ref = replay_logprob(ref_params, path)?.as_f64();
    let rho = (logp - path.path_logprob.as_f64()).exp();
    let delta = logp_ref - logp;
    if !rho.is_finite() || !delta.is_finite() || !delta.exp().is_finite() || grad_logp.iter().any(|g| !g.is_finite()) {
        return Ok(None);
    }
    let active = unclipped_active(rho, adv, cfg.clip_low, cfg.clip_high);
    Ok(Some(SampleTerm {
        surrogate: clipped_term(rho, adv, cfg.clip_low, cfg.clip_high),
        penalty: k3(delta),
        ratio_dev: (rho - 1.0).abs(),
        clipped: !active,
        grad_logp,
        coeff_s: if active { -adv * rho } else { 0.0 },
        coeff_r: cfg.beta * (1.0 - delta.exp()),
    }))
}

/// Loss and exact gradient over a batch of groups. Per-sample terms are
/// averaged within each group and then across groups; samples whose ratio
/// is not finite are dropped and counted.
pub fn grpo_loss<S: Scalar>(
    params: &PolicyParams<S>,
    ref_params: &PolicyParams<S>,
    groups: &[RolloutGroup<S>],
    cfg: &GrpoConfig,
) -> Result<GrpoLoss<S>> {
    use rayon::prelude::*;
    if groups.is_empty() {
        return Err(Error::EmptyInput("GRPO batch has no groups"));
    }
    let per_group: Vec<Vec<Option<SampleTerm<S>>>> = groups
        .par_iter()
        .map(|g| {
            g.paths
                .iter()
                .zip(&g.advantages)
                .map(|(p, a)| sample_term(params, ref_params, p, a.as_f64(), cfg))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let n_groups = groups.len() as f64;
    let mut out = GrpoLoss {
        surrogate: 0.0,
        ref_penalty: 0.0,
        total: 0.0,
        grad_surrogate: params.zeros_like(),
        grad_ref: params.zeros_like(),
        stats: LossStats::default(),
    };
    let mut dev_sum = 0.0;
    for terms in &per_group {
        let kept = terms.iter().flatten().count();
        out.stats.samples += terms.len();
        out.stats.skipped += terms.len() - kept;
        if kept == 0 {
            continue;
        }
        let w = 1.0 / (kept as f64 * n_groups);
        for t in terms.iter().flatten() {
            out.surrogate += w * t.surrogate;
            out.ref_penalty += w * t.penalty;
            dev_sum += t.ratio_dev;
            out.stats.max_abs_ratio_dev = out.stats.max_abs_ratio_dev.max(t.ratio_dev);
            out.stats.clipped += usize::from(t.clipped);
            let (cs, cr): (S, S) = (lit(w * t.coeff_s), lit(w * t.coeff_r));
            for ((gs, gr), g) in out.grad_surrogate.iter_mut().zip(out.grad_ref.iter_mut()).zip(&t.grad_logp) {
                *gs += cs * *g;
                *gr += cr * *g;
            }
        }
    }
    let kept = out.stats.samples - out.stats.skipped;
    if kept == 0 {
        return Err(Error::AllSamplesSkipped(out.stats.skipped));
    }
    out.stats.mean_abs_ratio_dev = dev_sum / kept as f64;
    out.total = out.surrogate + cfg.beta * out.ref_penalty;
    Ok(out)
}
