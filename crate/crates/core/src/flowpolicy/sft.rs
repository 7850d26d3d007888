//! Flow-matching imitation loss with classifier-free dropout, and the
//! supervised training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Architecture, PolicyParams};
use crate::error::{Error, Result};
use crate::intent::{rule_label, train_classifier, ClassifierReport, ClassifierTraining, Intent, UNCOND_CODE};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::{lit, std_normal, Scalar};
use crate::scene::Scene;

/// One imitation target in normalized flow units.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample<S> {
    pub context: Vec<S>,
    pub target: Vec<S>,
    pub intent: Intent,
}

impl<S: Scalar> SftExample<S> {
    pub fn from_scene(scene: &Scene<S>, arch: &Architecture) -> Self {
        let scale: S = lit(arch.action_scale);
        SftExample {
            context: scene.context.clone(),
            target: scene.logged_trajectory.flatten().iter().map(|v| *v / scale).collect(),
            intent: rule_label(&scene.logged_trajectory),
        }
    }
}

/// Random quantities of one loss evaluation, drawn up front so the loss is a
/// deterministic function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SftDraw<S> {
    pub t: S,
    pub noise: Vec<S>,
    pub code: usize,
}

pub fn draw_sft<S: Scalar, R: Rng + ?Sized>(batch: &[SftExample<S>], p_drop: f64, rng: &mut R) -> Vec<SftDraw<S>> {
    batch
        .iter()
        .map(|ex| {
            let t: S = lit(rng.random::<f64>());
            let noise = (0..ex.target.len()).map(|_| std_normal::<S, _>(rng)).collect();
            let code = if rng.random::<f64>() < p_drop {
                UNCOND_CODE
            } else {
                ex.intent.code()
            };
            SftDraw { t, noise, code }
        })
        .collect()
}

/// Batch-mean of `|v(z_t, t) - u|^2`; adds the exact gradient into `grad`.
pub fn sft_loss_with_draws<S: Scalar>(
    params: &PolicyParams<S>,
    batch: &[SftExample<S>],
    draws: &[SftDraw<S>],
    grad: &mut [S],
) -> Result<S> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("flow-matching batch is empty"));
    }
    let n: S = lit(batch.len() as f64);
    let two: S = lit(2.0);
    let mut loss = S::zero();
    for (ex, d) in batch.iter().zip(draws) {
        let z: Vec<S> = ex
            .target
            .iter()
            .zip(&d.noise)
            .map(|(x, e)| (S::one() - d.t) * *e + d.t * *x)
            .collect();
        let (v, cache) = params.forward(&z, d.t, &ex.context, d.code);
        let mut dv = Vec::with_capacity(v.len());
        for ((vi, x), e) in v.iter().zip(&ex.target).zip(&d.noise) {
            let r = *vi - (*x - *e);
            loss += r * r;
            dv.push(two * r / n);
        }
        params.backward(&cache, &dv, grad);
    }
    Ok(loss / n)
}

pub fn sft_loss<S: Scalar, R: Rng + ?Sized>(
    params: &PolicyParams<S>,
    batch: &[SftExample<S>],
    p_drop: f64,
    rng: &mut R,
) -> Result<(S, Vec<S>)> {
    let draws = draw_sft(batch, p_drop, rng);
    let mut grad = params.zeros_like();
    let loss = sft_loss_with_draws(params, batch, &draws, &mut grad)?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay from `learning_rate` down to this fraction of it.
    pub final_lr_fraction: f64,
    pub p_drop: f64,
    /// Trains every example on the unconditional row (an intent-free baseline).
    pub unconditional: bool,
    pub seed: u64,
    /// Fixed draws used to report loss before and after training.
    pub eval_draws: usize,
    pub classifier: ClassifierTraining,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            steps: 20000,
            batch_size: 64,
            learning_rate: 6e-3,
            final_lr_fraction: 0.02,
            p_drop: 0.1,
            unconditional: false,
            seed: 0,
            eval_draws: 4,
            classifier: ClassifierTraining::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SftReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `(step, minibatch loss)` every `log_every` steps.
    pub loss_trace: Vec<(usize, f64)>,
    pub classifier: ClassifierReport,
}

/// Loss averaged over several fixed draw sets, used to compare parameters.
pub fn evaluation_loss<S: Scalar>(params: &PolicyParams<S>, batch: &[SftExample<S>], p_drop: f64, seed: u64, repeats: usize) -> Result<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = S::zero();
    let mut scratch = params.zeros_like();
    for _ in 0..repeats.max(1) {
        let draws = draw_sft(batch, p_drop, &mut rng);
        total += sft_loss_with_draws(params, batch, &draws, &mut scratch)?;
    }
    Ok(total / lit::<S>(repeats.max(1) as f64))
}

/// Trains the velocity network and the intent classifier from the logged
/// trajectories of `scenes`.
pub fn train_sft<S: Scalar>(
    scenes: &[&Scene<S>],
    arch: Architecture,
    cfg: &SftConfig,
    log_every: usize,
) -> Result<(PolicyParams<S>, Adam<S>, SftReport)> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("no training scenes"));
    }
    if !(0.0..1.0).contains(&cfg.p_drop) {
        return Err(Error::Config(format!("p_drop must lie in [0, 1), got {}", cfg.p_drop)));
    }
    let examples: Vec<SftExample<S>> = scenes.iter().map(|s| SftExample::from_scene(s, &arch)).collect();
    let p_drop = if cfg.unconditional { 1.0 } else { cfg.p_drop };
    let mut params = PolicyParams::init(arch, cfg.seed);
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        params.len(),
    );
    let eval_seed = cfg.seed ^ 0x5eed_e7a1;
    let initial = evaluation_loss(&params, &examples, p_drop, eval_seed, cfg.eval_draws)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut trace = Vec::new();
    let bs = cfg.batch_size.clamp(1, examples.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut batch = Vec::with_capacity(bs);
    let flow = arch.flow_range();
    for step in 0..cfg.steps {
        batch.clear();
        while batch.len() < bs {
            if cursor == order.len() {
                shuffle(&mut order, &mut rng);
                cursor = 0;
            }
            batch.push(examples[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, grad) = sft_loss(&params, &batch, p_drop, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(1));
        }
        if log_every > 0 && step % log_every == 0 {
            trace.push((step, loss.as_f64()));
        }
        let progress = step as f64 / cfg.steps as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.config.learning_rate = cfg.learning_rate * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
        opt.update(params.as_mut_slice(), &grad, flow.clone());
    }
    let final_loss = evaluation_loss(&params, &examples, p_drop, eval_seed, cfg.eval_draws)?;

    let labelled: Vec<(Vec<S>, Intent)> = examples.iter().map(|e| (e.context.clone(), e.intent)).collect();
    let (clf, clf_report) = train_classifier(&labelled, &cfg.classifier)?;
    params.set_classifier(&clf);

    let report = SftReport {
        initial_loss: initial.as_f64(),
        final_loss: final_loss.as_f64(),
        loss_trace: trace,
        classifier: clf_report,
    };
    Ok((params, opt, report))
}

fn shuffle<R: Rng + ?Sized>(v: &mut [usize], rng: &mut R) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intent::{CONTEXT_DIM, NUM_INTENTS};
    use crate::scene::generate_pool;

    fn small_arch() -> Architecture {
        Architecture {
            hidden: 8,
            ..Architecture::default()
        }
    }

    fn toy_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<SftExample<f64>> {
        (0..n)
            .map(|i| SftExample {
                context: (0..CONTEXT_DIM).map(|_| rng.random_range(0.0..1.0)).collect(),
                target: (0..20).map(|_| rng.random_range(-1.0..1.0)).collect(),
                intent: Intent::ALL[i % NUM_INTENTS],
            })
            .collect()
    }

    fn embed_grad_rows(arch: &Architecture, grad: &[f64]) -> Vec<f64> {
        let off = arch.offsets().embed;
        (0..9).map(|r| grad[off + 8 * r..off + 8 * r + 8].iter().map(|g| g.abs()).sum()).collect()
    }

    #[test]
    fn dropout_extremes_route_gradient() {
        let arch = small_arch();
        let p = PolicyParams::<f64>::init(arch, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = toy_batch(&mut rng, 16);
        let (_, g0) = sft_loss(&p, &batch, 0.0, &mut rng).unwrap();
        let rows = embed_grad_rows(&arch, &g0);
        assert_eq!(rows[8], 0.0);
        assert!(rows[..8].iter().all(|r| *r > 0.0));
        let (_, g1) = sft_loss(&p, &batch, 1.0, &mut rng).unwrap();
        let rows = embed_grad_rows(&arch, &g1);
        assert!(rows[..8].iter().all(|r| *r == 0.0));
        assert!(rows[8] > 0.0);
    }

    #[test]
    fn empty_batch_errors() {
        let p = PolicyParams::<f64>::init(small_arch(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sft_loss(&p, &[], 0.1, &mut rng).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let arch = small_arch();
        let p = PolicyParams::<f64>::init(arch, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = toy_batch(&mut rng, 2);
        let draws = draw_sft(&batch, 0.5, &mut rng);
        let mut g = p.zeros_like();
        sft_loss_with_draws(&p, &batch, &draws, &mut g).unwrap();
        let h = 1e-5;
        let mut scratch = p.zeros_like();
        for idx in (0..arch.flow_range().end).step_by(5) {
            let mut a = p.clone();
            a.as_mut_slice()[idx] += h;
            let mut b = p.clone();
            b.as_mut_slice()[idx] -= h;
            let fd = (sft_loss_with_draws(&a, &batch, &draws, &mut scratch).unwrap()
                - sft_loss_with_draws(&b, &batch, &draws, &mut scratch).unwrap())
                / (2.0 * h);
            assert!((fd - g[idx]).abs() <= 1e-4 * fd.abs().max(1e-3), "idx={idx}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn short_training_reduces_loss() {
        let pool = generate_pool::<f64>(40, 9);
        let refs: Vec<&Scene<f64>> = pool.iter().collect();
        let cfg = SftConfig {
            steps: 150,
            batch_size: 16,
            classifier: ClassifierTraining {
                steps: 50,
                ..ClassifierTraining::default()
            },
            ..SftConfig::default()
        };
        let (params, opt, report) = train_sft(&refs, small_arch(), &cfg, 10).unwrap();
        assert!(report.final_loss < report.initial_loss);
        assert_eq!(opt.step, 150);
        assert!(params.is_finite());
        assert_eq!(report.loss_trace.len(), 15);
    }
}
