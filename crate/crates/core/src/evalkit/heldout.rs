//! Deployment-style held-out evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowpolicy::{sample_sde, PolicyParams, SamplerConfig};
use crate::hash::derive_seed;
use crate::intent::{rule_label, Intent};
use crate::reward::{rfs_standard, trust_region_hit, RfsConfig};
use crate::scalar::Scalar;
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeldOutConfig {
    /// Deployment decode; noise 0 gives the deterministic ODE.
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for HeldOutConfig {
    fn default() -> Self {
        HeldOutConfig {
            sampler: SamplerConfig::default().deterministic(),
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene_id: String,
    pub intent: Intent,
    pub rfs: f64,
    pub trust_region: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutReport {
    pub rfs_mean: f64,
    pub trust_region_rate: f64,
    pub per_scene: Vec<SceneEval>,
}

/// Classifier-selected intent, one guided decode per scene, standard score.
pub fn held_out_eval<S: Scalar>(params: &PolicyParams<S>, scenes: &[&Scene<S>], cfg: &HeldOutConfig) -> Result<HeldOutReport> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("held-out evaluation needs at least one scene"));
    }
    let standard = RfsConfig::standard();
    let clf = params.classifier();
    let per_scene: Vec<SceneEval> = scenes
        .par_iter()
        .map(|scene| {
            let intent = clf.predict(&scene.context);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &scene.scene_id, 0));
            let traj = sample_sde(params, &scene.context, intent.into(), &cfg.sampler, &mut rng).trajectory;
            Ok(SceneEval {
                scene_id: scene.scene_id.clone(),
                intent,
                rfs: rfs_standard(&traj, scene).as_f64(),
                trust_region: trust_region_hit(&traj, scene, &standard)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = per_scene.len() as f64;
    Ok(HeldOutReport {
        rfs_mean: per_scene.iter().map(|s| s.rfs).sum::<f64>() / n,
        trust_region_rate: per_scene.iter().filter(|s| s.trust_region).count() as f64 / n,
        per_scene,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentMatch {
    pub matched: usize,
    pub total: usize,
    pub rate: f64,
}

/// Decodes every admissible intent of every scene and counts decodes whose
/// rule label equals the conditioning intent.
pub fn intent_match<S: Scalar>(params: &PolicyParams<S>, scenes: &[&Scene<S>], cfg: &HeldOutConfig) -> Result<IntentMatch> {
    let hits: Vec<(usize, usize)> = scenes
        .par_iter()
        .map(|scene| {
            let mut matched = 0;
            for intent in &scene.admissible_intents {
                let seed = derive_seed(cfg.seed, &scene.scene_id, intent.code() as u64 + 1);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let traj = sample_sde(params, &scene.context, (*intent).into(), &cfg.sampler, &mut rng).trajectory;
                matched += usize::from(rule_label(&traj) == *intent);
            }
            (matched, scene.admissible_intents.len())
        })
        .collect();
    let (matched, total) = hits.iter().fold((0, 0), |a, h| (a.0 + h.0, a.1 + h.1));
    if total == 0 {
        return Err(Error::EmptyInput("intent match needs at least one scene"));
    }
    Ok(IntentMatch {
        matched,
        total,
        rate: matched as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowpolicy::Architecture;
    use crate::scene::generate_pool;

    #[test]
    fn repeatable_and_consistent_with_direct_mean() {
        let p = PolicyParams::<f64>::init(
            Architecture {
                hidden: 8,
                ..Architecture::default()
            },
            1,
        );
        let pool = generate_pool::<f64>(12, 2);
        let refs: Vec<&Scene<f64>> = pool.iter().collect();
        let cfg = HeldOutConfig::default();
        let a = held_out_eval(&p, &refs, &cfg).unwrap();
        let b = held_out_eval(&p.clone(), &refs, &cfg).unwrap();
        assert_eq!(a, b);
        let mut total = 0.0;
        for e in &a.per_scene {
            total += e.rfs;
        }
        assert!((a.rfs_mean - total / 12.0).abs() < 1e-12);
        assert!(held_out_eval(&p, &[], &cfg).is_err());
    }

    #[test]
    fn intent_match_recount() {
        let p = PolicyParams::<f64>::init(
            Architecture {
                hidden: 8,
                ..Architecture::default()
            },
            4,
        );
        let pool = generate_pool::<f64>(10, 8);
        let refs: Vec<&Scene<f64>> = pool.iter().collect();
        let cfg = HeldOutConfig::default();
        let m = intent_match(&p, &refs, &cfg).unwrap();
        assert_eq!(m.total, pool.iter().map(|s| s.admissible_intents.len()).sum::<usize>());
        let mut matched = 0;
        for s in &pool {
            for i in &s.admissible_intents {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &s.scene_id, i.code() as u64 + 1));
                let t = sample_sde(&p, &s.context, (*i).into(), &cfg.sampler, &mut rng).trajectory;
                matched += usize::from(rule_label(&t) == *i);
            }
        }
        assert_eq!(m.matched, matched);
        assert!(intent_match(&p, &[], &cfg).is_err());
    }
}
