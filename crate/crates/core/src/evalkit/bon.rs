//! Exact expected best-of-K over empirical sample pools.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowpolicy::{sample_sde, Conditioning, PolicyParams, SamplerConfig};
use crate::hash::derive_seed;
use crate::intent::{rule_label, Intent, NUM_INTENTS};
use crate::reward::rfs_standard;
use crate::scalar::Scalar;
use crate::scene::Scene;

/// How the K proposals of a scene are conditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BonStrategy {
    /// Unconditional sampling.
    Ordinary,
    /// Intent of the logged trajectory.
    Gt,
    /// Intent of the highest-labeled rater.
    TopRater,
    /// Classifier argmax.
    Predicted,
    /// One uniformly drawn intent per scene.
    Random,
    /// Equal budget across all eight intents.
    Pooled,
}

impl BonStrategy {
    pub const ALL: [BonStrategy; 6] = [
        BonStrategy::Ordinary,
        BonStrategy::Gt,
        BonStrategy::TopRater,
        BonStrategy::Predicted,
        BonStrategy::Random,
        BonStrategy::Pooled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BonStrategy::Ordinary => "ordinary",
            BonStrategy::Gt => "gt",
            BonStrategy::TopRater => "top-rater",
            BonStrategy::Predicted => "predicted",
            BonStrategy::Random => "random",
            BonStrategy::Pooled => "pooled-8-intent",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        BonStrategy::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonCurve {
    pub strategy: String,
    pub k_values: Vec<usize>,
    pub expected: Vec<f64>,
    /// Mean standard score of the logged trajectories on the same scenes.
    pub logged_score: f64,
    pub n_scenes: usize,
}

impl BonCurve {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.k_values.iter().position(|v| *v == k).map(|i| self.expected[i])
    }
}

/// `P(max of k draws without replacement from a pool of n is among the
/// m smallest) = C(m, k) / C(n, k)`, built as a running product so that the
/// value is non-increasing in `k` in floating point as well.
fn below_probability(m: usize, k: usize, n: usize) -> f64 {
    if m < k {
        return 0.0;
    }
    let mut q = 1.0;
    for j in 0..k {
        q *= (m - j) as f64 / (n - j) as f64;
    }
    q
}

/// Expected maximum when `k` values are drawn without replacement from each
/// group independently and the union is maximized.
pub fn stratified_best_of_k(groups: &[&[f64]], k: usize) -> Result<f64> {
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return Err(Error::EmptyInput("best-of-K needs non-empty score pools"));
    }
    if let Some(g) = groups.iter().find(|g| g.len() < k) {
        return Err(Error::InsufficientPool {
            available: g.len(),
            requested: k,
        });
    }
    if k == 0 {
        return Err(Error::Config("best-of-K needs K >= 1".into()));
    }
    let sorted: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut v = g.to_vec();
            v.sort_by(f64::total_cmp);
            v
        })
        .collect();
    let mut values: Vec<f64> = sorted.iter().flatten().copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut counts = vec![0usize; sorted.len()];
    let mut expected = values[0];
    for w in values.windows(2) {
        let below: f64 = sorted
            .iter()
            .zip(counts.iter_mut())
            .map(|(g, m)| {
                while *m < g.len() && g[*m] <= w[0] {
                    *m += 1;
                }
                below_probability(*m, k, g.len())
            })
            .product();
        expected += (w[1] - w[0]) * (1.0 - below);
    }
    Ok(expected)
}

/// Expected best-of-K for every requested K over a single pool.
pub fn best_of_k(scores: &[f64], ks: &[usize]) -> Result<Vec<f64>> {
    ks.iter().map(|k| stratified_best_of_k(&[scores], *k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BonConfig {
    /// Samples per scene (single-intent and ordinary strategies).
    pub n_pool: usize,
    pub k_max: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for BonConfig {
    fn default() -> Self {
        BonConfig {
            n_pool: 128,
            k_max: 128,
            sampler: SamplerConfig::default(),
            seed: 7,
        }
    }
}

fn conditioning_for<S: Scalar>(params: &PolicyParams<S>, scene: &Scene<S>, strategy: BonStrategy, rng: &mut ChaCha8Rng) -> Conditioning {
    match strategy {
        BonStrategy::Ordinary => Conditioning::Unconditional,
        BonStrategy::Gt => rule_label(&scene.logged_trajectory).into(),
        BonStrategy::TopRater => rule_label(&scene.top_rater().trajectory).into(),
        BonStrategy::Predicted => params.classifier().predict(&scene.context).into(),
        BonStrategy::Random => Intent::ALL[rng.random_range(0..NUM_INTENTS)].into(),
        BonStrategy::Pooled => unreachable!("pooled draws one group per intent"),
    }
}

/// Standard scores of the sample pool of one scene, one vector per stratum.
pub fn draw_scores<S: Scalar>(params: &PolicyParams<S>, scene: &Scene<S>, strategy: BonStrategy, cfg: &BonConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &scene.scene_id, strategy as u64));
    let draw = |cond: Conditioning, n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n)
            .map(|_| rfs_standard(&sample_sde(params, &scene.context, cond, &cfg.sampler, rng).trajectory, scene).as_f64())
            .collect()
    };
    if strategy == BonStrategy::Pooled {
        let per = cfg.n_pool / NUM_INTENTS;
        Intent::ALL.iter().map(|i| draw((*i).into(), per, &mut rng)).collect()
    } else {
        let cond = conditioning_for(params, scene, strategy, &mut rng);
        vec![draw(cond, cfg.n_pool, &mut rng)]
    }
}

/// K grid: powers of two up to `k_max` (multiples of 8 from 8 for pooled).
pub fn k_grid(strategy: BonStrategy, k_max: usize) -> Vec<usize> {
    let start = if strategy == BonStrategy::Pooled { NUM_INTENTS } else { 1 };
    std::iter::successors(Some(start), |k| Some(k * 2)).take_while(|k| *k <= k_max).collect()
}

pub fn best_of_k_curve<S: Scalar>(
    params: &PolicyParams<S>,
    scenes: &[&Scene<S>],
    strategy: BonStrategy,
    cfg: &BonConfig,
) -> Result<BonCurve> {
    if cfg.n_pool < cfg.k_max {
        return Err(Error::InsufficientPool {
            available: cfg.n_pool,
            requested: cfg.k_max,
        });
    }
    if scenes.is_empty() {
        return Err(Error::EmptyInput("best-of-K needs at least one scene"));
    }
    let ks = k_grid(strategy, cfg.k_max);
    let per_scene: Vec<Vec<f64>> = scenes
        .par_iter()
        .map(|scene| {
            let groups = draw_scores(params, scene, strategy, cfg);
            let refs: Vec<&[f64]> = groups.iter().map(|g| g.as_slice()).collect();
            ks.iter()
                .map(|k| {
                    let per_group = if strategy == BonStrategy::Pooled { k / NUM_INTENTS } else { *k };
                    stratified_best_of_k(&refs, per_group)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let n = scenes.len() as f64;
    let expected = (0..ks.len()).map(|j| per_scene.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    let logged_score = scenes.iter().map(|s| rfs_standard(&s.logged_trajectory, s).as_f64()).sum::<f64>() / n;
    Ok(BonCurve {
        strategy: strategy.name().to_string(),
        k_values: ks,
        expected,
        logged_score,
        n_scenes: scenes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::index::sample;

    #[test]
    fn closed_forms() {
        let pool = [1.0, 5.0, 3.0, 3.0];
        let e = best_of_k(&pool, &[1, 2, 4]).unwrap();
        assert!((e[0] - 3.0).abs() < 1e-12);
        // Pairs: (1,5) (1,3) (1,3) (5,3) (5,3) (3,3) -> maxima 5,3,3,5,5,3.
        assert!((e[1] - 24.0 / 6.0).abs() < 1e-12);
        assert_eq!(e[2], 5.0);
        assert!(best_of_k(&pool, &[5]).is_err());
    }

    #[test]
    fn matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool: Vec<f64> = (0..24).map(|_| rng.random_range(0.0..10.0)).collect();
        for k in [1, 3, 7, 16] {
            let exact = best_of_k(&pool, &[k]).unwrap()[0];
            let trials = 20000;
            let draws: Vec<f64> = (0..trials)
                .map(|_| sample(&mut rng, pool.len(), k).iter().map(|i| pool[i]).fold(f64::MIN, f64::max))
                .collect();
            let mean = draws.iter().sum::<f64>() / trials as f64;
            let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
            let se = (var / trials as f64).sqrt();
            assert!((exact - mean).abs() <= 3.0 * se.max(1e-12), "k={k}: {exact} vs {mean} ± {se}");
        }
    }

    #[test]
    fn stratified_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let groups: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let refs: Vec<&[f64]> = groups.iter().map(|g| g.as_slice()).collect();
        let exact = stratified_best_of_k(&refs, 2).unwrap();
        let trials = 20000;
        let draws: Vec<f64> = (0..trials)
            .map(|_| {
                groups
                    .iter()
                    .flat_map(|g| sample(&mut rng, g.len(), 2).into_iter().map(|i| g[i]).collect::<Vec<_>>())
                    .fold(f64::MIN, f64::max)
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / trials as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        assert!((exact - mean).abs() <= 3.0 * (var / trials as f64).sqrt());
    }

    #[test]
    fn grids() {
        assert_eq!(k_grid(BonStrategy::Gt, 128), vec![1, 2, 4, 8, 16, 32, 64, 128]);
        assert_eq!(k_grid(BonStrategy::Pooled, 128), vec![8, 16, 32, 64, 128]);
        for s in BonStrategy::ALL {
            assert_eq!(BonStrategy::parse(s.name()), Some(s));
        }
    }

    proptest! {
        #[test]
        fn exactly_non_decreasing(pool in prop::collection::vec(0.0f64..10.0, 1..64)) {
            let ks: Vec<usize> = (1..=pool.len()).collect();
            let e = best_of_k(&pool, &ks).unwrap();
            let mean = pool.iter().sum::<f64>() / pool.len() as f64;
            prop_assert!((e[0] - mean).abs() < 1e-9);
            prop_assert!(e.windows(2).all(|w| w[1] >= w[0]));
            let max = pool.iter().copied().fold(f64::MIN, f64::max);
            prop_assert!((e[pool.len() - 1] - max).abs() < 1e-9);
        }

        #[test]
        fn stratified_non_decreasing(groups in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 8), 1..5)) {
            let refs: Vec<&[f64]> = groups.iter().map(|g| g.as_slice()).collect();
            let e: Vec<f64> = (1..=8).map(|k| stratified_best_of_k(&refs, k).unwrap()).collect();
            prop_assert!(e.windows(2).all(|w| w[1] >= w[0]));
        }
    }
}
