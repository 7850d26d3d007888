//! Rater feedback scoring: hard-max evaluation score, label-softmax training
//! reward, and trust-region hits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{anchor_index, Point, Trajectory};
use crate::scalar::{lit, Scalar};
use crate::scene::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Max,
    Softmax,
    Mean,
}

pub const SPARSE_ANCHORS: [f64; 2] = [3.0, 5.0];
pub const DENSE_ANCHORS: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RfsConfig {
    pub aggregation: Aggregation,
    /// Anchor times in seconds.
    pub anchors: Vec<f64>,
    /// Label-softmax temperature; ignored by the other aggregations.
    pub temperature: f64,
    /// Trust radius grows as `0.5 * a * radius_rate` metres.
    pub radius_rate: f64,
    /// Width of the Gaussian tail outside the trust radius (m).
    pub decay_length: f64,
}

impl Default for RfsConfig {
    fn default() -> Self {
        RfsConfig::standard()
    }
}

impl RfsConfig {
    /// Evaluation score: hard max over raters at the 3 s and 5 s anchors.
    pub fn standard() -> Self {
        RfsConfig {
            aggregation: Aggregation::Max,
            anchors: SPARSE_ANCHORS.to_vec(),
            temperature: 1.0,
            radius_rate: 0.4,
            decay_length: 2.0,
        }
    }

    pub fn softmax_dense(temperature: f64) -> Self {
        RfsConfig {
            aggregation: Aggregation::Softmax,
            anchors: DENSE_ANCHORS.to_vec(),
            temperature,
            ..RfsConfig::standard()
        }
    }

    pub fn softmax_sparse(temperature: f64) -> Self {
        RfsConfig {
            anchors: SPARSE_ANCHORS.to_vec(),
            ..RfsConfig::softmax_dense(temperature)
        }
    }

    pub fn mean_dense() -> Self {
        RfsConfig {
            aggregation: Aggregation::Mean,
            ..RfsConfig::softmax_dense(1.0)
        }
    }

    pub fn max_dense() -> Self {
        RfsConfig {
            anchors: DENSE_ANCHORS.to_vec(),
            ..RfsConfig::standard()
        }
    }

    pub fn trust_radius(&self, anchor: f64) -> f64 {
        0.5 * anchor * self.radius_rate
    }

    pub fn validate(&self, horizon_len: usize, dt: f64) -> Result<()> {
        if self.anchors.is_empty() {
            return Err(Error::Config("reward needs at least one anchor".into()));
        }
        for &a in &self.anchors {
            anchor_index(a, dt, horizon_len)?;
        }
        if self.aggregation == Aggregation::Softmax && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("softmax temperature must be positive, got {}", self.temperature)));
        }
        if !(self.radius_rate >= 0.0 && self.decay_length > 0.0) {
            return Err(Error::Config("trust radius must be non-negative and decay length positive".into()));
        }
        Ok(())
    }
}

/// 1 inside the trust radius, Gaussian tail outside.
pub fn decay<S: Scalar>(dist: S, anchor: f64, cfg: &RfsConfig) -> S {
    let r: S = lit(cfg.trust_radius(anchor));
    if dist <= r {
        return S::one();
    }
    let lambda: S = lit(cfg.decay_length);
    let excess = dist - r;
    (-(excess * excess) / (lit::<S>(2.0) * lambda * lambda)).exp()
}

fn dist<S: Scalar>(a: Point<S>, b: Point<S>) -> S {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Anchor distances `[rater][anchor]` between `traj` and every rater.
pub fn anchor_distances<S: Scalar>(traj: &Trajectory<S>, scene: &Scene<S>, anchors: &[f64]) -> Result<Vec<Vec<S>>> {
    let points: Vec<Point<S>> = anchors.iter().map(|a| traj.anchor_point(lit(*a))).collect::<Result<_>>()?;
    scene
        .raters
        .iter()
        .map(|r| {
            anchors
                .iter()
                .zip(&points)
                .map(|(a, p)| Ok(dist(*p, r.trajectory.anchor_point(lit(*a))?)))
                .collect()
        })
        .collect()
}

/// Softmax of `temperature * labels`, computed with a shifted exponent.
pub fn label_weights<S: Scalar>(labels: &[S], temperature: S) -> Vec<S> {
    let top = labels.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = labels.iter().map(|y| (temperature * (*y - top)).exp()).collect();
    let z: S = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Score of `traj` against the raters of `scene` under `cfg`.
pub fn rfs<S: Scalar>(traj: &Trajectory<S>, scene: &Scene<S>, cfg: &RfsConfig) -> Result<S> {
    let d = anchor_distances(traj, scene, &cfg.anchors)?;
    let decays: Vec<Vec<S>> = d
        .iter()
        .map(|row| row.iter().zip(&cfg.anchors).map(|(x, a)| decay(*x, *a, cfg)).collect())
        .collect();
    let labels: Vec<S> = scene.raters.iter().map(|r| r.label).collect();
    let n_anchors: S = lit(cfg.anchors.len() as f64);
    Ok(match cfg.aggregation {
        Aggregation::Max => labels
            .iter()
            .zip(&decays)
            .map(|(y, row)| *y * row.iter().copied().sum::<S>() / n_anchors)
            .fold(S::zero(), S::max),
        Aggregation::Softmax | Aggregation::Mean => {
            let weights = if cfg.aggregation == Aggregation::Softmax {
                label_weights(&labels, lit(cfg.temperature))
            } else {
                vec![S::one() / lit::<S>(labels.len() as f64); labels.len()]
            };
            let mut total = S::zero();
            for j in 0..cfg.anchors.len() {
                for p in 0..labels.len() {
                    total += weights[p] * labels[p] * decays[p][j];
                }
            }
            total / n_anchors
        }
    })
}

/// Evaluation-side score (hard max, anchors 3 s and 5 s).
pub fn rfs_standard<S: Scalar>(traj: &Trajectory<S>, scene: &Scene<S>) -> S {
    rfs(traj, scene, &RfsConfig::standard()).expect("standard anchors lie within the fixed horizon")
}

/// True when some rater is within the trust radius at every anchor.
pub fn trust_region_hit<S: Scalar>(traj: &Trajectory<S>, scene: &Scene<S>, cfg: &RfsConfig) -> Result<bool> {
    let d = anchor_distances(traj, scene, &cfg.anchors)?;
    Ok(d.iter().any(|row| {
        row.iter()
            .zip(&cfg.anchors)
            .all(|(x, a)| *x <= lit::<S>(cfg.trust_radius(*a)))
    }))
}

/// Fraction of `(trajectory, scene)` pairs hitting the standard trust region.
pub fn trust_region_rate<S: Scalar>(pairs: &[(Trajectory<S>, &Scene<S>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let cfg = RfsConfig::standard();
    let hits = pairs
        .iter()
        .filter(|(t, s)| trust_region_hit(t, s, &cfg).expect("standard anchors lie within the fixed horizon"))
        .count();
    hits as f64 / pairs.len() as f64
}
