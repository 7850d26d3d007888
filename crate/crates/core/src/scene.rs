//! Synthetic multimodal driving scenes with rater annotations, the
//! hash-based train/held-out split, and line-delimited pool files.
//!
//! Every scene admits one to three maneuvers. Each admissible maneuver gets a
//! kinematic template plus a smooth random perturbation; a subset of them is
//! annotated by raters with labels 10/8/6 following a speed-dependent
//! preference, and one of them is logged as the demonstration.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ade, Trajectory, DT, HORIZON};
use crate::hash::Fnv1a;
use crate::intent::{rule_label, Intent, CONTEXT_DIM};
use crate::scalar::{lit, std_normal, Scalar};

pub const FORMAT_VERSION: u32 = 1;
pub const MAX_RATERS: usize = 3;
pub const MIN_SPEED: f64 = 2.0;
pub const MAX_SPEED: f64 = 12.0;
pub const LANE_OFFSET: f64 = 3.5;
/// Relative speed change of the accelerate/decelerate templates.
pub const SPEED_RAMP: f64 = 0.4;
/// Standard deviation of the template perturbation components (m).
pub const JITTER_SIGMA: f64 = 0.1;
/// Maneuvers run between these times; the first and last segments are steady.
pub const MANEUVER_START: f64 = 1.0;
pub const MANEUVER_END: f64 = 4.5;
/// Probability that the logged maneuver follows the route cue.
pub const ROUTE_CUE_FIDELITY: f64 = 1.0;
/// Labels handed out by preference rank.
pub const RANK_LABELS: [f64; MAX_RATERS] = [10.0, 8.0, 6.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Straight,
    Intersection,
    MultiLane,
}

impl Layout {
    pub const ALL: [Layout; 3] = [Layout::Straight, Layout::Intersection, Layout::MultiLane];

    pub fn index(self) -> usize {
        match self {
            Layout::Straight => 0,
            Layout::Intersection => 1,
            Layout::MultiLane => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct RaterAnnotation<S> {
    pub trajectory: Trajectory<S>,
    pub label: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct Scene<S> {
    pub scene_id: String,
    pub layout: Layout,
    pub start_speed: S,
    pub n_lanes: usize,
    /// Zero-based lane index counted from the right.
    pub ego_lane: usize,
    /// Navigation hint in [0, 1); selects the logged maneuver.
    pub route_cue: S,
    pub context: Vec<S>,
    /// Sorted by intent code.
    pub admissible_intents: Vec<Intent>,
    pub logged_intent: Intent,
    pub logged_trajectory: Trajectory<S>,
    pub raters: Vec<RaterAnnotation<S>>,
}

impl<S: Scalar> Scene<S> {
    pub fn lanes_left(&self) -> usize {
        self.n_lanes - 1 - self.ego_lane
    }

    pub fn lanes_right(&self) -> usize {
        self.ego_lane
    }

    /// Context layout: 0-2 layout one-hot, 3 speed / 12, 4-11 admissible mask,
    /// 12 lanes / 3, 13 lanes to the left / 2, 14 lanes to the right / 2,
    /// 15 route cue.
    pub fn compute_context(&self) -> Vec<S> {
        encode_context(
            self.layout,
            self.start_speed,
            &self.admissible_intents,
            self.n_lanes,
            self.ego_lane,
            self.route_cue,
        )
    }

    pub fn max_label(&self) -> S {
        self.raters.iter().map(|r| r.label).fold(S::neg_infinity(), S::max)
    }

    /// Highest-labeled rater (first one on ties).
    pub fn top_rater(&self) -> &RaterAnnotation<S> {
        let mut best = &self.raters[0];
        for r in &self.raters[1..] {
            if r.label > best.label {
                best = r;
            }
        }
        best
    }

    /// Noise-free template of an intent for this scene's start speed.
    pub fn template(&self, intent: Intent) -> Trajectory<S> {
        template(intent, self.start_speed)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation {
            record: self.scene_id.clone(),
            message,
        };
        if self.raters.is_empty() || self.raters.len() > MAX_RATERS {
            return Err(fail(format!("expected 1..={MAX_RATERS} raters, found {}", self.raters.len())));
        }
        for (i, r) in self.raters.iter().enumerate() {
            if !(r.label >= S::zero() && r.label <= lit(10.0)) {
                return Err(fail(format!("rater {i} label {} violates the [0, 10] label range", r.label)));
            }
            r.trajectory.validate().map_err(|e| fail(format!("rater {i}: {e}")))?;
        }
        self.logged_trajectory.validate().map_err(|e| fail(format!("logged trajectory: {e}")))?;
        if self.admissible_intents.is_empty() || self.admissible_intents.windows(2).any(|w| w[0] >= w[1]) {
            return Err(fail("admissible intents must be non-empty, sorted and distinct".into()));
        }
        if !self.admissible_intents.contains(&self.logged_intent) {
            return Err(fail(format!("logged intent {} is not admissible", self.logged_intent)));
        }
        if rule_label(&self.logged_trajectory) != self.logged_intent {
            return Err(fail("logged trajectory does not label back to the logged intent".into()));
        }
        if self.n_lanes == 0 || self.ego_lane >= self.n_lanes {
            return Err(fail(format!("ego lane {} outside {} lanes", self.ego_lane, self.n_lanes)));
        }
        if self.context.len() != CONTEXT_DIM || self.context != self.compute_context() {
            return Err(fail("context vector does not match the scene parameters".into()));
        }
        Ok(())
    }
}

pub fn encode_context<S: Scalar>(
    layout: Layout,
    start_speed: S,
    admissible: &[Intent],
    n_lanes: usize,
    ego_lane: usize,
    route_cue: S,
) -> Vec<S> {
    let mut ctx = vec![S::zero(); CONTEXT_DIM];
    ctx[layout.index()] = S::one();
    ctx[3] = start_speed / lit(MAX_SPEED);
    for intent in admissible {
        ctx[4 + intent.code()] = S::one();
    }
    ctx[12] = lit::<S>(n_lanes as f64) / lit(3.0);
    ctx[13] = lit::<S>((n_lanes - 1 - ego_lane) as f64) / lit(2.0);
    ctx[14] = lit::<S>(ego_lane as f64) / lit(2.0);
    ctx[15] = route_cue;
    ctx
}

fn smoothstep<S: Scalar>(u: S) -> S {
    let u = u.max(S::zero()).min(S::one());
    u * u * (lit::<S>(3.0) - lit::<S>(2.0) * u)
}

/// Maneuver progress in [0, 1] at time `t`.
fn progress<S: Scalar>(t: S) -> S {
    smoothstep((t - lit(MANEUVER_START)) / lit(MANEUVER_END - MANEUVER_START))
}

const SUBSTEPS: usize = 64;

/// Kinematic template of `intent` for a vehicle starting at `speed` along +x.
pub fn template<S: Scalar>(intent: Intent, speed: S) -> Trajectory<S> {
    let dt: S = lit(DT);
    let h = dt / lit::<S>(SUBSTEPS as f64);
    let speed_at = |t: S| match intent {
        Intent::Accelerate => speed * (S::one() + lit::<S>(SPEED_RAMP) * progress(t)),
        Intent::Decelerate => speed * (S::one() - lit::<S>(SPEED_RAMP) * progress(t)),
        _ => speed,
    };
    let heading_at = |t: S| match intent {
        Intent::TurnLeft => S::FRAC_PI_2() * progress(t),
        Intent::TurnRight => -S::FRAC_PI_2() * progress(t),
        Intent::UTurn => S::PI() * progress(t),
        _ => S::zero(),
    };
    let lateral_at = |t: S| match intent {
        Intent::LaneChangeLeft => lit::<S>(LANE_OFFSET) * progress(t),
        Intent::LaneChangeRight => -lit::<S>(LANE_OFFSET) * progress(t),
        _ => S::zero(),
    };

    let mut waypoints = Vec::with_capacity(HORIZON);
    let (mut x, mut y) = (S::zero(), S::zero());
    let mut t = S::zero();
    for _ in 0..HORIZON {
        for _ in 0..SUBSTEPS {
            let mid = t + h / lit(2.0);
            let v = speed_at(mid);
            let th = heading_at(mid);
            x += v * th.cos() * h;
            y += v * th.sin() * h;
            t += h;
        }
        waypoints.push([x, y + lateral_at(t)]);
    }
    Trajectory::new(waypoints, dt).expect("templates are finite")
}

/// Smooth perturbation: a random offset plus a random linear drift, each
/// component Gaussian with standard deviation [`JITTER_SIGMA`].
pub fn jitter<S: Scalar, R: Rng + ?Sized>(traj: &Trajectory<S>, rng: &mut R) -> Trajectory<S> {
    let sigma: S = lit(JITTER_SIGMA);
    let offset: [S; 2] = [std_normal::<S, _>(rng) * sigma, std_normal::<S, _>(rng) * sigma];
    let drift: [S; 2] = [std_normal::<S, _>(rng) * sigma, std_normal::<S, _>(rng) * sigma];
    let n: S = lit(traj.len() as f64);
    let waypoints = traj
        .waypoints()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let frac = lit::<S>((i + 1) as f64) / n;
            [p[0] + offset[0] + drift[0] * frac, p[1] + offset[1] + drift[1] * frac]
        })
        .collect();
    Trajectory::new(waypoints, traj.dt()).expect("finite perturbation")
}

/// Rater taste: a speed-dependent utility per maneuver.
pub fn preference_utility(intent: Intent, speed: f64) -> f64 {
    let x = (speed - 7.0) / 5.0;
    match intent {
        Intent::Cruise => 0.5,
        Intent::Accelerate => 0.2 - x,
        Intent::Decelerate => 0.2 + x,
        Intent::LaneChangeLeft => 0.6 + 0.3 * x,
        Intent::LaneChangeRight => 0.4 - 0.3 * x,
        Intent::TurnLeft => 0.7 - 0.5 * x,
        Intent::TurnRight => 0.8 - 0.5 * x,
        Intent::UTurn => 0.1 - 0.8 * x,
    }
}

/// Orders intents from most to least preferred at `speed`.
pub fn preference_order(intents: &[Intent], speed: f64) -> Vec<Intent> {
    let mut sorted = intents.to_vec();
    sorted.sort_by(|a, b| {
        preference_utility(*b, speed)
            .total_cmp(&preference_utility(*a, speed))
            .then(a.cmp(b))
    });
    sorted
}

/// Number-of-admissible-intents choices per layout, each drawn uniformly.
pub fn admissible_count_choices(layout: Layout) -> &'static [usize] {
    match layout {
        Layout::Straight | Layout::MultiLane => &[1, 2, 3],
        Layout::Intersection => &[2, 3],
    }
}

/// Minimum template ADE between some pair of intersection maneuvers.
pub const MULTIMODAL_ADE: f64 = 2.0;

fn has_distinct_pair(intents: &[Intent], speed: f64) -> bool {
    let templates: Vec<Trajectory<f64>> = intents.iter().map(|i| template(*i, speed)).collect();
    (0..templates.len()).any(|a| {
        (a + 1..templates.len()).any(|b| ade(&templates[a], &templates[b]).expect("equal horizons") >= MULTIMODAL_ADE)
    })
}

fn sample_admissible(
    layout: Layout,
    speed: f64,
    lanes_left: usize,
    lanes_right: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Intent> {
    let counts = admissible_count_choices(layout);
    let n = counts[rng.random_range(0..counts.len())];
    let (required, mut optional): (Vec<Intent>, Vec<Intent>) = match layout {
        Layout::Straight => (vec![], vec![Intent::Cruise, Intent::Accelerate, Intent::Decelerate]),
        Layout::Intersection => {
            let turns = [Intent::TurnLeft, Intent::TurnRight, Intent::UTurn];
            let pick = turns[rng.random_range(0..turns.len())];
            let rest = [Intent::Cruise, Intent::TurnLeft, Intent::TurnRight, Intent::UTurn]
                .into_iter()
                .filter(|i| *i != pick)
                .collect();
            (vec![pick], rest)
        }
        Layout::MultiLane => {
            let mut changes = Vec::new();
            if lanes_left > 0 {
                changes.push(Intent::LaneChangeLeft);
            }
            if lanes_right > 0 {
                changes.push(Intent::LaneChangeRight);
            }
            let pick = changes[rng.random_range(0..changes.len())];
            let mut rest = vec![Intent::Cruise, Intent::Accelerate, Intent::Decelerate];
            rest.extend(changes.into_iter().filter(|i| *i != pick));
            (vec![pick], rest)
        }
    };
    let take = n - required.len();
    // Intersections redraw the companions (same count) until two maneuvers
    // are geometrically distinct.
    loop {
        optional.shuffle(rng);
        let mut chosen = required.clone();
        chosen.extend(optional.iter().take(take).copied());
        chosen.sort();
        if layout != Layout::Intersection || has_distinct_pair(&chosen, speed) {
            return chosen;
        }
    }
}

fn scene_seed(pool_seed: u64, index: usize) -> u64 {
    let mut h = Fnv1a::default();
    h.update(&pool_seed.to_le_bytes()).update(&(index as u64).to_le_bytes());
    h.finish()
}

pub fn scene_id(pool_seed: u64, index: usize) -> String {
    format!("seq-{pool_seed}-{index:05}")
}

/// Generates scene `index` of the pool seeded by `pool_seed`. Scenes are
/// independent of each other and of the pool size.
pub fn generate_scene<S: Scalar>(pool_seed: u64, index: usize) -> Scene<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(pool_seed, index));
    let layout = Layout::ALL[rng.random_range(0..3)];
    let speed_f: f64 = rng.random_range(MIN_SPEED..MAX_SPEED);
    let start_speed: S = lit(speed_f);
    let (n_lanes, ego_lane) = match layout {
        Layout::MultiLane => {
            let lanes = rng.random_range(2..=3usize);
            (lanes, rng.random_range(0..lanes))
        }
        _ => (1, 0),
    };
    let admissible = sample_admissible(layout, speed_f, n_lanes - 1 - ego_lane, ego_lane, &mut rng);

    // Perturbed template per admissible intent; redraw until it labels back.
    let perturbed: BTreeMap<Intent, Trajectory<S>> = admissible
        .iter()
        .map(|&intent| {
            let base = template(intent, start_speed);
            let traj = loop {
                let t = jitter(&base, &mut rng);
                if rule_label(&t) == intent {
                    break t;
                }
            };
            (intent, traj)
        })
        .collect();

    let n_raters = rng.random_range(1..=admissible.len().min(MAX_RATERS));
    let mut rated = admissible.clone();
    rated.shuffle(&mut rng);
    rated.truncate(n_raters);
    let raters = preference_order(&rated, speed_f)
        .into_iter()
        .zip(RANK_LABELS)
        .map(|(intent, label)| RaterAnnotation {
            trajectory: perturbed[&intent].clone(),
            label: lit(label),
        })
        .collect();

    let cue: f64 = rng.random_range(0.0..1.0);
    let follows_cue = rng.random_bool(ROUTE_CUE_FIDELITY);
    let fallback = rng.random_range(0..admissible.len());
    let logged_intent = if follows_cue {
        admissible[((cue * admissible.len() as f64) as usize).min(admissible.len() - 1)]
    } else {
        admissible[fallback]
    };
    let route_cue: S = lit(cue);

    Scene {
        scene_id: scene_id(pool_seed, index),
        layout,
        start_speed,
        n_lanes,
        ego_lane,
        route_cue,
        context: encode_context(layout, start_speed, &admissible, n_lanes, ego_lane, route_cue),
        logged_trajectory: perturbed[&logged_intent].clone(),
        logged_intent,
        admissible_intents: admissible,
        raters,
    }
}

pub fn generate_pool<S: Scalar>(n_scenes: usize, seed: u64) -> Vec<Scene<S>> {
    (0..n_scenes).map(|i| generate_scene(seed, i)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub held_ids: Vec<String>,
    pub split_seed: u64,
}

/// FNV-1a over the UTF-8 scene id followed by the decimal split seed.
pub fn split_hash(scene_id: &str, split_seed: u64) -> u64 {
    let mut h = Fnv1a::default();
    h.update(scene_id.as_bytes()).update(split_seed.to_string().as_bytes());
    h.finish()
}

pub fn split_pool<S: Scalar>(pool: &[Scene<S>], split_seed: u64, train_n: usize, held_n: usize) -> Result<DatasetSplit> {
    if train_n + held_n > pool.len() {
        return Err(Error::InsufficientPool {
            available: pool.len(),
            requested: train_n + held_n,
        });
    }
    let mut keyed: Vec<(u64, &str)> = pool
        .iter()
        .map(|s| (split_hash(&s.scene_id, split_seed), s.scene_id.as_str()))
        .collect();
    keyed.sort();
    let ids: Vec<String> = keyed.into_iter().map(|(_, id)| id.to_string()).collect();
    Ok(DatasetSplit {
        train_ids: ids[..train_n].to_vec(),
        held_ids: ids[train_n..train_n + held_n].to_vec(),
        split_seed,
    })
}

/// Resolves split ids back into scenes (in split order).
pub fn select<'a, S: Scalar>(pool: &'a [Scene<S>], ids: &[String]) -> Result<Vec<&'a Scene<S>>> {
    let index: BTreeMap<&str, &Scene<S>> = pool.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            index.get(id.as_str()).copied().ok_or_else(|| Error::Validation {
                record: id.clone(),
                message: "split references a scene missing from the pool".into(),
            })
        })
        .collect()
}

#[derive(Serialize)]
#[serde(bound = "S: Scalar")]
struct RecordOut<'a, S> {
    format_version: u32,
    #[serde(flatten)]
    scene: &'a Scene<S>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: Option<u32>,
    scene_id: Option<String>,
}

pub fn save_pool<S: Scalar>(pool: &[Scene<S>], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for scene in pool {
        let line = serde_json::to_string(&RecordOut {
            format_version: FORMAT_VERSION,
            scene,
        })
        .expect("scenes serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_pool<S: Scalar>(path: &Path) -> Result<Vec<Scene<S>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pool = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        pool.push(parse_record(&line, i + 1)?);
    }
    Ok(pool)
}

pub fn parse_record<S: Scalar>(line: &str, line_no: usize) -> Result<Scene<S>> {
    let probe: VersionProbe = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        record: None,
        message: e.to_string(),
    })?;
    let parse_err = |message: String| Error::Parse {
        line: line_no,
        record: probe.scene_id.clone(),
        message,
    };
    match probe.format_version {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(parse_err(format!("unsupported format_version {v}"))),
        None => return Err(parse_err("missing format_version".into())),
    }
    let mut value: serde_json::Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    value.as_object_mut().map(|o| o.remove("format_version"));
    let scene: Scene<S> = serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
    scene.validate()?;
    Ok(scene)
}

/// Summary statistics reported by `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolStats {
    pub n_scenes: usize,
    pub layout_histogram: BTreeMap<String, usize>,
    pub logged_intent_histogram: BTreeMap<String, usize>,
    pub admissible_intent_histogram: BTreeMap<String, usize>,
    pub rater_label_histogram: BTreeMap<String, usize>,
    pub logged_mean_rfs: f64,
    pub ceiling_mean: f64,
    pub logged_vs_ceiling_gap: f64,
    pub logged_is_top_fraction: f64,
}

pub fn pool_stats<S: Scalar>(pool: &[Scene<S>], score: impl Fn(&Trajectory<S>, &Scene<S>) -> f64) -> PoolStats {
    let mut layout_histogram = BTreeMap::new();
    let mut logged_intent_histogram = BTreeMap::new();
    let mut admissible_intent_histogram = BTreeMap::new();
    let mut rater_label_histogram = BTreeMap::new();
    let (mut logged, mut ceiling, mut top) = (0.0, 0.0, 0usize);
    for s in pool {
        *layout_histogram.entry(format!("{:?}", s.layout).to_lowercase()).or_insert(0) += 1;
        *logged_intent_histogram.entry(s.logged_intent.to_string()).or_insert(0) += 1;
        for i in &s.admissible_intents {
            *admissible_intent_histogram.entry(i.to_string()).or_insert(0) += 1;
        }
        for r in &s.raters {
            *rater_label_histogram.entry(format!("{}", r.label.as_f64())).or_insert(0) += 1;
        }
        logged += score(&s.logged_trajectory, s);
        ceiling += s.max_label().as_f64();
        if rule_label(&s.top_rater().trajectory) == s.logged_intent {
            top += 1;
        }
    }
    let n = pool.len().max(1) as f64;
    PoolStats {
        n_scenes: pool.len(),
        layout_histogram,
        logged_intent_histogram,
        admissible_intent_histogram,
        rater_label_histogram,
        logged_mean_rfs: logged / n,
        ceiling_mean: ceiling / n,
        logged_vs_ceiling_gap: (ceiling - logged) / n,
        logged_is_top_fraction: top as f64 / n,
    }
}
