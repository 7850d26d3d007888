//! The eight-way maneuver taxonomy, geometric labeling, and the linear
//! softmax intent classifier used at deployment.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{summarize, KinematicSummary, Trajectory};
use crate::scalar::{lit, std_normal, Scalar};

/// Length of the scene context vector.
pub const CONTEXT_DIM: usize = 16;
/// Number of conditioning intents.
pub const NUM_INTENTS: usize = 8;
/// Embedding-table row reserved for the unconditional placeholder.
pub const UNCOND_CODE: usize = NUM_INTENTS;

/// Driving intent; the discriminant is the stable serialization code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    Cruise = 0,
    LaneChangeLeft = 1,
    LaneChangeRight = 2,
    TurnLeft = 3,
    TurnRight = 4,
    UTurn = 5,
    Accelerate = 6,
    Decelerate = 7,
}

impl Intent {
    pub const ALL: [Intent; NUM_INTENTS] = [
        Intent::Cruise,
        Intent::LaneChangeLeft,
        Intent::LaneChangeRight,
        Intent::TurnLeft,
        Intent::TurnRight,
        Intent::UTurn,
        Intent::Accelerate,
        Intent::Decelerate,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Intent> {
        Intent::ALL.get(code).copied()
    }

    /// Left/right counterpart; symmetric intents map to themselves.
    pub fn mirrored(self) -> Intent {
        match self {
            Intent::LaneChangeLeft => Intent::LaneChangeRight,
            Intent::LaneChangeRight => Intent::LaneChangeLeft,
            Intent::TurnLeft => Intent::TurnRight,
            Intent::TurnRight => Intent::TurnLeft,
            other => other,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Intent::Cruise => "cruise",
            Intent::LaneChangeLeft => "lane_change_left",
            Intent::LaneChangeRight => "lane_change_right",
            Intent::TurnLeft => "turn_left",
            Intent::TurnRight => "turn_right",
            Intent::UTurn => "u_turn",
            Intent::Accelerate => "accelerate",
            Intent::Decelerate => "decelerate",
        }
    }
}

impl fmt::Display for Intent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Labeler thresholds.
pub mod thresholds {
    /// 135 degrees.
    pub const UTURN_HEADING: f64 = 2.36;
    /// 60 degrees.
    pub const TURN_HEADING: f64 = 1.05;
    pub const LANE_CHANGE_LATERAL: f64 = 1.75;
    pub const LANE_CHANGE_MAX_HEADING: f64 = 0.35;
    pub const ACCELERATE_RATIO: f64 = 1.25;
    pub const DECELERATE_RATIO: f64 = 0.75;
}

/// Precedence cascade on the kinematic summary:
/// U-turn > turn > lane change > speed change > cruise.
pub fn label_summary<S: Scalar>(s: &KinematicSummary<S>) -> Intent {
    use thresholds::*;
    let heading = s.heading_change.abs();
    if heading > lit(UTURN_HEADING) {
        Intent::UTurn
    } else if heading > lit(TURN_HEADING) {
        if s.heading_change > S::zero() {
            Intent::TurnLeft
        } else {
            Intent::TurnRight
        }
    } else if s.lateral_shift.abs() > lit(LANE_CHANGE_LATERAL) && heading <= lit(LANE_CHANGE_MAX_HEADING) {
        if s.lateral_shift > S::zero() {
            Intent::LaneChangeLeft
        } else {
            Intent::LaneChangeRight
        }
    } else if s.speed_change > lit(ACCELERATE_RATIO) {
        Intent::Accelerate
    } else if s.speed_change < lit(DECELERATE_RATIO) {
        Intent::Decelerate
    } else {
        Intent::Cruise
    }
}

pub fn rule_label<S: Scalar>(traj: &Trajectory<S>) -> Intent {
    label_summary(&summarize(traj))
}

/// Linear softmax map from the scene context to intent probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct IntentClassifier<S> {
    /// Row-major `NUM_INTENTS x CONTEXT_DIM`.
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

/// Number of scalars held by a classifier.
pub const CLASSIFIER_PARAMS: usize = NUM_INTENTS * CONTEXT_DIM + NUM_INTENTS;

impl<S: Scalar> IntentClassifier<S> {
    pub fn zeros() -> Self {
        IntentClassifier {
            weights: vec![S::zero(); NUM_INTENTS * CONTEXT_DIM],
            bias: vec![S::zero(); NUM_INTENTS],
        }
    }

    pub fn logits(&self, context: &[S]) -> [S; NUM_INTENTS] {
        logits_from(&self.weights, &self.bias, context)
    }

    pub fn classify(&self, context: &[S]) -> [S; NUM_INTENTS] {
        softmax(&self.logits(context))
    }

    pub fn predict(&self, context: &[S]) -> Intent {
        argmax_intent(&self.classify(context))
    }

    /// Parameters flattened as weights followed by biases.
    pub fn to_flat(&self) -> Vec<S> {
        self.weights.iter().chain(&self.bias).copied().collect()
    }

    pub fn from_flat(flat: &[S]) -> Self {
        let (w, b) = flat.split_at(NUM_INTENTS * CONTEXT_DIM);
        IntentClassifier {
            weights: w.to_vec(),
            bias: b[..NUM_INTENTS].to_vec(),
        }
    }
}

pub(crate) fn logits_from<S: Scalar>(weights: &[S], bias: &[S], context: &[S]) -> [S; NUM_INTENTS] {
    debug_assert_eq!(context.len(), CONTEXT_DIM);
    let mut out = [S::zero(); NUM_INTENTS];
    for (c, o) in out.iter_mut().enumerate() {
        let row = &weights[c * CONTEXT_DIM..(c + 1) * CONTEXT_DIM];
        *o = bias[c] + row.iter().zip(context).map(|(w, x)| *w * *x).sum::<S>();
    }
    out
}

pub fn softmax<S: Scalar, const N: usize>(logits: &[S; N]) -> [S; N] {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let mut out = [S::zero(); N];
    let mut total = S::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in &mut out {
        *o /= total;
    }
    out
}

/// First index of the largest probability.
pub fn argmax_intent<S: Scalar>(probs: &[S; NUM_INTENTS]) -> Intent {
    let mut best = 0;
    for c in 1..NUM_INTENTS {
        if probs[c] > probs[best] {
            best = c;
        }
    }
    Intent::ALL[best]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTraining {
    pub steps: usize,
    pub learning_rate: f64,
    /// Scale of the seeded random weight initialization.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        ClassifierTraining {
            steps: 3000,
            learning_rate: 2.0,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    /// Loss after every step, starting with the initial loss.
    pub loss_trace: Vec<f64>,
}

/// Mean cross-entropy and its gradient (flat, weights then biases).
pub fn cross_entropy<S: Scalar>(clf: &IntentClassifier<S>, examples: &[(Vec<S>, Intent)]) -> (S, Vec<S>) {
    let mut grad = vec![S::zero(); CLASSIFIER_PARAMS];
    let mut loss = S::zero();
    let n: S = lit(examples.len() as f64);
    for (ctx, target) in examples {
        let p = clf.classify(ctx);
        let t = target.code();
        loss -= p[t].max(S::min_positive_value()).ln();
        for c in 0..NUM_INTENTS {
            let d = p[c] - if c == t { S::one() } else { S::zero() };
            let row = &mut grad[c * CONTEXT_DIM..(c + 1) * CONTEXT_DIM];
            for (g, x) in row.iter_mut().zip(ctx) {
                *g += d * *x;
            }
            grad[NUM_INTENTS * CONTEXT_DIM + c] += d;
        }
    }
    for g in &mut grad {
        *g /= n;
    }
    (loss / n, grad)
}

/// Full-batch gradient descent on the cross-entropy.
pub fn train_classifier<S: Scalar>(
    examples: &[(Vec<S>, Intent)],
    cfg: &ClassifierTraining,
) -> Result<(IntentClassifier<S>, ClassifierReport)> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("classifier training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale: S = lit(cfg.init_scale);
    let flat: Vec<S> = (0..CLASSIFIER_PARAMS).map(|_| std_normal::<S, _>(&mut rng) * scale).collect();
    let mut clf = IntentClassifier::from_flat(&flat);
    let lr: S = lit(cfg.learning_rate);

    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (loss, grad) = cross_entropy(&clf, examples);
        trace.push(loss.as_f64());
        let mut flat = clf.to_flat();
        for (p, g) in flat.iter_mut().zip(&grad) {
            *p -= lr * *g;
        }
        clf = IntentClassifier::from_flat(&flat);
    }
    let (final_loss, _) = cross_entropy(&clf, examples);
    trace.push(final_loss.as_f64());
    let correct = examples.iter().filter(|(ctx, t)| clf.predict(ctx) == *t).count();
    let report = ClassifierReport {
        initial_loss: trace[0],
        final_loss: final_loss.as_f64(),
        train_accuracy: correct as f64 / examples.len() as f64,
        loss_trace: trace,
    };
    Ok((clf, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DT;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn from_fn(f: impl Fn(f64) -> [f64; 2]) -> Trajectory<f64> {
        Trajectory::new((1..=10).map(|i| f(i as f64 * DT)).collect(), DT).unwrap()
    }

    #[test]
    fn codes_are_stable() {
        for (i, intent) in Intent::ALL.iter().enumerate() {
            assert_eq!(intent.code(), i);
            assert_eq!(Intent::from_code(i), Some(*intent));
        }
        assert_eq!(Intent::from_code(8), None);
        assert_eq!(serde_json::to_string(&Intent::UTurn).unwrap(), "\"u_turn\"");
    }

    #[test]
    fn left_arc_is_turn_left() {
        let t = from_fn(|t| {
            let phi = FRAC_PI_2 * t / 5.0;
            [8.0 * phi.sin(), 8.0 * (1.0 - phi.cos())]
        });
        assert_eq!(rule_label(&t), Intent::TurnLeft);
        assert_eq!(rule_label(&t.mirrored()), Intent::TurnRight);
    }

    #[test]
    fn straight_constant_speed_is_cruise() {
        assert_eq!(rule_label(&from_fn(|t| [6.0 * t, 0.0])), Intent::Cruise);
    }

    #[test]
    fn speed_ramps_and_lane_shifts() {
        assert_eq!(rule_label(&from_fn(|t| [5.0 * t + 0.5 * t * t, 0.0])), Intent::Accelerate);
        assert_eq!(rule_label(&from_fn(|t| [8.0 * t - 0.5 * t * t, 0.0])), Intent::Decelerate);
        let lane = from_fn(|t| {
            let u = ((t - 1.0) / 3.5).clamp(0.0, 1.0);
            [8.0 * t, 3.5 * u * u * (3.0 - 2.0 * u)]
        });
        assert_eq!(rule_label(&lane), Intent::LaneChangeLeft);
        assert_eq!(rule_label(&lane.mirrored()), Intent::LaneChangeRight);
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let clf = IntentClassifier::<f64>::zeros();
        for p in clf.classify(&[0.3; CONTEXT_DIM]) {
            assert_eq!(p, 0.125);
        }
    }

    #[test]
    fn training_rejects_empty_set() {
        let empty: Vec<(Vec<f64>, Intent)> = Vec::new();
        assert!(train_classifier(&empty, &ClassifierTraining::default()).is_err());
    }

    #[test]
    fn single_example_is_memorized() {
        let ex = vec![(vec![0.5; CONTEXT_DIM], Intent::UTurn)];
        let (clf, rep) = train_classifier(&ex, &ClassifierTraining { steps: 50, ..Default::default() }).unwrap();
        assert_eq!(rep.train_accuracy, 1.0);
        assert_eq!(clf.predict(&ex[0].0), Intent::UTurn);
    }

    fn toy_examples() -> Vec<(Vec<f64>, Intent)> {
        (0..24)
            .map(|i| {
                let mut ctx = vec![0.0; CONTEXT_DIM];
                ctx[i % CONTEXT_DIM] = 1.0;
                ctx[(i * 7) % CONTEXT_DIM] += 0.5;
                (ctx, Intent::ALL[i % 3])
            })
            .collect()
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let ex = toy_examples();
        let flat: Vec<f64> = (0..CLASSIFIER_PARAMS).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
        let clf = IntentClassifier::from_flat(&flat);
        let (_, grad) = cross_entropy(&clf, &ex);
        let h = 1e-5;
        for idx in (0..CLASSIFIER_PARAMS).step_by(5) {
            let mut plus = flat.clone();
            plus[idx] += h;
            let mut minus = flat.clone();
            minus[idx] -= h;
            let fd = (cross_entropy(&IntentClassifier::from_flat(&plus), &ex).0
                - cross_entropy(&IntentClassifier::from_flat(&minus), &ex).0)
                / (2.0 * h);
            assert!((fd - grad[idx]).abs() <= 1e-4 * fd.abs().max(1e-3), "param {idx}: {fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn loss_decreases_monotonically_with_small_steps() {
        let cfg = ClassifierTraining { steps: 200, learning_rate: 0.1, ..Default::default() };
        let (_, rep) = train_classifier(&toy_examples(), &cfg).unwrap();
        for w in rep.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
        assert!(rep.final_loss < rep.initial_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ClassifierTraining { steps: 100, seed: 9, ..Default::default() };
        let (a, _) = train_classifier(&toy_examples(), &cfg).unwrap();
        let (b, _) = train_classifier(&toy_examples(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn classify_is_a_distribution(
            w in prop::collection::vec(-20.0f64..20.0, CLASSIFIER_PARAMS),
            ctx in prop::collection::vec(-10.0f64..10.0, CONTEXT_DIM),
        ) {
            let p = IntentClassifier::from_flat(&w).classify(&ctx);
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        }

        #[test]
        fn mirroring_swaps_left_and_right(
            heading in -3.0f64..3.0,
            lateral in -6.0f64..6.0,
            speed in 0.5f64..1.6,
        ) {
            let s = KinematicSummary { displacement: 10.0, heading_change: heading, lateral_shift: lateral, speed_change: speed };
            let m = KinematicSummary { heading_change: -heading, lateral_shift: -lateral, ..s };
            prop_assert_eq!(label_summary(&m), label_summary(&s).mirrored());
        }

        #[test]
        fn turn_and_lane_change_branches_commute(
            heading in -3.0f64..3.0,
            lateral in -6.0f64..6.0,
            speed in 0.5f64..1.6,
        ) {
            // Lane-change check before the turn check gives the same answer
            // because the heading guard excludes every turn.
            use thresholds::*;
            let s = KinematicSummary { displacement: 10.0, heading_change: heading, lateral_shift: lateral, speed_change: speed };
            let h = heading.abs();
            let reordered = if h > UTURN_HEADING {
                Intent::UTurn
            } else if lateral.abs() > LANE_CHANGE_LATERAL && h <= LANE_CHANGE_MAX_HEADING {
                if lateral > 0.0 { Intent::LaneChangeLeft } else { Intent::LaneChangeRight }
            } else if h > TURN_HEADING {
                if heading > 0.0 { Intent::TurnLeft } else { Intent::TurnRight }
            } else if speed > ACCELERATE_RATIO {
                Intent::Accelerate
            } else if speed < DECELERATE_RATIO {
                Intent::Decelerate
            } else {
                Intent::Cruise
            };
            prop_assert_eq!(label_summary(&s), reordered);
        }
    }
}
