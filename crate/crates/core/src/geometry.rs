//! Planar trajectories, kinematic summaries and trajectory distances.
//!
//! Waypoint `i` of a trajectory sits at time `(i + 1) * dt`; the ego pose at
//! `t = 0` is implicit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Default number of waypoints.
pub const HORIZON: usize = 10;
/// Default waypoint spacing in seconds.
pub const DT: f64 = 0.5;
/// Segments slower than this (m/s) carry no usable heading.
pub const STALL_SPEED: f64 = 0.05;

pub type Point<S> = [S; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Trajectory<S> {
    waypoints: Vec<Point<S>>,
    dt: S,
}

impl<S: Scalar> Trajectory<S> {
    pub fn new(waypoints: Vec<Point<S>>, dt: S) -> Result<Self> {
        let traj = Trajectory { waypoints, dt };
        traj.validate()?;
        Ok(traj)
    }

    /// Builds a trajectory from an interleaved `[x0, y0, x1, y1, ...]` vector.
    pub fn from_flat(flat: &[S], dt: S) -> Result<Self> {
        if !flat.len().is_multiple_of(2) {
            return Err(Error::InvalidTrajectory(format!(
                "flat vector has odd length {}",
                flat.len()
            )));
        }
        let waypoints = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        Self::new(waypoints, dt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 {
            return Err(Error::InvalidTrajectory(format!(
                "needs at least 2 waypoints, got {}",
                self.waypoints.len()
            )));
        }
        if !(self.dt.is_finite() && self.dt > S::zero()) {
            return Err(Error::InvalidTrajectory(format!("dt must be positive, got {}", self.dt)));
        }
        if let Some(i) = self
            .waypoints
            .iter()
            .position(|p| !(p[0].is_finite() && p[1].is_finite()))
        {
            return Err(Error::InvalidTrajectory(format!("waypoint {i} is not finite")));
        }
        Ok(())
    }

    pub fn waypoints(&self) -> &[Point<S>] {
        &self.waypoints
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn dt(&self) -> S {
        self.dt
    }

    /// Time of the last waypoint.
    pub fn horizon(&self) -> S {
        self.dt * lit::<S>(self.waypoints.len() as f64)
    }

    pub fn flatten(&self) -> Vec<S> {
        self.waypoints.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// Reflection across the x-axis (left and right swap).
    pub fn mirrored(&self) -> Self {
        Trajectory {
            waypoints: self.waypoints.iter().map(|p| [p[0], -p[1]]).collect(),
            dt: self.dt,
        }
    }

    pub fn translated(&self, offset: Point<S>) -> Self {
        Trajectory {
            waypoints: self
                .waypoints
                .iter()
                .map(|p| [p[0] + offset[0], p[1] + offset[1]])
                .collect(),
            dt: self.dt,
        }
    }

    /// Waypoint at anchor time `anchor` (seconds), without interpolation.
    pub fn anchor_point(&self, anchor: S) -> Result<Point<S>> {
        let idx = anchor_index(anchor, self.dt, self.waypoints.len())?;
        Ok(self.waypoints[idx])
    }
}

/// Maps an anchor time onto its waypoint index (`round(a / dt) - 1`).
pub fn anchor_index<S: Scalar>(anchor: S, dt: S, len: usize) -> Result<usize> {
    let steps = anchor / dt;
    let rounded = steps.round();
    let out_of_range = || Error::AnchorOutOfHorizon {
        anchor: anchor.as_f64(),
        horizon: dt.as_f64() * len as f64,
        dt: dt.as_f64(),
    };
    if !steps.is_finite() || (steps - rounded).abs() > lit(1e-9) || rounded < S::one() {
        return Err(out_of_range());
    }
    let idx = rounded.as_f64() as usize - 1;
    if idx >= len {
        return Err(out_of_range());
    }
    Ok(idx)
}

/// Coarse kinematics consumed by the rule-based intent labeler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicSummary<S> {
    /// Straight-line distance from the first to the last waypoint (m).
    pub displacement: S,
    /// Final minus initial heading, wrapped to (-pi, pi] (rad).
    pub heading_change: S,
    /// Final lateral offset in the initial-heading frame, left positive (m).
    pub lateral_shift: S,
    /// Final segment speed over initial segment speed.
    pub speed_change: S,
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle<S: Scalar>(angle: S) -> S {
    let pi = S::PI();
    let two_pi = pi + pi;
    let mut a = angle % two_pi;
    if a <= -pi {
        a += two_pi;
    } else if a > pi {
        a -= two_pi;
    }
    a
}

pub fn summarize<S: Scalar>(traj: &Trajectory<S>) -> KinematicSummary<S> {
    let wp = traj.waypoints();
    let dt = traj.dt();
    let stall: S = lit(STALL_SPEED);

    let segments: Vec<(Point<S>, S)> = wp
        .windows(2)
        .map(|w| {
            let d = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
            let speed = d[0].hypot(d[1]) / dt;
            (d, speed)
        })
        .collect();

    let first_moving = segments.iter().find(|(_, s)| *s >= stall);
    let last_moving = segments.iter().rev().find(|(_, s)| *s >= stall);

    let heading_of = |d: &Point<S>| d[1].atan2(d[0]);
    let (h0, h1) = match (first_moving, last_moving) {
        (Some((d0, _)), Some((d1, _))) => (heading_of(d0), heading_of(d1)),
        _ => (S::zero(), S::zero()),
    };

    let first = wp[0];
    let last = wp[wp.len() - 1];
    let delta = [last[0] - first[0], last[1] - first[1]];
    let displacement = delta[0].hypot(delta[1]);
    let lateral_shift = -h0.sin() * delta[0] + h0.cos() * delta[1];

    let initial_speed = if segments[0].1 >= stall {
        Some(segments[0].1)
    } else {
        first_moving.map(|(_, s)| *s)
    };
    let final_speed = segments[segments.len() - 1].1;
    let speed_change = match initial_speed {
        Some(v0) => final_speed / v0,
        None => S::one(),
    };

    KinematicSummary {
        displacement,
        heading_change: wrap_angle(h1 - h0),
        lateral_shift,
        speed_change,
    }
}

/// Average displacement error: mean Euclidean waypoint distance.
pub fn ade<S: Scalar>(a: &Trajectory<S>, b: &Trajectory<S>) -> Result<S> {
    if a.len() != b.len() || a.dt() != b.dt() {
        return Err(Error::IncompatibleHorizon {
            left: a.len(),
            right: b.len(),
            left_dt: a.dt().as_f64(),
            right_dt: b.dt().as_f64(),
        });
    }
    let total: S = a
        .waypoints()
        .iter()
        .zip(b.waypoints())
        .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
        .sum();
    Ok(total / lit::<S>(a.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn straight(n: usize, spacing: f64) -> Trajectory<f64> {
        Trajectory::new((0..n).map(|i| [i as f64 * spacing, 0.0]).collect(), DT).unwrap()
    }

    /// Waypoints on a circle of `radius` leaving the origin along +x, equally
    /// spaced in angle over `sweep` (positive turns left).
    fn arc(radius: f64, sweep: f64, n: usize) -> Trajectory<f64> {
        let side = sweep.signum();
        let pts = (0..n)
            .map(|i| {
                let phi = sweep.abs() * i as f64 / (n - 1) as f64;
                [radius * phi.sin(), side * radius * (1.0 - phi.cos())]
            })
            .collect();
        Trajectory::new(pts, DT).unwrap()
    }

    #[test]
    fn straight_line_summary() {
        let s = summarize(&straight(10, 1.0));
        assert_eq!(s.displacement, 9.0);
        assert_eq!(s.heading_change, 0.0);
        assert_eq!(s.lateral_shift, 0.0);
        assert_eq!(s.speed_change, 1.0);
    }

    #[test]
    fn quarter_arc_heading_matches_chord_geometry() {
        // Chord k of an equal-angle circle sampling points along
        // (phi_k + phi_{k+1}) / 2, so first-to-last chord rotation is
        // sweep * (n - 2) / (n - 1).
        let n = 10;
        let s = summarize(&arc(5.0, FRAC_PI_2, n));
        let analytic = FRAC_PI_2 * (n - 2) as f64 / (n - 1) as f64;
        assert!((s.heading_change - analytic).abs() < 1e-6);
        // Densely sampled, the chord rotation converges on the tangent rotation.
        let dense = summarize(&arc(1000.0, FRAC_PI_2, 2001));
        assert!((dense.heading_change - FRAC_PI_2).abs() < 1e-3);
        assert!(s.lateral_shift > 0.0);
    }

    #[test]
    fn degenerate_trajectory_summary() {
        let t = Trajectory::new(vec![[1.5, -2.0]; 10], DT).unwrap();
        let s = summarize(&t);
        assert_eq!(s.displacement, 0.0);
        assert_eq!(s.heading_change, 0.0);
        assert_eq!(s.lateral_shift, 0.0);
        assert_eq!(s.speed_change, 1.0);
    }

    #[test]
    fn stalled_start_takes_heading_from_first_moving_segment() {
        let mut pts = vec![[0.0, 0.0], [0.0, 0.0]];
        pts.extend((1..9).map(|i| [0.0, i as f64]));
        let s = summarize(&Trajectory::new(pts, DT).unwrap());
        // Heading +y throughout: no rotation and no sideways offset.
        assert_eq!(s.heading_change, 0.0);
        assert!(s.lateral_shift.abs() < 1e-12);
        assert!((s.displacement - 8.0).abs() < 1e-12);
        assert!((s.speed_change - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ade_identity_and_offset() {
        let a = straight(10, 1.0);
        assert_eq!(ade(&a, &a).unwrap(), 0.0);
        let b = a.translated([3.0, 4.0]);
        assert!((ade(&a, &b).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ade_of_concentric_arcs_matches_direct_sum() {
        let a = arc(5.0, FRAC_PI_2, 10);
        let b = arc(6.0, FRAC_PI_2, 10);
        let mut sum = 0.0;
        for i in 0..10 {
            let p = a.waypoints()[i];
            let q = b.waypoints()[i];
            sum += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        }
        assert!((ade(&a, &b).unwrap() - sum / 10.0).abs() < 1e-12);
    }

    #[test]
    fn ade_rejects_mismatched_horizons() {
        let err = ade(&straight(10, 1.0), &straight(8, 1.0)).unwrap_err();
        assert!(matches!(err, Error::IncompatibleHorizon { left: 10, right: 8, .. }));
    }

    #[test]
    fn anchor_indices() {
        let t = straight(10, 1.0);
        assert_eq!(t.anchor_point(5.0).unwrap(), [9.0, 0.0]);
        assert_eq!(t.anchor_point(3.0).unwrap(), [5.0, 0.0]);
        assert_eq!(t.anchor_point(1.0).unwrap(), [1.0, 0.0]);
        for a in [0.0, 5.5, 0.3, -1.0] {
            assert!(matches!(t.anchor_point(a), Err(Error::AnchorOutOfHorizon { .. })));
        }
    }

    #[test]
    fn anchor_point_is_exact_lookup() {
        let t = arc(7.0, PI, 10);
        for i in 0..10 {
            assert_eq!(t.anchor_point((i + 1) as f64 * DT).unwrap(), t.waypoints()[i]);
        }
    }

    #[test]
    fn rejects_invalid_trajectories() {
        assert!(Trajectory::<f64>::new(vec![[0.0, 0.0]], DT).is_err());
        assert!(Trajectory::new(vec![[0.0, 0.0], [f64::NAN, 0.0]], DT).is_err());
        assert!(Trajectory::<f64>::from_flat(&[1.0, 2.0, 3.0], DT).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let t = Trajectory::<f32>::new((0..10).map(|i| [i as f32, 0.0]).collect(), 0.5).unwrap();
        let s = summarize(&t);
        assert_eq!(s.displacement, 9.0);
        assert_eq!(s.speed_change, 1.0);
    }

    fn traj_strategy() -> impl Strategy<Value = Trajectory<f64>> {
        prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 10)
            .prop_map(|v| Trajectory::new(v.into_iter().map(|(x, y)| [x, y]).collect(), DT).unwrap())
    }

    proptest! {
        #[test]
        fn ade_is_a_pseudometric(a in traj_strategy(), b in traj_strategy(), c in traj_strategy()) {
            let ab = ade(&a, &b).unwrap();
            let ba = ade(&b, &a).unwrap();
            let bc = ade(&b, &c).unwrap();
            let ac = ade(&a, &c).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn mirroring_negates_heading_and_lateral(
            radius in 3.0f64..40.0,
            sweep in -2.8f64..2.8,
        ) {
            let t = arc(radius, sweep, 10);
            let s = summarize(&t);
            let m = summarize(&t.mirrored());
            prop_assert!((m.heading_change + s.heading_change).abs() < 1e-9);
            prop_assert!((m.lateral_shift + s.lateral_shift).abs() < 1e-9);
            prop_assert!((m.displacement - s.displacement).abs() < 1e-9);
            prop_assert!((m.speed_change - s.speed_change).abs() < 1e-9);
        }

        #[test]
        fn summary_ranges(t in traj_strategy()) {
            let s = summarize(&t);
            prop_assert!(s.heading_change > -std::f64::consts::PI - 1e-12);
            prop_assert!(s.heading_change <= std::f64::consts::PI);
            prop_assert!(s.displacement >= 0.0);
            prop_assert!(s.speed_change >= 0.0);
        }
    }
}
