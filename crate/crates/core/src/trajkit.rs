//! Planar poses, rigid transforms and fixed-rate pose sequences.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position in meters plus heading in radians.
///
/// Headings are kept unwrapped along a track so that consecutive values stay
/// continuous across ±π; use [`wrap_angle`] when a residual is needed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub const ZERO: Pose = Pose {
        x: 0.0,
        y: 0.0,
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose { x, y, theta }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut r = theta.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

/// A proper rigid motion of the plane: rotate by `rotation`, then translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub translation: (f64, f64),
    pub rotation: f64,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        translation: (0.0, 0.0),
        rotation: 0.0,
    };

    /// The transform taking ego-frame coordinates to the world frame, where
    /// `origin` is the ego pose in the world.
    pub fn from_pose(origin: &Pose) -> Self {
        RigidTransform {
            translation: (origin.x, origin.y),
            rotation: origin.theta,
        }
    }

    pub fn apply(&self, p: &Pose) -> Pose {
        let (s, c) = self.rotation.sin_cos();
        Pose {
            x: c * p.x - s * p.y + self.translation.0,
            y: s * p.x + c * p.y + self.translation.1,
            theta: p.theta + self.rotation,
        }
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = self.rotation.sin_cos();
        let (tx, ty) = self.translation;
        RigidTransform {
            translation: (-(c * tx + s * ty), s * tx - c * ty),
            rotation: -self.rotation,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        let t = self.apply(&Pose::new(other.translation.0, other.translation.1, 0.0));
        RigidTransform {
            translation: (t.x, t.y),
            rotation: self.rotation + other.rotation,
        }
    }
}

/// Poses sampled at a uniform rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    poses: Vec<Pose>,
    dt: f64,
}

impl PoseSequence {
    pub fn new(poses: Vec<Pose>, dt: f64) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::invalid("pose sequence must contain at least one pose"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("pose sequence dt must be positive, got {dt}")));
        }
        if let Some(i) = poses.iter().position(|p| !p.is_finite()) {
            return Err(Error::invalid(format!("non-finite pose at index {i}")));
        }
        Ok(PoseSequence { poses, dt })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn first(&self) -> &Pose {
        &self.poses[0]
    }

    pub fn last(&self) -> &Pose {
        &self.poses[self.poses.len() - 1]
    }

    pub fn duration(&self) -> f64 {
        self.dt * (self.poses.len() - 1) as f64
    }

    pub fn into_poses(self) -> Vec<Pose> {
        self.poses
    }

    pub fn transformed(&self, t: &RigidTransform) -> PoseSequence {
        PoseSequence {
            poses: self.poses.iter().map(|p| t.apply(p)).collect(),
            dt: self.dt,
        }
    }

    /// Total path length, summing the straight segments between positions.
    pub fn arc_length(&self) -> f64 {
        self.poses.windows(2).map(|w| w[0].distance(&w[1])).sum()
    }

    /// Shifts every heading by the same multiple of 2π so that the final
    /// heading lies in `(-π, π]`. Continuity along the sequence is kept.
    pub fn rewound(&self) -> PoseSequence {
        let last = self.last().theta;
        let shift = wrap_angle(last) - last;
        PoseSequence {
            poses: self
                .poses
                .iter()
                .map(|p| Pose::new(p.x, p.y, p.theta + shift))
                .collect(),
            dt: self.dt,
        }
    }
}

/// Expresses `seq` relative to `origin`: translate by `-origin`, rotate by
/// `-origin.theta` and subtract `origin.theta` from every heading.
pub fn to_ego_frame(seq: &PoseSequence, origin: &Pose) -> PoseSequence {
    seq.transformed(&RigidTransform::from_pose(origin).inverse())
}

/// Inverse of [`to_ego_frame`].
pub fn from_ego_frame(seq: &PoseSequence, origin: &Pose) -> PoseSequence {
    seq.transformed(&RigidTransform::from_pose(origin))
}

pub fn pose_to_ego_frame(p: &Pose, origin: &Pose) -> Pose {
    RigidTransform::from_pose(origin).inverse().apply(p)
}

pub fn pose_from_ego_frame(p: &Pose, origin: &Pose) -> Pose {
    RigidTransform::from_pose(origin).apply(p)
}

/// Keeps every `factor`-th pose counting backward from the last one, so the
/// most recent pose always survives. The output rate is divided by `factor`.
pub fn resample(seq: &PoseSequence, factor: usize) -> Result<PoseSequence> {
    if factor == 0 {
        return Err(Error::invalid("resample factor must be at least 1"));
    }
    let n = seq.len();
    let mut kept: Vec<Pose> = (0..n)
        .rev()
        .step_by(factor)
        .map(|i| seq.poses[i])
        .collect();
    kept.reverse();
    Ok(PoseSequence {
        poses: kept,
        dt: seq.dt * factor as f64,
    })
}

/// Removes 2π jumps from a heading series, keeping the first value.
pub fn unwrap_angles(angles: &mut [f64]) {
    for i in 1..angles.len() {
        let d = wrap_angle(angles[i] - angles[i - 1]);
        angles[i] = angles[i - 1] + d;
    }
}

/// Mean heading of a set of angles via the mean unit vector.
pub fn circular_mean(angles: impl IntoIterator<Item = f64>) -> f64 {
    let (s, c) = angles
        .into_iter()
        .fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    s.atan2(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(poses: Vec<Pose>) -> PoseSequence {
        PoseSequence::new(poses, 0.04).unwrap()
    }

    #[test]
    fn ego_frame_zeroes_the_origin_pose() {
        let origin = Pose::new(3.0, -2.0, 0.7);
        let s = seq(vec![origin, Pose::new(4.0, -1.0, 0.9)]);
        let e = to_ego_frame(&s, &origin);
        let p0 = e.first();
        assert!(p0.x.abs() < 1e-12 && p0.y.abs() < 1e-12 && p0.theta.abs() < 1e-12);
    }

    #[test]
    fn ego_frame_identity_origin() {
        let s = seq(vec![Pose::new(1.5, 2.5, 0.3), Pose::new(-1.0, 0.0, 4.0)]);
        assert_eq!(to_ego_frame(&s, &Pose::ZERO), s);
    }

    #[test]
    fn ego_frame_quarter_turn() {
        // R(-π/2) (1, 0) = (cos(-π/2), sin(-π/2)) = (0, -1)
        let s = seq(vec![Pose::new(1.0, 0.0, 0.0)]);
        let e = to_ego_frame(&s, &Pose::new(0.0, 0.0, PI / 2.0));
        let p = e.first();
        assert!(p.x.abs() < 1e-12);
        assert!((p.y + 1.0).abs() < 1e-12);
        assert!((p.theta + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_examples() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        // oracle: add 2π until inside (-π, π]
        let mut oracle = -PI - 0.1;
        while oracle <= -PI {
            oracle += TAU;
        }
        assert!((wrap_angle(-PI - 0.1) - oracle).abs() < 1e-12);
        assert!((oracle - (PI - 0.1)).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
    }

    #[test]
    fn resample_counts_and_anchor_on_last() {
        let hist = seq((0..50).map(|i| Pose::new(i as f64, 0.0, 0.0)).collect());
        let r = resample(&hist, 4).unwrap();
        assert_eq!(r.len(), 13);
        assert_eq!(r.last().x, 49.0);
        assert_eq!(r.first().x, 1.0);
        assert!((r.dt() - 0.16).abs() < 1e-15);

        let fut = seq((0..100).map(|i| Pose::new(i as f64, 0.0, 0.0)).collect());
        let r = resample(&fut, 4).unwrap();
        assert_eq!(r.len(), 25);
        assert_eq!(r.first().x, 3.0);

        assert_eq!(resample(&hist, 1).unwrap(), hist);
        assert!(resample(&hist, 0).is_err());
    }

    #[test]
    fn sequence_rejects_bad_input() {
        assert!(PoseSequence::new(vec![], 0.1).is_err());
        assert!(PoseSequence::new(vec![Pose::ZERO], 0.0).is_err());
        assert!(PoseSequence::new(vec![Pose::new(f64::NAN, 0.0, 0.0)], 0.1).is_err());
    }

    #[test]
    fn unwrap_removes_jumps() {
        let mut a = vec![3.0, -3.0, -2.9];
        unwrap_angles(&mut a);
        assert!((a[1] - (TAU - 3.0)).abs() < 1e-12);
        assert!(a[2] > a[1]);
    }

    #[test]
    fn rigid_compose_inverse_is_identity() {
        let t = RigidTransform {
            translation: (2.0, -7.0),
            rotation: 1.2,
        };
        let id = t.compose(&t.inverse());
        let p = Pose::new(0.3, 0.4, 0.5);
        let q = id.apply(&p);
        assert!(p.distance(&q) < 1e-9 && (p.theta - q.theta).abs() < 1e-9);
    }

    fn pose_strategy() -> impl Strategy<Value = Pose> {
        (-100.0..100.0f64, -100.0..100.0f64, -10.0..10.0f64).prop_map(|(x, y, t)| Pose::new(x, y, t))
    }

    proptest! {
        #[test]
        fn ego_frame_round_trip(ps in prop::collection::vec(pose_strategy(), 1..10), o in pose_strategy()) {
            let s = seq(ps);
            let back = from_ego_frame(&to_ego_frame(&s, &o), &o);
            for (a, b) in s.poses().iter().zip(back.poses()) {
                prop_assert!(a.distance(b) <= 1e-9);
                prop_assert!((a.theta - b.theta).abs() <= 1e-9);
            }
        }

        #[test]
        fn ego_frame_is_isometry(ps in prop::collection::vec(pose_strategy(), 2..8), o in pose_strategy()) {
            let s = seq(ps);
            let e = to_ego_frame(&s, &o);
            for i in 0..s.len() {
                for j in 0..s.len() {
                    let d0 = s.poses()[i].distance(&s.poses()[j]);
                    let d1 = e.poses()[i].distance(&e.poses()[j]);
                    prop_assert!((d0 - d1).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn wrap_is_idempotent_and_congruent(t in -1e3..1e3f64) {
            let w = wrap_angle(t);
            prop_assert!(w > -PI && w <= PI);
            prop_assert_eq!(wrap_angle(w), w);
            let k = (t - w) / TAU;
            prop_assert!((k - k.round()).abs() < 1e-9);
        }

        #[test]
        fn resample_then_unit_resample(n in 1usize..120, f in 1usize..7) {
            let s = seq((0..n).map(|i| Pose::new(i as f64, 0.0, 0.0)).collect());
            let once = resample(&s, f).unwrap();
            prop_assert_eq!(resample(&once, 1).unwrap(), once.clone());
            prop_assert_eq!(once.len(), n.div_ceil(f));
        }
    }
}
