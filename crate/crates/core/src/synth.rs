//! Synthetic two-lane roundabout with scripted vehicles.
//!
//! The ring is a regular polygonal annulus centered at the origin, split
//! into eight 45° sectors with an inner and an outer lane zone each. Arms
//! point outward at `22.5° + k·360°/arms`; traffic circulates
//! counterclockwise and keeps right. Every vehicle follows a fixed path
//! (straight approach, fillet, circulation, fillet, straight departure) with
//! a piecewise-constant acceleration plan, so labels can be derived from the
//! plan itself.
//!
//! Zone ids: outer lane sectors 1..=8, inner lane sectors 9..=16, arm `k`
//! uses `101 + 3k` (entry), `102 + 3k` (second entry on arm 0, an excluded
//! side lane elsewhere) and `103 + 3k` (exit); 200 is an excluded parking
//! area.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_8, PI, TAU};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AgentClass, FrameRecord, RawTrack};
use crate::maneuvers::{AccelerationClass, ManeuverLabel};
use crate::par;
use crate::zones::{LocationClass, Polygon, Section, Zone, ZoneKind, ZoneMap};

/// Location sections of the ring.
pub const NUM_SECTIONS: usize = 8;
/// Polygon vertices per full turn of each ring circle.
const RING_VERTICES: usize = 720;
const FAR_ZONE_ID: i64 = 200;
/// Distance into the arm zones where paths start and end.
const END_MARGIN: f64 = 1.0;
const SIDE_LANE_SETBACK: f64 = 15.0;
const ARM_OVERLAP: f64 = 0.5;
const ARM_ZONE_BASE: i64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub recording_id: i64,
    pub vehicles: usize,
    /// Vehicles spawn uniformly over this many seconds.
    pub duration_s: f64,
    pub frame_rate: f64,
    /// Outer ring radius (m).
    pub ring_radius: f64,
    pub ring_lane_width: f64,
    pub arm_lane_width: f64,
    pub arm_length: f64,
    pub arms: usize,
    pub fillet_radius: f64,
    /// Approach and post-exit cruise speeds (m/s), drawn per vehicle.
    pub speed_range: (f64, f64),
    /// Arm `k` adds `k` times this to the approach and exit speeds, so the
    /// approach reveals where a vehicle entered.
    pub arm_speed_step: f64,
    /// Target circulation speed (m/s) in each of the eight ring sections.
    /// Vehicles brake on the approach to the speed of the section they merge
    /// into and change speed at every section boundary they cross.
    pub section_speeds: Vec<f64>,
    /// Per-vehicle offset drawn from `[-jitter, jitter]` and added to every
    /// section speed.
    pub speed_jitter: f64,
    /// Chance that a vehicle leaving at the second or a later exit uses the
    /// inner ring lane; first-exit traffic always keeps to the outer lane.
    pub inner_lane_prob: f64,
    /// Magnitude of non-zero accelerations (m/s²), drawn per vehicle.
    pub accel_range: (f64, f64),
    /// Odds of leaving at the 1st, 2nd, ... exit after entering.
    pub exit_weights: Vec<f64>,
    /// Gaussian noise (m) added to emitted x/y positions.
    pub noise_std: f64,
    /// Acceleration magnitudes are snapped so no window mean sits near this
    /// class threshold.
    pub label_threshold: f64,
    pub history_s: f64,
    pub future_s: f64,
    pub downsample: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            recording_id: 0,
            vehicles: 200,
            duration_s: 600.0,
            frame_rate: 25.0,
            ring_radius: 25.0,
            ring_lane_width: 4.0,
            arm_lane_width: 3.5,
            arm_length: 50.0,
            arms: 4,
            fillet_radius: 10.0,
            speed_range: (9.0, 10.0),
            arm_speed_step: 1.0,
            section_speeds: vec![4.0, 7.5, 3.5, 6.5, 5.0, 8.0, 4.5, 7.0],
            speed_jitter: 0.15,
            inner_lane_prob: 1.0,
            accel_range: (0.8, 2.0),
            exit_weights: vec![0.35, 0.4, 0.25],
            noise_std: 0.0,
            label_threshold: 0.5,
            history_s: 2.0,
            future_s: 4.0,
            downsample: 4,
        }
    }
}

fn finite_pos(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

fn range_ok(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    finite_pos(name, lo)?;
    finite_pos(name, hi)?;
    if lo > hi {
        return Err(Error::Config(format!("{name} lower bound {lo} exceeds upper {hi}")));
    }
    Ok(())
}

fn weights_ok(name: &str, w: &[f64]) -> Result<()> {
    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("{name} must be non-negative with a positive sum")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("duration_s", self.duration_s),
            ("frame_rate", self.frame_rate),
            ("ring_radius", self.ring_radius),
            ("ring_lane_width", self.ring_lane_width),
            ("arm_lane_width", self.arm_lane_width),
            ("arm_length", self.arm_length),
            ("fillet_radius", self.fillet_radius),
            ("label_threshold", self.label_threshold),
            ("history_s", self.history_s),
            ("future_s", self.future_s),
        ] {
            finite_pos(n, v)?;
        }
        range_ok("speed_range", self.speed_range)?;
        range_ok("accel_range", self.accel_range)?;
        if self.section_speeds.len() != NUM_SECTIONS {
            return Err(Error::Config(format!(
                "section_speeds needs {NUM_SECTIONS} entries, got {}",
                self.section_speeds.len()
            )));
        }
        for &v in &self.section_speeds {
            finite_pos("section_speeds", v)?;
        }
        if !(self.speed_jitter.is_finite() && self.speed_jitter >= 0.0) {
            return Err(Error::Config("speed_jitter must be non-negative".into()));
        }
        let slowest = self.section_speeds.iter().copied().fold(f64::INFINITY, f64::min);
        if self.speed_jitter >= slowest {
            return Err(Error::Config("speed_jitter would allow non-positive section speeds".into()));
        }
        if !(0.0..=1.0).contains(&self.inner_lane_prob) {
            return Err(Error::Config("inner_lane_prob must lie in [0, 1]".into()));
        }
        if !(self.arm_speed_step.is_finite() && self.arm_speed_step >= 0.0) {
            return Err(Error::Config("arm_speed_step must be non-negative".into()));
        }
        if self.arms < 2 {
            return Err(Error::Config("at least two arms are needed".into()));
        }
        if self.exit_weights.len() != self.arms - 1 {
            return Err(Error::Config(format!(
                "exit_weights needs {} entries for {} arms, got {}",
                self.arms - 1,
                self.arms,
                self.exit_weights.len()
            )));
        }
        weights_ok("exit_weights", &self.exit_weights)?;
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if self.downsample == 0 {
            return Err(Error::Config("downsample must be at least 1".into()));
        }
        for (n, s) in [("history_s", self.history_s), ("future_s", self.future_s)] {
            let f = s * self.frame_rate;
            if (f - f.round()).abs() > 1e-9 {
                return Err(Error::Config(format!("{n} is not a whole number of frames")));
            }
        }
        if self.noise_std > 0.25 * self.arm_lane_width {
            return Err(Error::Config("noise_std would push vehicles out of their lanes".into()));
        }
        Geometry::new(self).map(|_| ())
    }

    fn history_frames(&self) -> usize {
        (self.history_s * self.frame_rate).round() as usize
    }

    fn future_frames(&self) -> usize {
        (self.future_s * self.frame_rate).round() as usize
    }
}

#[derive(Debug, Clone, Copy)]
struct Arm {
    angle: f64,
    u: (f64, f64),
    t: (f64, f64),
    section: usize,
}

impl Arm {
    fn new(angle: f64) -> Arm {
        let (s, c) = angle.sin_cos();
        Arm {
            angle,
            u: (c, s),
            t: (-s, c),
            section: (angle.rem_euclid(TAU) / FRAC_PI_4).floor() as usize + 1,
        }
    }

    fn at(&self, a: f64, b: f64) -> (f64, f64) {
        (a * self.u.0 + b * self.t.0, a * self.u.1 + b * self.t.1)
    }

    /// Axial and lateral coordinates of `p`.
    fn local(&self, p: (f64, f64)) -> (f64, f64) {
        (p.0 * self.u.0 + p.1 * self.u.1, p.0 * self.t.0 + p.1 * self.t.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum LaneRole {
    Entry,
    Exit,
    Excluded,
}

struct ArmLane {
    id: i64,
    role: LaneRole,
    rects: Vec<(f64, f64, f64, f64)>,
    outline: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
struct Geometry {
    r_out: f64,
    r_mid: f64,
    r_in: f64,
    w: f64,
    arm_len: f64,
    rho: f64,
    arms: Vec<Arm>,
}

impl Geometry {
    fn new(cfg: &SynthConfig) -> Result<Geometry> {
        let r_out = cfg.ring_radius;
        let r_in = r_out - 2.0 * cfg.ring_lane_width;
        if r_in <= 2.0 {
            return Err(Error::Config(format!(
                "two {} m lanes do not fit inside a {} m ring",
                cfg.ring_lane_width, r_out
            )));
        }
        let w = cfg.arm_lane_width;
        let spacing = TAU / cfg.arms as f64;
        if 2.0 * (2.0 * w / r_out).atan() >= spacing {
            return Err(Error::Config(format!(
                "{} arms of {} m lanes overlap on a {} m ring",
                cfg.arms, w, r_out
            )));
        }
        let g = Geometry {
            r_out,
            r_mid: r_out - cfg.ring_lane_width,
            r_in,
            w,
            arm_len: cfg.arm_length,
            rho: cfg.fillet_radius,
            arms: (0..cfg.arms)
                .map(|j| Arm::new(FRAC_PI_8 + spacing * j as f64))
                .collect(),
        };
        // The tightest path: rightmost entry lane to the outer ring lane, first exit.
        for (e_in, rc) in [(1.5 * w, g.lane_radius(false)), (0.5 * w, g.lane_radius(true))] {
            let (a_in, d_in) = g.fillet(e_in, rc);
            let (a_out, d_out) = g.fillet(0.5 * w, rc);
            if d_in + d_out >= spacing {
                return Err(Error::Config(format!(
                    "fillet radius {} leaves no circulation between adjacent arms",
                    g.rho
                )));
            }
            if a_in.max(a_out) >= r_out + SIDE_LANE_SETBACK || r_out + g.arm_len - END_MARGIN <= r_out + SIDE_LANE_SETBACK {
                return Err(Error::Config("arms are too short for the fillets".into()));
            }
        }
        Ok(g)
    }

    fn lane_radius(&self, inner: bool) -> f64 {
        if inner {
            0.5 * (self.r_in + self.r_mid)
        } else {
            0.5 * (self.r_mid + self.r_out)
        }
    }

    /// Axial position of the fillet center for lateral offset `e` and ring
    /// lane radius `rc`, and the angle it subtends from the arm axis.
    fn fillet(&self, e: f64, rc: f64) -> (f64, f64) {
        let a = ((rc + self.rho).powi(2) - (e + self.rho).powi(2)).sqrt();
        (a, (e + self.rho).atan2(a))
    }

    /// Lane zones of one arm as unions of axial x lateral rectangles, plus
    /// their outline in the same local coordinates. Entry and exit lanes
    /// widen near the ring to cover the fillets.
    fn lanes(&self, arm: usize) -> Vec<ArmLane> {
        let base = ARM_ZONE_BASE + 3 * arm as i64;
        let w = self.w;
        // overlaps the ring slightly; ring zones have lower ids and win
        let a0 = self.r_out - ARM_OVERLAP;
        let a1 = self.r_out + self.arm_len;
        let sb = a0 + SIDE_LANE_SETBACK;
        let exit = ArmLane {
            id: base + 3,
            role: LaneRole::Exit,
            rects: vec![(a0, a1, -w, 0.0), (a0, sb, -2.0 * w, -w)],
            outline: vec![(a0, 0.0), (a0, -2.0 * w), (sb, -2.0 * w), (sb, -w), (a1, -w), (a1, 0.0)],
        };
        if arm == 0 {
            let rect = |id, b0, b1| ArmLane {
                id,
                role: LaneRole::Entry,
                rects: vec![(a0, a1, b0, b1)],
                outline: vec![(a0, b0), (a1, b0), (a1, b1), (a0, b1)],
            };
            return vec![rect(base + 1, 0.0, w), rect(base + 2, w, 2.0 * w), exit];
        }
        vec![
            ArmLane {
                id: base + 1,
                role: LaneRole::Entry,
                rects: vec![(a0, a1, 0.0, w), (a0, sb, w, 2.0 * w)],
                outline: vec![(a0, 0.0), (a1, 0.0), (a1, w), (sb, w), (sb, 2.0 * w), (a0, 2.0 * w)],
            },
            ArmLane {
                id: base + 2,
                role: LaneRole::Excluded,
                rects: vec![(sb, a1, w, 2.0 * w)],
                outline: vec![(sb, w), (a1, w), (a1, 2.0 * w), (sb, 2.0 * w)],
            },
            exit,
        ]
    }

    fn ring_polygon(&self, r_lo: f64, r_hi: f64, sector: usize) -> Result<Polygon> {
        let per = RING_VERTICES / NUM_SECTIONS;
        let k0 = sector * per;
        let vertex = |r: f64, k: usize| {
            let a = TAU * k as f64 / RING_VERTICES as f64;
            (r * a.cos(), r * a.sin())
        };
        let mut v: Vec<(f64, f64)> = (k0..=k0 + per).map(|k| vertex(r_hi, k)).collect();
        v.extend((k0..=k0 + per).rev().map(|k| vertex(r_lo, k)));
        Polygon::new(v)
    }

    fn zone_map(&self) -> Result<ZoneMap> {
        let mut zones = Vec::new();
        for (j, arm) in self.arms.iter().enumerate() {
            for ArmLane { id, role, outline, .. } in self.lanes(j) {
                let polygon = Polygon::new(outline.into_iter().map(|(a, b)| arm.at(a, b)).collect())?;
                let (kind, feeds) = match role {
                    LaneRole::Entry => (ZoneKind::Entry, Some(arm.section)),
                    LaneRole::Exit => (ZoneKind::Exit, Some(arm.section)),
                    LaneRole::Excluded => (ZoneKind::Excluded, None),
                };
                zones.push(Zone {
                    id,
                    kind,
                    feeds_section: feeds,
                    polygon,
                });
            }
        }
        let mut sections = Vec::new();
        for p in 0..NUM_SECTIONS {
            let outer = 1 + p as i64;
            let inner = 1 + (NUM_SECTIONS + p) as i64;
            zones.push(Zone {
                id: outer,
                kind: ZoneKind::Circular,
                feeds_section: None,
                polygon: self.ring_polygon(self.r_mid, self.r_out, p)?,
            });
            zones.push(Zone {
                id: inner,
                kind: ZoneKind::Circular,
                feeds_section: None,
                polygon: self.ring_polygon(self.r_in, self.r_mid, p)?,
            });
            sections.push(Section {
                id: p + 1,
                zones: vec![outer, inner],
            });
        }
        // A parking area between the last and the first arm.
        let mid = Arm::new(self.arms[0].angle - PI / self.arms.len() as f64);
        let d = self.r_out + self.arm_len + 20.0;
        zones.push(Zone {
            id: FAR_ZONE_ID,
            kind: ZoneKind::Excluded,
            feeds_section: None,
            polygon: Polygon::new(vec![mid.at(d, -5.0), mid.at(d + 10.0, -5.0), mid.at(d + 10.0, 5.0), mid.at(d, 5.0)])?,
        });
        ZoneMap::new(zones, sections)
    }

    /// Ring section containing `p`, using the exact polygonal annulus.
    fn ring_section(&self, p: (f64, f64)) -> Option<usize> {
        let r = p.0.hypot(p.1);
        let phi = p.1.atan2(p.0).rem_euclid(TAU);
        let step = TAU / RING_VERTICES as f64;
        let k = (phi / step).floor();
        // Distance along the normal of the edge spanning phi, scaled to the
        // circumradius.
        let rho = r * (phi - (k + 0.5) * step).cos() / (0.5 * step).cos();
        if rho < self.r_in || rho > self.r_out {
            return None;
        }
        Some(((phi / FRAC_PI_4).floor() as usize).min(NUM_SECTIONS - 1) + 1)
    }

    /// Section fed by the entry or exit lane rectangle containing `p`.
    fn arm_feed(&self, p: (f64, f64)) -> Option<usize> {
        for (j, arm) in self.arms.iter().enumerate() {
            let (a, b) = arm.local(p);
            for lane in self.lanes(j) {
                if lane.role != LaneRole::Excluded
                    && lane.rects.iter().any(|&(a0, a1, b0, b1)| a >= a0 && a <= a1 && b >= b0 && b <= b1)
                {
                    return Some(arm.section);
                }
            }
        }
        None
    }

    fn path(&self, entry: usize, e_in: f64, inner: bool, exit: usize) -> Route {
        let rc = self.lane_radius(inner);
        let e_out = 0.5 * self.w;
        let start_a = self.r_out + self.arm_len - END_MARGIN;
        let ai = self.arms[entry];
        let ao = self.arms[exit];
        let (ac_in, _) = self.fillet(e_in, rc);
        let (ac_out, _) = self.fillet(e_out, rc);
        let c1 = ai.at(ac_in, e_in + self.rho);
        let c3 = ao.at(ac_out, -(e_out + self.rho));
        let ang = |v: (f64, f64)| v.1.atan2(v.0);
        let neg = |v: (f64, f64)| (-v.0, -v.1);

        let mut segs = Vec::new();
        segs.push(Segment::Line {
            origin: ai.at(start_a, e_in),
            heading: ang(neg(ai.u)),
            len: start_a - ac_in,
        });
        let a1_start = ang(neg(ai.t));
        let a1_end = ang(neg(c1));
        segs.push(Segment::Arc {
            center: c1,
            radius: self.rho,
            start: a1_start,
            sign: -1.0,
            len: self.rho * (a1_start - a1_end).rem_euclid(TAU),
        });
        let circ_start = ang(c1);
        let circ_end = ang(c3);
        segs.push(Segment::Arc {
            center: (0.0, 0.0),
            radius: rc,
            start: circ_start,
            sign: 1.0,
            len: rc * (circ_end - circ_start).rem_euclid(TAU),
        });
        let a3_start = ang(neg(c3));
        let a3_end = ang(ao.t);
        segs.push(Segment::Arc {
            center: c3,
            radius: self.rho,
            start: a3_start,
            sign: -1.0,
            len: self.rho * (a3_start - a3_end).rem_euclid(TAU),
        });
        segs.push(Segment::Line {
            origin: ao.at(ac_out, -e_out),
            heading: ang(ao.u),
            len: start_a - ac_out,
        });
        Route::new(segs)
    }
}

#[derive(Debug, Clone, Copy)]
enum Segment {
    Line { origin: (f64, f64), heading: f64, len: f64 },
    Arc { center: (f64, f64), radius: f64, start: f64, sign: f64, len: f64 },
}

impl Segment {
    fn len(&self) -> f64 {
        match *self {
            Segment::Line { len, .. } | Segment::Arc { len, .. } => len,
        }
    }

    /// Position and heading `s` metres along the segment.
    fn eval(&self, s: f64) -> (f64, f64, f64) {
        match *self {
            Segment::Line { origin, heading, .. } => {
                let (sn, cs) = heading.sin_cos();
                (origin.0 + s * cs, origin.1 + s * sn, heading)
            }
            Segment::Arc { center, radius, start, sign, .. } => {
                let a = start + sign * s / radius;
                (center.0 + radius * a.cos(), center.1 + radius * a.sin(), a + sign * FRAC_PI_2)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Route {
    segs: Vec<Segment>,
    starts: Vec<f64>,
    total: f64,
}

impl Route {
    fn new(segs: Vec<Segment>) -> Route {
        let mut starts = Vec::with_capacity(segs.len());
        let mut acc = 0.0;
        for s in &segs {
            starts.push(acc);
            acc += s.len();
        }
        Route { segs, starts, total: acc }
    }

    /// Beyond either end the straight end segments are extrapolated.
    fn eval(&self, s: f64) -> (f64, f64, f64) {
        let i = self.starts.partition_point(|&st| st <= s).saturating_sub(1);
        self.segs[i].eval(s - self.starts[i])
    }
}

/// Scripted behaviour of one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehiclePlan {
    pub track_id: i64,
    pub class: AgentClass,
    pub length: f64,
    pub width: f64,
    pub spawn_frame: i64,
    pub entry_arm: usize,
    pub exit_arm: usize,
    pub inner_lane: bool,
    /// Non-zero acceleration magnitude (m/s²).
    pub accel_magnitude: f64,
    /// Distance along the path at frames -1..=n (m).
    pub distance: Vec<f64>,
    /// Constant acceleration over each frame interval starting at -1..n.
    pub accel: Vec<f64>,
}

impl VehiclePlan {
    /// Emitted frames.
    pub fn num_frames(&self) -> usize {
        self.distance.len() - 2
    }

    /// Distance travelled at emitted frame `i`.
    pub fn s(&self, i: usize) -> f64 {
        self.distance[i + 1]
    }

    /// Acceleration over the interval from emitted frame `i` to `i + 1`.
    pub fn interval_accel(&self, i: isize) -> f64 {
        self.accel[(i + 1) as usize]
    }
}

/// Ground-truth maneuver of the window whose current frame is `frame`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoldenLabel {
    pub recording_id: i64,
    pub track_id: i64,
    pub frame: i64,
    /// `None` when no section can be resolved.
    pub label: Option<ManeuverLabel>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub config: SynthConfig,
    pub tracks: Vec<RawTrack>,
    pub plans: Vec<VehiclePlan>,
    pub zone_map: ZoneMap,
    pub golden: Vec<GoldenLabel>,
}

fn pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Per-vehicle stream seed.
fn vehicle_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Snaps `a` so that `threshold·frames/a` lies a quarter away from every
/// multiple of one half. Window means are `a·c/frames` with `c` a multiple
/// of one half, so they stay at least `a/(4·frames)` from the threshold.
fn snap_magnitude(a: f64, threshold: f64, frames: usize) -> f64 {
    let r = threshold * frames as f64 / a;
    let snapped = ((r - 0.25) * 2.0).round() / 2.0 + 0.25;
    threshold * frames as f64 / snapped.max(0.25)
}

fn plan_vehicle(cfg: &SynthConfig, geo: &Geometry, index: usize) -> (VehiclePlan, Route) {
    let mut rng = ChaCha8Rng::seed_from_u64(vehicle_seed(cfg.seed, index as u64));
    let dt = 1.0 / cfg.frame_rate;
    let spawn_frame = (rng.random::<f64>() * cfg.duration_s * cfg.frame_rate).floor() as i64;
    let (class, length, width) = match rng.random_range(0..10) {
        0 => (AgentClass::Truck, 9.0, 2.5),
        1 => (AgentClass::Van, 5.5, 2.0),
        _ => (AgentClass::Car, 4.6, 1.8),
    };
    let entry = rng.random_range(0..cfg.arms);
    let m = pick(&mut rng, &cfg.exit_weights) + 1;
    let exit = (entry + m) % cfg.arms;
    let inner = m > 1 && rng.random::<f64>() < cfg.inner_lane_prob;
    let lateral = if entry == 0 && !inner && m == 1 { 1.5 } else { 0.5 } * geo.w;
    let path = geo.path(entry, lateral, inner, exit);

    let raw = rng.random_range(cfg.accel_range.0..=cfg.accel_range.1);
    let mag = snap_magnitude(raw, cfg.label_threshold, cfg.future_frames());
    let shift = cfg.arm_speed_step * entry as f64;
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| rng.random_range(lo..=hi) + shift;
    let jitter = if cfg.speed_jitter > 0.0 {
        rng.random_range(-cfg.speed_jitter..=cfg.speed_jitter)
    } else {
        0.0
    };
    let v_exit = draw(&mut rng, cfg.speed_range);
    let entry_curve = path.starts[1];
    let (circ_start, exit_curve) = (path.starts[2], path.starts[3]);
    let Segment::Arc { radius: rc, start: phi0, .. } = path.segs[2] else {
        unreachable!("the third route segment is the ring arc")
    };
    // target speed of the ring section at path distance `s` (at least the merge point)
    let ring_target = |s: f64| {
        let phi = (phi0 + (s.max(circ_start) - circ_start) / rc).rem_euclid(TAU);
        let k = ((phi / FRAC_PI_4).floor() as usize).min(NUM_SECTIONS - 1);
        cfg.section_speeds[k] + jitter
    };
    let v_join = ring_target(circ_start);
    // start fast enough to still be braking when the approach begins at most
    let mut v = draw(&mut rng, cfg.speed_range)
        .max(v_join)
        .min((v_join * v_join + 2.0 * mag * entry_curve).sqrt());
    let brake_at = entry_curve - (v * v - v_join * v_join) / (2.0 * mag);
    let end = path.total;
    let mut distance = vec![-v * dt, 0.0];
    let mut accel = vec![0.0];
    let mut s = 0.0;
    let toward = |v: f64, target: f64| {
        if v - mag * dt >= target {
            -mag
        } else if v + mag * dt <= target {
            mag
        } else {
            0.0
        }
    };
    // Frames are emitted while on the path; one more is simulated so every
    // emitted frame has a central second difference.
    while s <= end {
        let a = if s < entry_curve {
            if s >= brake_at && v - mag * dt >= v_join {
                -mag
            } else {
                0.0
            }
        } else if s < exit_curve {
            toward(v, ring_target(s))
        } else {
            toward(v, v_exit)
        };
        s += v * dt + 0.5 * a * dt * dt;
        v += a * dt;
        distance.push(s);
        accel.push(a);
    }
    (
        VehiclePlan {
            track_id: index as i64 + 1,
            class,
            length,
            width,
            spawn_frame,
            entry_arm: entry,
            exit_arm: exit,
            inner_lane: inner,
            accel_magnitude: mag,
            distance,
            accel,
        },
        path,
    )
}

struct Simulated {
    plan: VehiclePlan,
    track: RawTrack,
    golden: Vec<GoldenLabel>,
}

fn simulate(cfg: &SynthConfig, geo: &Geometry, index: usize) -> Result<Simulated> {
    let (plan, path) = plan_vehicle(cfg, geo, index);
    let dt = 1.0 / cfg.frame_rate;
    let n = plan.num_frames();
    let truth: Vec<(f64, f64, f64)> = (0..n).map(|i| path.eval(plan.s(i))).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(vehicle_seed(cfg.seed ^ 0x6e6f_6973_6500_0000, index as u64));
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut frames = Vec::with_capacity(n);
    let mut heading_prev: Option<f64> = None;
    for (i, &(x, y, h)) in truth.iter().enumerate() {
        let (nx, ny) = if cfg.noise_std > 0.0 {
            (noise.sample(&mut rng), noise.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        let d = &plan.distance;
        let lon = (d[i + 2] - 2.0 * d[i + 1] + d[i]) / (dt * dt);
        // keep headings continuous like an unwrapped recording
        let theta = match heading_prev {
            Some(p) => p + crate::trajkit::wrap_angle(h - p),
            None => h,
        };
        heading_prev = Some(theta);
        frames.push(FrameRecord {
            frame: plan.spawn_frame + i as i64,
            x: x + nx,
            y: y + ny,
            theta,
            lon_acceleration: lon,
        });
    }

    let hist = cfg.history_frames();
    let fut = cfg.future_frames();
    let mut golden = Vec::new();
    if n >= hist + fut {
        for i in hist - 1..n - fut {
            golden.push(GoldenLabel {
                recording_id: cfg.recording_id,
                track_id: plan.track_id,
                frame: plan.spawn_frame + i as i64,
                label: golden_label(cfg, geo, &plan, &truth, i),
            });
        }
    }
    let track = RawTrack {
        recording_id: cfg.recording_id,
        track_id: plan.track_id,
        class: plan.class,
        frames,
        length: plan.length,
        width: plan.width,
        frame_rate: cfg.frame_rate,
    };
    Ok(Simulated { plan, track, golden })
}

fn golden_label(
    cfg: &SynthConfig,
    geo: &Geometry,
    plan: &VehiclePlan,
    truth: &[(f64, f64, f64)],
    i: usize,
) -> Option<ManeuverLabel> {
    let fut = cfg.future_frames();
    // Mean of the per-frame central differences over frames i+1..=i+fut,
    // written in terms of the interval accelerations.
    let ii = i as isize;
    let mut sum = 0.5 * (plan.interval_accel(ii) + plan.interval_accel(ii + fut as isize));
    for k in 1..fut as isize {
        sum += plan.interval_accel(ii + k);
    }
    let mean = sum / fut as f64;
    let acceleration = if mean < -cfg.label_threshold {
        AccelerationClass::Slowing
    } else if mean > cfg.label_threshold {
        AccelerationClass::Speeding
    } else {
        AccelerationClass::Constant
    };

    let steps = fut.div_ceil(cfg.downsample);
    let sampled: Vec<(f64, f64)> = (0..steps)
        .map(|k| {
            let (x, y, _) = truth[i + fut - k * cfg.downsample];
            (x, y)
        })
        .collect();
    let section = sampled
        .iter()
        .find_map(|&p| geo.ring_section(p))
        .or_else(|| geo.arm_feed(sampled[0]))?;
    Some(ManeuverLabel::new(
        LocationClass::new(section, NUM_SECTIONS).ok()?,
        acceleration,
    ))
}

/// Generates the roundabout, all vehicle tracks and their golden labels.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let geo = Geometry::new(cfg)?;
    let zone_map = geo.zone_map()?;
    let sims = par::map_range(cfg.vehicles, |i| simulate(cfg, &geo, i));
    let mut tracks = Vec::with_capacity(cfg.vehicles);
    let mut plans = Vec::with_capacity(cfg.vehicles);
    let mut golden = Vec::new();
    for s in sims {
        let s = s?;
        tracks.push(s.track);
        plans.push(s.plan);
        golden.extend(s.golden);
    }
    golden.sort_by_key(|g| (g.recording_id, g.track_id, g.frame));
    Ok(SynthOutput {
        config: cfg.clone(),
        tracks,
        plans,
        zone_map,
        golden,
    })
}

/// Zone map of the synthetic roundabout without simulating traffic.
pub fn zone_map(cfg: &SynthConfig) -> Result<ZoneMap> {
    cfg.validate()?;
    Geometry::new(cfg)?.zone_map()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Files written by [`write_outputs`].
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub tracks: PathBuf,
    pub tracks_meta: PathBuf,
    pub recording_meta: PathBuf,
    pub zones: PathBuf,
    pub golden: PathBuf,
}

/// Writes the recording in the RounD CSV layout, the zone map and the golden
/// labels into `dir`.
pub fn write_outputs(out: &SynthOutput, dir: &Path) -> Result<SynthFiles> {
    std::fs::create_dir_all(dir)?;
    let prefix = format!("{:02}", out.config.recording_id);
    let (tracks, tracks_meta, recording_meta) = crate::ingest::recording_files(dir, &prefix);
    let files = SynthFiles {
        tracks,
        tracks_meta,
        recording_meta,
        zones: dir.join("zones.json"),
        golden: dir.join("golden_labels.csv"),
    };
    let rid = out.config.recording_id.to_string();

    let mut w = csv::Writer::from_path(&files.tracks).map_err(|e| csv_err(&files.tracks, e))?;
    w.write_record([
        "recordingId",
        "trackId",
        "frame",
        "trackLifetime",
        "xCenter",
        "yCenter",
        "heading",
        "width",
        "length",
        "xVelocity",
        "yVelocity",
        "lonVelocity",
        "lonAcceleration",
    ])
    .map_err(|e| csv_err(&files.tracks, e))?;
    let dt = 1.0 / out.config.frame_rate;
    for (t, p) in out.tracks.iter().zip(&out.plans) {
        for (i, f) in t.frames.iter().enumerate() {
            let v = (p.distance[i + 2] - p.distance[i]) / (2.0 * dt);
            let rec = [
                rid.clone(),
                t.track_id.to_string(),
                f.frame.to_string(),
                i.to_string(),
                f.x.to_string(),
                f.y.to_string(),
                f.theta.to_degrees().rem_euclid(360.0).to_string(),
                t.width.to_string(),
                t.length.to_string(),
                (v * f.theta.cos()).to_string(),
                (v * f.theta.sin()).to_string(),
                v.to_string(),
                f.lon_acceleration.to_string(),
            ];
            w.write_record(&rec).map_err(|e| csv_err(&files.tracks, e))?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&files.tracks_meta).map_err(|e| csv_err(&files.tracks_meta, e))?;
    w.write_record(["recordingId", "trackId", "initialFrame", "finalFrame", "numFrames", "width", "length", "class"])
        .map_err(|e| csv_err(&files.tracks_meta, e))?;
    for t in &out.tracks {
        w.write_record([
            rid.clone(),
            t.track_id.to_string(),
            t.first_frame().to_string(),
            t.last_frame().to_string(),
            t.frames.len().to_string(),
            t.width.to_string(),
            t.length.to_string(),
            t.class.as_str().to_string(),
        ])
        .map_err(|e| csv_err(&files.tracks_meta, e))?;
    }
    w.flush()?;

    let last = out.tracks.iter().map(|t| t.last_frame()).max().unwrap_or(0);
    let mut text = String::from("recordingId,locationId,frameRate,duration,numTracks,numVehicles,numVRUs\n");
    let _ = writeln!(
        text,
        "{rid},0,{},{},{},{},0",
        out.config.frame_rate,
        (last + 1) as f64 / out.config.frame_rate,
        out.tracks.len(),
        out.tracks.len()
    );
    std::fs::write(&files.recording_meta, text)?;
    std::fs::write(&files.zones, out.zone_map.to_json())?;
    write_golden(&files.golden, &out.golden)?;
    Ok(files)
}

/// Golden labels as CSV: `recordingId,trackId,frame,location,acceleration`,
/// where unresolvable windows have empty label cells.
pub fn write_golden(path: &Path, golden: &[GoldenLabel]) -> Result<()> {
    let mut text = String::from("recordingId,trackId,frame,location,acceleration\n");
    for g in golden {
        match g.label {
            Some(l) => {
                let _ = writeln!(text, "{},{},{},{},{}", g.recording_id, g.track_id, g.frame, l.location.get(), l.acceleration.q());
            }
            None => {
                let _ = writeln!(text, "{},{},{},,", g.recording_id, g.track_id, g.frame);
            }
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{filter_tracks, make_samples, parse_recording, ColumnMap, SampleConfig};
    use crate::maneuvers::label_sample;
    use std::collections::BTreeMap;

    fn small(vehicles: usize, noise: f64) -> SynthConfig {
        SynthConfig {
            vehicles,
            duration_s: 60.0,
            noise_std: noise,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = small(6, 0.05);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let f1 = write_outputs(&generate(&cfg).unwrap(), d1.path()).unwrap();
        let f2 = write_outputs(&generate(&cfg).unwrap(), d2.path()).unwrap();
        for (a, b) in [(&f1.tracks, &f2.tracks), (&f1.zones, &f2.zones), (&f1.golden, &f2.golden), (&f1.tracks_meta, &f2.tracks_meta)] {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
        let other = generate(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(other.tracks[0].frames, generate(&small(6, 0.05)).unwrap().tracks[0].frames);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let cfg = small(5, 0.05);
        let a = generate(&cfg).unwrap();
        par::set_parallel(false);
        let b = generate(&cfg).unwrap();
        par::set_parallel(true);
        assert_eq!(a.tracks, b.tracks);
        assert_eq!(a.golden, b.golden);
    }

    #[test]
    fn acceleration_is_second_difference() {
        let out = generate(&small(8, 0.0)).unwrap();
        let dt = 1.0 / 25.0;
        for (t, p) in out.tracks.iter().zip(&out.plans) {
            for i in 0..t.frames.len() {
                let d = &p.distance;
                let want = (d[i + 2] - 2.0 * d[i + 1] + d[i]) / (dt * dt);
                assert!((t.frames[i].lon_acceleration - want).abs() < 1e-6);
                // and half the two adjacent interval accelerations
                let half = 0.5 * (p.interval_accel(i as isize - 1) + p.interval_accel(i as isize));
                assert!((t.frames[i].lon_acceleration - half).abs() < 1e-6);
            }
            // straight approach: the second difference of the positions is
            // the longitudinal acceleration
            for i in 1..40 {
                let f = &t.frames;
                let ax = (f[i + 1].x - 2.0 * f[i].x + f[i - 1].x) / (dt * dt);
                let ay = (f[i + 1].y - 2.0 * f[i].y + f[i - 1].y) / (dt * dt);
                let along = ax * f[i].theta.cos() + ay * f[i].theta.sin();
                assert!((along - f[i].lon_acceleration).abs() < 1e-6, "{along} vs {}", f[i].lon_acceleration);
            }
        }
    }

    #[test]
    fn paths_are_continuous() {
        let out = generate(&small(30, 0.0)).unwrap();
        for t in &out.tracks {
            for w in t.frames.windows(2) {
                let step = (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
                assert!(step < 13.5 / 25.0 + 1e-9, "jump of {step} m");
                assert!((w[1].theta - w[0].theta).abs() < 0.1);
            }
        }
    }

    #[test]
    fn tracks_survive_filtering() {
        let out = generate(&small(25, 0.05)).unwrap();
        let kept = filter_tracks(&out.tracks, &out.zone_map);
        assert_eq!(kept, out.tracks);
        for t in &out.tracks {
            let first = t.frames[0];
            let last = t.frames[t.frames.len() - 1];
            let zf = out.zone_map.locate_zone((first.x, first.y)).unwrap();
            let zl = out.zone_map.locate_zone((last.x, last.y)).unwrap();
            assert_eq!(zf.kind, ZoneKind::Entry);
            assert_eq!(zl.kind, ZoneKind::Exit);
        }
    }

    fn labeler_vs_golden(out: &SynthOutput, dir: &Path) -> (usize, usize) {
        let files = write_outputs(out, dir).unwrap();
        let tracks = parse_recording(&files.tracks, &files.tracks_meta, &files.recording_meta, &ColumnMap::default()).unwrap();
        let map = crate::zones::load_zone_map(&files.zones).unwrap();
        let tracks = filter_tracks(&tracks, &map);
        let (samples, _) = make_samples(&tracks, &SampleConfig::default()).unwrap();
        let golden: BTreeMap<(i64, i64, i64), Option<ManeuverLabel>> = out.golden.iter().map(|g| ((g.recording_id, g.track_id, g.frame), g.label)).collect();
        assert_eq!(samples.len(), golden.len());
        let mut agree = 0;
        for s in &samples {
            let got = label_sample(s, &map, 0.5).ok();
            if got == golden[&s.key()] {
                agree += 1;
            }
        }
        (agree, samples.len())
    }

    #[test]
    fn noiseless_labels_match_exactly() {
        let out = generate(&small(20, 0.0)).unwrap();
        let d = tempfile::tempdir().unwrap();
        let (agree, n) = labeler_vs_golden(&out, d.path());
        assert!(n > 1000);
        assert_eq!(agree, n);
        let classes: std::collections::BTreeSet<_> = out.golden.iter().filter_map(|g| g.label).map(|l| l.acceleration).collect();
        assert_eq!(classes.len(), 3);
    }

    #[test]
    fn quarter_circulation_at_constant_speed() {
        let cfg = SynthConfig {
            vehicles: 1,
            speed_range: (8.0, 8.0),
            section_speeds: vec![8.0; NUM_SECTIONS],
            speed_jitter: 0.0,
            arm_speed_step: 0.0,
            exit_weights: vec![1.0, 0.0, 0.0],
            seed: 3,
            ..SynthConfig::default()
        };
        let out = generate(&cfg).unwrap();
        let p = &out.plans[0];
        assert_eq!(p.exit_arm, (p.entry_arm + 1) % 4);
        assert!(p.accel.iter().all(|&a| a == 0.0));
        let dt = 1.0 / 25.0;
        let v0 = p.distance[1] - p.distance[0];
        for w in p.distance.windows(2) {
            assert!(((w[1] - w[0]) - v0).abs() < 1e-9);
        }
        assert!((v0 / dt - 8.0).abs() < 1e-9);
        let allowed: Vec<usize> = (0..3).map(|k| (2 * p.entry_arm + k) % 8 + 1).collect();
        assert!(!out.golden.is_empty());
        let unresolved = out.golden.iter().filter(|g| g.label.is_none()).count();
        assert_eq!(unresolved, 0);
        for l in out.golden.iter().filter_map(|g| g.label) {
            assert_eq!(l.acceleration, AccelerationClass::Constant);
            assert!(allowed.contains(&l.location.get()), "section {}", l.location);
        }
    }

    #[test]
    fn ring_test_agrees_with_polygons() {
        let cfg = SynthConfig::default();
        let geo = Geometry::new(&cfg).unwrap();
        let map = geo.zone_map().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20_000 {
            let p = (rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0));
            let poly = map.circular_section_at(p).map(|c| c.get());
            assert_eq!(geo.ring_section(p), poly, "{p:?}");
        }
    }

    #[test]
    fn snapped_magnitudes_keep_means_off_threshold() {
        for k in 0..200 {
            let a = 0.8 + k as f64 * 0.006;
            let s = snap_magnitude(a, 0.5, 100);
            assert!((s - a).abs() / a < 0.02);
            for c2 in -200..=200 {
                let mean = s * c2 as f64 * 0.5 / 100.0;
                assert!((mean.abs() - 0.5).abs() >= s / 400.0 - 1e-12);
            }
        }
    }

    #[test]
    fn infeasible_geometry_is_rejected() {
        let crowded = SynthConfig {
            arms: 12,
            exit_weights: vec![1.0; 11],
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&crowded), Err(Error::Config(_))));
        let tiny = SynthConfig {
            ring_radius: 8.0,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&tiny), Err(Error::Config(_))));
        let bad = SynthConfig {
            exit_weights: vec![1.0],
            ..SynthConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
