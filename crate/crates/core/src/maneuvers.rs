//! Ground-truth maneuver labels: where the ego vehicle will be (location
//! section) and how it changes speed (acceleration class).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SceneSample;
use crate::zones::{LocationClass, ZoneKind, ZoneMap};

/// Number of acceleration classes Q.
pub const NUM_ACCEL_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AccelerationClass {
    Slowing = 1,
    Constant = 2,
    Speeding = 3,
}

impl AccelerationClass {
    pub const ALL: [AccelerationClass; 3] = [
        AccelerationClass::Slowing,
        AccelerationClass::Constant,
        AccelerationClass::Speeding,
    ];

    pub fn q(self) -> usize {
        self as usize
    }

    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_q(q: usize) -> Result<Self> {
        match q {
            1 => Ok(AccelerationClass::Slowing),
            2 => Ok(AccelerationClass::Constant),
            3 => Ok(AccelerationClass::Speeding),
            _ => Err(Error::invalid(format!("acceleration class {q} outside 1..=3"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AccelerationClass::Slowing => "slowing",
            AccelerationClass::Constant => "constant",
            AccelerationClass::Speeding => "speeding",
        }
    }
}

/// Joint (location, acceleration) maneuver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManeuverLabel {
    pub location: LocationClass,
    pub acceleration: AccelerationClass,
}

impl ManeuverLabel {
    pub fn new(location: LocationClass, acceleration: AccelerationClass) -> Self {
        ManeuverLabel {
            location,
            acceleration,
        }
    }

    /// 1-based joint index `k = (p - 1) * Q + q`.
    pub fn joint_index(&self) -> usize {
        (self.location.get() - 1) * NUM_ACCEL_CLASSES + self.acceleration.q()
    }

    /// 0-based joint index.
    pub fn k(&self) -> usize {
        self.joint_index() - 1
    }

    pub fn from_joint_index(k: usize, num_sections: usize) -> Result<Self> {
        if k == 0 || k > num_sections * NUM_ACCEL_CLASSES {
            return Err(Error::invalid(format!(
                "joint index {k} outside 1..={}",
                num_sections * NUM_ACCEL_CLASSES
            )));
        }
        let p = (k - 1) / NUM_ACCEL_CLASSES + 1;
        let q = (k - 1) % NUM_ACCEL_CLASSES + 1;
        Ok(ManeuverLabel {
            location: LocationClass::new(p, num_sections)?,
            acceleration: AccelerationClass::from_q(q)?,
        })
    }
}

impl fmt::Display for ManeuverLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.location, self.acceleration.name())
    }
}

pub const DEFAULT_A_THRESHOLD: f64 = 0.5;

/// Classifies a mean longitudinal acceleration; values exactly at `±a`
/// count as constant speed.
pub fn label_acceleration(mean_lon_accel: f64, a_threshold: f64) -> AccelerationClass {
    debug_assert!(a_threshold > 0.0);
    if mean_lon_accel < -a_threshold {
        AccelerationClass::Slowing
    } else if mean_lon_accel > a_threshold {
        AccelerationClass::Speeding
    } else {
        AccelerationClass::Constant
    }
}

/// Section occupied at the end of the horizon. If the vehicle has left the
/// circle by then, the last section it occupied within the horizon; if the
/// future never reaches the circle, the section fed by the entry/exit zone
/// it ends in.
pub fn label_location(sample: &SceneSample, map: &ZoneMap) -> Result<LocationClass> {
    let future = sample.world_future();
    let poses = future.poses();
    for p in poses.iter().rev() {
        if let Some(s) = map.circular_section_at((p.x, p.y)) {
            return Ok(s);
        }
    }
    let end = future.last();
    if let Some(z) = map.locate_zone((end.x, end.y)) {
        if matches!(z.kind, ZoneKind::Entry | ZoneKind::Exit | ZoneKind::Conflict) {
            if let Some(s) = map.section_of(z.id)? {
                return Ok(s);
            }
        }
    }
    Err(Error::Labeling(format!(
        "sample {:?}: no section resolvable for the future ending at ({:.2}, {:.2})",
        sample.key(),
        end.x,
        end.y
    )))
}

pub fn label_sample(sample: &SceneSample, map: &ZoneMap, a_threshold: f64) -> Result<ManeuverLabel> {
    Ok(ManeuverLabel {
        location: label_location(sample, map)?,
        acceleration: label_acceleration(sample.future_lon_accel, a_threshold),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub labeled: usize,
    pub dropped: usize,
}

/// Labels every sample in place, dropping the ones without a resolvable
/// section.
pub fn label_all(samples: Vec<SceneSample>, map: &ZoneMap, a_threshold: f64) -> (Vec<SceneSample>, LabelSummary) {
    let labels = crate::par::map(&samples, |s| label_sample(s, map, a_threshold).ok());
    let mut summary = LabelSummary::default();
    let mut out = Vec::with_capacity(samples.len());
    for (mut s, l) in samples.into_iter().zip(labels) {
        match l {
            Some(l) => {
                s.label = Some(l);
                summary.labeled += 1;
                out.push(s);
            }
            None => summary.dropped += 1,
        }
    }
    (out, summary)
}
