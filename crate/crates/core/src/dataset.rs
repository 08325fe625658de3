//! Binary dataset files of scene samples.
//!
//! Layout (little-endian):
//!
//! ```text
//! header:  magic "RPDATA01" | version u32 | count u64 | history_steps u32
//!          | future_steps u32 | dt f64 | num_sections u32
//! sample:  recording_id i64 | track_id i64 | t_frame i64 | origin 3×f64
//!          | future_lon_accel f64 | location u8 | acceleration u8
//!          | num_neighbors u32 | history steps×3 f64 | future steps×3 f64
//!          | neighbors num_neighbors×steps×3 f64
//! ```
//!
//! Poses are `(x, y, theta)` triples. A zero location/acceleration byte
//! means the sample is unlabeled.

use std::path::Path;

use crate::bytes::{Reader, Writer};
use crate::error::{Error, Result};
use crate::ingest::SceneSample;
use crate::maneuvers::{AccelerationClass, ManeuverLabel};
use crate::trajkit::{Pose, PoseSequence};
use crate::zones::LocationClass;

const MAGIC: &[u8] = b"RPDATA01";
const VERSION: u32 = 1;

fn write_seq(w: &mut Writer, s: &PoseSequence) {
    for p in s.poses() {
        w.f64(p.x);
        w.f64(p.y);
        w.f64(p.theta);
    }
}

fn read_seq(r: &mut Reader, n: usize, dt: f64) -> Result<PoseSequence> {
    let poses = (0..n)
        .map(|_| Ok(Pose::new(r.f64()?, r.f64()?, r.f64()?)))
        .collect::<Result<Vec<_>>>()?;
    PoseSequence::new(poses, dt).map_err(|e| Error::format(e.to_string()))
}

/// Serializes samples; `num_sections` is recorded so labels can be checked
/// on load (use 0 for unlabeled data).
pub fn to_bytes(samples: &[SceneSample], num_sections: usize) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(samples.len() as u64);
    let (h, f, dt) = match samples.first() {
        Some(s) => (s.ego_history.len(), s.ego_future.len(), s.ego_history.dt()),
        None => (0, 0, 0.0),
    };
    w.u32(h as u32);
    w.u32(f as u32);
    w.f64(dt);
    w.u32(num_sections as u32);
    for s in samples {
        if s.ego_history.len() != h || s.ego_future.len() != f || s.ego_history.dt() != dt {
            return Err(Error::invalid("all samples in a dataset must share their shape"));
        }
        w.i64(s.recording_id);
        w.i64(s.track_id);
        w.i64(s.t_frame);
        w.f64(s.origin.x);
        w.f64(s.origin.y);
        w.f64(s.origin.theta);
        w.f64(s.future_lon_accel);
        match s.label {
            Some(l) => {
                if l.location.get() > num_sections {
                    return Err(Error::invalid(format!("label {l} exceeds {num_sections} sections")));
                }
                w.u8(l.location.get() as u8);
                w.u8(l.acceleration.q() as u8);
            }
            None => {
                w.u8(0);
                w.u8(0);
            }
        }
        w.u32(s.neighbor_histories.len() as u32);
        write_seq(&mut w, &s.ego_history);
        write_seq(&mut w, &s.ego_future);
        for n in &s.neighbor_histories {
            write_seq(&mut w, n);
        }
    }
    Ok(w.buf)
}

/// Returns the samples and the recorded section count.
pub fn from_bytes(bytes: &[u8]) -> Result<(Vec<SceneSample>, usize)> {
    let mut r = Reader::new(bytes, "dataset file");
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::format("not a dataset file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("dataset version {version}, expected {VERSION}")));
    }
    let count = r.u64()? as usize;
    let h = r.u32()? as usize;
    let f = r.u32()? as usize;
    let dt = r.f64()?;
    let num_sections = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let recording_id = r.i64()?;
        let track_id = r.i64()?;
        let t_frame = r.i64()?;
        let origin = Pose::new(r.f64()?, r.f64()?, r.f64()?);
        let accel = r.f64()?;
        let (p, q) = (r.u8()? as usize, r.u8()? as usize);
        let label = match (p, q) {
            (0, 0) => None,
            _ => Some(ManeuverLabel::new(
                LocationClass::new(p, num_sections).map_err(|e| Error::format(e.to_string()))?,
                AccelerationClass::from_q(q).map_err(|e| Error::format(e.to_string()))?,
            )),
        };
        let n = r.u32()? as usize;
        let hist = read_seq(&mut r, h, dt)?;
        let fut = read_seq(&mut r, f, dt)?;
        let neighbors = (0..n).map(|_| read_seq(&mut r, h, dt)).collect::<Result<Vec<_>>>()?;
        let mut s = SceneSample::new(recording_id, track_id, t_frame, origin, hist, fut, neighbors, accel)
            .map_err(|e| Error::format(e.to_string()))?;
        s.label = label;
        out.push(s);
    }
    r.finish()?;
    Ok((out, num_sections))
}

pub fn save(path: impl AsRef<Path>, samples: &[SceneSample], num_sections: usize) -> Result<()> {
    std::fs::write(path, to_bytes(samples, num_sections)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Vec<SceneSample>, usize)> {
    from_bytes(&std::fs::read(path)?)
}
