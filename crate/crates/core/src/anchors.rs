//! Maneuver-specific anchor trajectories: one representative ego-frame
//! future per joint (location, acceleration) class.

use std::cmp::Ordering;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::SceneSample;
use crate::maneuvers::{ManeuverLabel, NUM_ACCEL_CLASSES};
use crate::par;
use crate::trajkit::{circular_mean, unwrap_angles, Pose, PoseSequence};

pub const DEFAULT_TRIM: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: Vec<PoseSequence>,
    member_counts: Vec<usize>,
    num_sections: usize,
    trim: f64,
}

impl AnchorSet {
    pub fn new(anchors: Vec<PoseSequence>, member_counts: Vec<usize>, num_sections: usize, trim: f64) -> Result<Self> {
        let k = num_sections * NUM_ACCEL_CLASSES;
        if anchors.len() != k || member_counts.len() != k {
            return Err(Error::invalid(format!(
                "anchor set needs {k} anchors, got {}",
                anchors.len()
            )));
        }
        let (len, dt) = (anchors[0].len(), anchors[0].dt());
        if anchors.iter().any(|a| a.len() != len || a.dt() != dt) {
            return Err(Error::invalid("anchors must share length and dt"));
        }
        Ok(AnchorSet {
            anchors,
            member_counts,
            num_sections,
            trim,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn num_sections(&self) -> usize {
        self.num_sections
    }

    pub fn future_steps(&self) -> usize {
        self.anchors[0].len()
    }

    pub fn dt(&self) -> f64 {
        self.anchors[0].dt()
    }

    pub fn trim(&self) -> f64 {
        self.trim
    }

    pub fn member_counts(&self) -> &[usize] {
        &self.member_counts
    }

    pub fn anchors(&self) -> &[PoseSequence] {
        &self.anchors
    }

    /// Anchor by 0-based joint index.
    pub fn get(&self, k: usize) -> &PoseSequence {
        &self.anchors[k]
    }

    pub fn lookup(&self, label: &ManeuverLabel) -> &PoseSequence {
        &self.anchors[label.k()]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.len() as u32).to_le_bytes());
        b.extend_from_slice(&(self.num_sections as u32).to_le_bytes());
        b.extend_from_slice(&(self.future_steps() as u32).to_le_bytes());
        b.extend_from_slice(&self.dt().to_le_bytes());
        b.extend_from_slice(&self.trim.to_le_bytes());
        for &c in &self.member_counts {
            b.extend_from_slice(&(c as u64).to_le_bytes());
        }
        for a in &self.anchors {
            for p in a.poses() {
                for v in p.as_array() {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::bytes::Reader::new(bytes, "anchor file");
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format("not an anchor file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!(
                "anchor file version {version}, expected {VERSION}"
            )));
        }
        let k = r.u32()? as usize;
        let p = r.u32()? as usize;
        let steps = r.u32()? as usize;
        if p == 0 || k != p * NUM_ACCEL_CLASSES {
            return Err(Error::format(format!(
                "header declares K = {k} anchors for P = {p} sections; expected K = {}",
                p * NUM_ACCEL_CLASSES
            )));
        }
        if steps == 0 {
            return Err(Error::format("anchor length is zero"));
        }
        let dt = r.f64()?;
        let trim = r.f64()?;
        let counts = (0..k).map(|_| r.u64().map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
        let mut anchors = Vec::with_capacity(k);
        for _ in 0..k {
            let poses = (0..steps)
                .map(|_| Ok(Pose::new(r.f64()?, r.f64()?, r.f64()?)))
                .collect::<Result<Vec<_>>>()?;
            anchors.push(PoseSequence::new(poses, dt).map_err(|e| Error::format(e.to_string()))?);
        }
        r.finish()?;
        AnchorSet::new(anchors, counts, p, trim)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        AnchorSet::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized set; checkpoints record it.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

const MAGIC: &[u8] = b"RPANCHOR";
const VERSION: u32 = 1;

/// Builds the K = P·Q anchors from labeled samples. For each class the
/// `trim` fraction of members whose endpoint lies farthest from the
/// component-wise median endpoint is discarded and the survivors are
/// averaged step by step (headings through their mean unit vector).
pub fn build_anchors(samples: &[SceneSample], num_sections: usize, trim: f64) -> Result<AnchorSet> {
    if !(0.0..1.0).contains(&trim) {
        return Err(Error::invalid(format!("trim fraction {trim} outside [0, 1)")));
    }
    let k_total = num_sections * NUM_ACCEL_CLASSES;
    let mut members: Vec<Vec<&PoseSequence>> = vec![Vec::new(); k_total];
    for s in samples {
        let l = s
            .label
            .ok_or_else(|| Error::invalid(format!("sample {:?} is unlabeled", s.key())))?;
        if l.location.get() > num_sections {
            return Err(Error::invalid(format!("label {l} outside {num_sections} sections")));
        }
        members[l.k()].push(&s.ego_future);
    }
    if let Some(k) = members.iter().position(|m| m.is_empty()) {
        return Err(Error::EmptyClass { k: k + 1 });
    }
    let steps = members[0][0].len();
    if members.iter().flatten().any(|f| f.len() != steps) {
        return Err(Error::invalid("futures of differing length"));
    }
    let built = par::map(&members, |m| trimmed_mean(m, trim));
    let mut anchors = Vec::with_capacity(k_total);
    let mut counts = Vec::with_capacity(k_total);
    for (seq, n) in built {
        anchors.push(seq);
        counts.push(n);
    }
    AnchorSet::new(anchors, counts, num_sections, trim)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn lexicographic(a: &PoseSequence, b: &PoseSequence) -> Ordering {
    a.poses()
        .iter()
        .zip(b.poses())
        .flat_map(|(p, q)| {
            [
                p.x.total_cmp(&q.x),
                p.y.total_cmp(&q.y),
                p.theta.total_cmp(&q.theta),
            ]
        })
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn trimmed_mean(members: &[&PoseSequence], trim: f64) -> (PoseSequence, usize) {
    let mx = median(members.iter().map(|m| m.last().x).collect());
    let my = median(members.iter().map(|m| m.last().y).collect());
    let mut ranked: Vec<(f64, &PoseSequence)> = members
        .iter()
        .map(|m| ((m.last().x - mx).hypot(m.last().y - my), *m))
        .collect();
    // canonical order so the result does not depend on input order
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| lexicographic(a.1, b.1)));
    let n = ranked.len();
    let drop = ((trim * n as f64).floor() as usize).min(n - 1);
    let kept = &ranked[..n - drop];
    let steps = kept[0].1.len();
    let inv = 1.0 / kept.len() as f64;
    let mut poses = Vec::with_capacity(steps);
    for t in 0..steps {
        let (sx, sy) = kept
            .iter()
            .fold((0.0, 0.0), |(sx, sy), (_, m)| (sx + m.poses()[t].x, sy + m.poses()[t].y));
        let theta = circular_mean(kept.iter().map(|(_, m)| m.poses()[t].theta));
        poses.push(Pose::new(sx * inv, sy * inv, theta));
    }
    let mut headings: Vec<f64> = std::iter::once(0.0).chain(poses.iter().map(|p| p.theta)).collect();
    unwrap_angles(&mut headings);
    for (p, h) in poses.iter_mut().zip(&headings[1..]) {
        p.theta = *h;
    }
    (
        PoseSequence::new(poses, kept[0].1.dt()).expect("mean of valid sequences"),
        kept.len(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maneuvers::AccelerationClass;
    use crate::zones::LocationClass;

    fn labeled(k: usize, future: Vec<Pose>) -> SceneSample {
        labeled_in(k, future, 1)
    }

    fn labeled_in(k: usize, future: Vec<Pose>, num_sections: usize) -> SceneSample {
        let mut s = SceneSample::new(
            0,
            k as i64,
            0,
            Pose::ZERO,
            PoseSequence::new(vec![Pose::ZERO], 0.16).unwrap(),
            PoseSequence::new(future, 0.16).unwrap(),
            vec![],
            0.0,
        )
        .unwrap();
        s.label = Some(ManeuverLabel::from_joint_index(k, num_sections).unwrap());
        s
    }

    fn line(end: (f64, f64), steps: usize) -> Vec<Pose> {
        (1..=steps)
            .map(|i| {
                let f = i as f64 / steps as f64;
                Pose::new(end.0 * f, end.1 * f, end.1.atan2(end.0))
            })
            .collect()
    }

    /// One sample for each of the three classes of a one-section map.
    fn base() -> Vec<SceneSample> {
        (1..=3).map(|k| labeled(k, line((k as f64, 0.0), 4))).collect()
    }

    #[test]
    fn identical_members_give_that_member() {
        let mut s = base();
        for _ in 0..3 {
            s.push(labeled(2, line((5.0, 1.0), 4)));
        }
        s.retain(|x| !(x.label.unwrap().joint_index() == 2 && x.ego_future.last().x == 2.0));
        let a = build_anchors(&s, 1, 0.2).unwrap();
        let want = PoseSequence::new(line((5.0, 1.0), 4), 0.16).unwrap();
        for (p, q) in a.get(1).poses().iter().zip(want.poses()) {
            assert!(p.distance(q) < 1e-12 && (p.theta - q.theta).abs() < 1e-12);
        }
        assert!(a.get(1).first().distance(&Pose::ZERO) < 2.0);
    }

    #[test]
    fn mirrored_members_average_onto_axis() {
        let mut s = base();
        s.push(labeled(1, line((4.0, 3.0), 4)));
        s.push(labeled(1, line((4.0, -3.0), 4)));
        s.retain(|x| !(x.label.unwrap().joint_index() == 1 && x.ego_future.last().x == 1.0));
        let a = build_anchors(&s, 1, 0.0).unwrap();
        for p in a.get(0).poses() {
            assert!(p.y.abs() < 1e-12 && p.theta.abs() < 1e-12);
        }
    }

    #[test]
    fn outlier_is_trimmed() {
        let mut s = base();
        s.retain(|x| x.label.unwrap().joint_index() != 3);
        let ends: Vec<(f64, f64)> = (0..9).map(|i| (10.0 + 0.1 * i as f64, 0.05 * i as f64)).collect();
        for &e in &ends {
            s.push(labeled(3, line(e, 4)));
        }
        s.push(labeled(3, line((80.0, 40.0), 4)));
        let a = build_anchors(&s, 1, 0.2).unwrap();
        // brute force: drop the 2 endpoints farthest from the median, average the rest
        let mut all = ends.clone();
        all.push((80.0, 40.0));
        let mut xs: Vec<f64> = all.iter().map(|e| e.0).collect();
        let mut ys: Vec<f64> = all.iter().map(|e| e.1).collect();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let (mx, my) = ((xs[4] + xs[5]) / 2.0, (ys[4] + ys[5]) / 2.0);
        all.sort_by(|a, b| (a.0 - mx).hypot(a.1 - my).total_cmp(&(b.0 - mx).hypot(b.1 - my)));
        let kept = &all[..8];
        let want_x = kept.iter().map(|e| e.0).sum::<f64>() / 8.0;
        let with_outlier_x = (ends.iter().map(|e| e.0).sum::<f64>() + 80.0) / 10.0;
        let got = a.get(2).last();
        assert!((got.x - want_x).abs() < 1e-9);
        assert!((got.x - with_outlier_x).abs() > 1.0);
        assert_eq!(a.member_counts()[2], 8);
    }

    #[test]
    fn empty_class_names_k() {
        let mut s = base();
        s.remove(1);
        assert!(matches!(build_anchors(&s, 1, 0.2), Err(Error::EmptyClass { k: 2 })));
    }

    #[test]
    fn lookup_indices() {
        let s: Vec<SceneSample> = (1..=24).map(|k| labeled_in(k, line((k as f64, 0.0), 3), 8)).collect();
        let a = build_anchors(&s, 8, 0.2).unwrap();
        let l1 = ManeuverLabel::new(LocationClass::new(1, 8).unwrap(), AccelerationClass::Slowing);
        let l24 = ManeuverLabel::new(LocationClass::new(8, 8).unwrap(), AccelerationClass::Speeding);
        assert_eq!(a.lookup(&l1).last().x, 1.0);
        assert_eq!(a.lookup(&l24).last().x, 24.0);
        let distinct: std::collections::BTreeSet<u64> =
            a.anchors().iter().map(|x| x.last().x.to_bits()).collect();
        assert_eq!(distinct.len(), 24);
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let a = build_anchors(&base(), 1, 0.2).unwrap();
        let bytes = a.to_bytes();
        assert_eq!(AnchorSet::from_bytes(&bytes).unwrap(), a);
        assert!(matches!(
            AnchorSet::from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::Format(_))
        ));
        let mut bad_k = bytes.clone();
        bad_k[12..16].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(AnchorSet::from_bytes(&bad_k), Err(Error::Format(_))));
        let mut bad_v = bytes;
        bad_v[8..12].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(AnchorSet::from_bytes(&bad_v), Err(Error::Format(_))));
    }
}
