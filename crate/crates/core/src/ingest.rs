//! Drone-trajectory recordings: parsing, filtering and windowing into scene
//! samples.
//!
//! The CSV layout follows the RounD family (`tracks`, `tracksMeta` and
//! `recordingMeta` files). Column names are looked up through a
//! [`ColumnMap`], so highD/inD-style files can be read by overriding names.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maneuvers::ManeuverLabel;
use crate::par;
use crate::trajkit::{self, unwrap_angles, Pose, PoseSequence};
use crate::zones::ZoneMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentClass {
    Car,
    Truck,
    Van,
    Trailer,
    Bus,
    Pedestrian,
    Bicycle,
    Motorcycle,
}

impl AgentClass {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "car" => AgentClass::Car,
            "truck" => AgentClass::Truck,
            "van" => AgentClass::Van,
            "trailer" => AgentClass::Trailer,
            "bus" => AgentClass::Bus,
            "pedestrian" => AgentClass::Pedestrian,
            "bicycle" => AgentClass::Bicycle,
            "motorcycle" => AgentClass::Motorcycle,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgentClass::Car => "car",
            AgentClass::Truck => "truck",
            AgentClass::Van => "van",
            AgentClass::Trailer => "trailer",
            AgentClass::Bus => "bus",
            AgentClass::Pedestrian => "pedestrian",
            AgentClass::Bicycle => "bicycle",
            AgentClass::Motorcycle => "motorcycle",
        }
    }

    /// Vulnerable road users are not predicted.
    pub fn is_vehicle(self) -> bool {
        !matches!(
            self,
            AgentClass::Pedestrian | AgentClass::Bicycle | AgentClass::Motorcycle
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameRecord {
    pub frame: i64,
    pub x: f64,
    pub y: f64,
    /// Radians, unwrapped along the track.
    pub theta: f64,
    pub lon_acceleration: f64,
}

impl FrameRecord {
    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.theta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTrack {
    pub recording_id: i64,
    pub track_id: i64,
    pub class: AgentClass,
    pub frames: Vec<FrameRecord>,
    pub length: f64,
    pub width: f64,
    pub frame_rate: f64,
}

impl RawTrack {
    pub fn first_frame(&self) -> i64 {
        self.frames[0].frame
    }

    pub fn last_frame(&self) -> i64 {
        self.frames[self.frames.len() - 1].frame
    }

    pub fn covers(&self, from: i64, to: i64) -> bool {
        !self.frames.is_empty() && self.first_frame() <= from && self.last_frame() >= to
    }

    /// Record at absolute frame index, assuming contiguous frames.
    pub fn at(&self, frame: i64) -> Option<&FrameRecord> {
        let off = frame - self.first_frame();
        if off < 0 {
            return None;
        }
        self.frames.get(off as usize)
    }

    fn check_contiguous(&self) -> Result<()> {
        if !(self.frame_rate > 0.0) {
            return Err(Error::Integrity(format!(
                "recording {} has non-positive frame rate",
                self.recording_id
            )));
        }
        for w in self.frames.windows(2) {
            if w[1].frame != w[0].frame + 1 {
                return Err(Error::Integrity(format!(
                    "track {} frames {} -> {} are not contiguous",
                    self.track_id, w[0].frame, w[1].frame
                )));
            }
        }
        Ok(())
    }
}

/// CSV column names. Defaults follow the published RounD schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub recording_id: String,
    pub track_id: String,
    pub frame: String,
    pub x: String,
    pub y: String,
    pub heading: String,
    pub lon_acceleration: String,
    pub class: String,
    pub length: String,
    pub width: String,
    pub frame_rate: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            recording_id: "recordingId".into(),
            track_id: "trackId".into(),
            frame: "frame".into(),
            x: "xCenter".into(),
            y: "yCenter".into(),
            heading: "heading".into(),
            lon_acceleration: "lonAcceleration".into(),
            class: "class".into(),
            length: "length".into(),
            width: "width".into(),
            frame_rate: "frameRate".into(),
        }
    }
}

struct Table {
    file: String,
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Table> {
        let file = path.display().to_string();
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Parse {
                file: file.clone(),
                row: 0,
                message: e.to_string(),
            })?;
        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse {
                file: file.clone(),
                row: 1,
                message: e.to_string(),
            })?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            rows.push(rec.map_err(|e| Error::Parse {
                file: file.clone(),
                row: i + 2,
                message: e.to_string(),
            })?);
        }
        Ok(Table {
            file,
            headers,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
                file: self.file.clone(),
            })
    }

    /// `row` is the 0-based data row; error messages use 1-based file lines.
    fn number(&self, row: usize, col: usize) -> Result<f64> {
        let cell = self.rows[row].get(col).unwrap_or("");
        cell.parse::<f64>().map_err(|_| Error::Parse {
            file: self.file.clone(),
            row: row + 2,
            message: format!("column `{}`: `{cell}` is not numeric", self.headers[col]),
        })
    }

    fn integer(&self, row: usize, col: usize) -> Result<i64> {
        let v = self.number(row, col)?;
        if v.fract() != 0.0 {
            return Err(Error::Parse {
                file: self.file.clone(),
                row: row + 2,
                message: format!("column `{}`: `{v}` is not an integer", self.headers[col]),
            });
        }
        Ok(v as i64)
    }
}

/// Reads one recording. Headings are converted from degrees to radians and
/// unwrapped along each track.
pub fn parse_recording(
    tracks_file: impl AsRef<Path>,
    meta_file: impl AsRef<Path>,
    recording_meta_file: impl AsRef<Path>,
    columns: &ColumnMap,
) -> Result<Vec<RawTrack>> {
    let rec = Table::read(recording_meta_file.as_ref())?;
    let rate_col = rec.column(&columns.frame_rate)?;
    let rec_id_col = rec.column(&columns.recording_id)?;
    if rec.rows.is_empty() {
        return Err(Error::Integrity(format!("{} has no data rows", rec.file)));
    }
    let frame_rate = rec.number(0, rate_col)?;
    let recording_id = rec.integer(0, rec_id_col)?;

    let meta = Table::read(meta_file.as_ref())?;
    let m_track = meta.column(&columns.track_id)?;
    let m_class = meta.column(&columns.class)?;
    let m_len = meta.column(&columns.length)?;
    let m_width = meta.column(&columns.width)?;
    let mut info: BTreeMap<i64, (AgentClass, f64, f64)> = BTreeMap::new();
    for r in 0..meta.rows.len() {
        let id = meta.integer(r, m_track)?;
        let cls_cell = meta.rows[r].get(m_class).unwrap_or("");
        let cls = AgentClass::parse(cls_cell).ok_or_else(|| Error::Parse {
            file: meta.file.clone(),
            row: r + 2,
            message: format!("unknown agent class `{cls_cell}`"),
        })?;
        info.insert(id, (cls, meta.number(r, m_len)?, meta.number(r, m_width)?));
    }

    let tr = Table::read(tracks_file.as_ref())?;
    let c_track = tr.column(&columns.track_id)?;
    let c_frame = tr.column(&columns.frame)?;
    let c_x = tr.column(&columns.x)?;
    let c_y = tr.column(&columns.y)?;
    let c_h = tr.column(&columns.heading)?;
    let c_a = tr.column(&columns.lon_acceleration)?;
    let mut frames: BTreeMap<i64, Vec<FrameRecord>> = BTreeMap::new();
    for r in 0..tr.rows.len() {
        let id = tr.integer(r, c_track)?;
        frames.entry(id).or_default().push(FrameRecord {
            frame: tr.integer(r, c_frame)?,
            x: tr.number(r, c_x)?,
            y: tr.number(r, c_y)?,
            theta: tr.number(r, c_h)?.to_radians(),
            lon_acceleration: tr.number(r, c_a)?,
        });
    }

    let frame_ids: BTreeSet<i64> = frames.keys().copied().collect();
    let meta_ids: BTreeSet<i64> = info.keys().copied().collect();
    if let Some(id) = frame_ids.difference(&meta_ids).next() {
        return Err(Error::Integrity(format!(
            "track {id} appears in {} but not in {}",
            tr.file, meta.file
        )));
    }
    if let Some(id) = meta_ids.difference(&frame_ids).next() {
        return Err(Error::Integrity(format!(
            "track {id} appears in {} but has no frames in {}",
            meta.file, tr.file
        )));
    }

    let mut out = Vec::with_capacity(frames.len());
    for (id, mut fr) in frames {
        fr.sort_by_key(|f| f.frame);
        let mut headings: Vec<f64> = fr.iter().map(|f| f.theta).collect();
        unwrap_angles(&mut headings);
        for (f, h) in fr.iter_mut().zip(headings) {
            f.theta = h;
        }
        let (class, length, width) = info[&id];
        let t = RawTrack {
            recording_id,
            track_id: id,
            class,
            frames: fr,
            length,
            width,
            frame_rate,
        };
        t.check_contiguous()?;
        out.push(t);
    }
    Ok(out)
}

/// Paths of one recording's three files using the RounD naming scheme
/// (`NN_tracks.csv`, `NN_tracksMeta.csv`, `NN_recordingMeta.csv`).
pub fn recording_files(dir: &Path, prefix: &str) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("{prefix}_tracks.csv")),
        dir.join(format!("{prefix}_tracksMeta.csv")),
        dir.join(format!("{prefix}_recordingMeta.csv")),
    )
}

/// Recording prefixes present in `dir`, sorted.
pub fn discover_recordings(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(prefix) = name.strip_suffix("_tracks.csv") {
            out.push(prefix.to_string());
        }
    }
    out.sort();
    Ok(out)
}

/// Removes vulnerable road users, frames inside excluded zones, and the
/// leading/trailing frames farther from the roundabout than the vehicle
/// length (measured from the vehicle center). Tracks split by excluded-zone
/// gaps are kept as separate contiguous pieces; emptied tracks are dropped.
pub fn filter_tracks(tracks: &[RawTrack], zone_map: &ZoneMap) -> Vec<RawTrack> {
    let pieces = par::map(tracks, |t| filter_one(t, zone_map));
    pieces.into_iter().flatten().collect()
}

fn filter_one(track: &RawTrack, zone_map: &ZoneMap) -> Vec<RawTrack> {
    if !track.class.is_vehicle() {
        return Vec::new();
    }
    let mut runs: Vec<Vec<FrameRecord>> = Vec::new();
    let mut current = Vec::new();
    for f in &track.frames {
        if zone_map.in_excluded_zone((f.x, f.y)) {
            if !current.is_empty() {
                runs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(*f);
        }
    }
    if !current.is_empty() {
        runs.push(current);
    }
    runs.into_iter()
        .filter_map(|run| {
            let near = |f: &FrameRecord| zone_map.distance_to_roundabout((f.x, f.y)) <= track.length;
            let first = run.iter().position(near)?;
            let last = run.iter().rposition(near)?;
            Some(RawTrack {
                frames: run[first..=last].to_vec(),
                ..track.clone()
            })
        })
        .collect()
}

/// One training/evaluation example. All sequences are in the ego frame at
/// the current time `t_frame`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub recording_id: i64,
    pub track_id: i64,
    pub t_frame: i64,
    /// Ego pose at `t_frame`, world frame.
    pub origin: Pose,
    pub ego_history: PoseSequence,
    pub ego_future: PoseSequence,
    pub neighbor_histories: Vec<PoseSequence>,
    /// Mean longitudinal acceleration over the raw future frames.
    pub future_lon_accel: f64,
    pub label: Option<ManeuverLabel>,
}

impl SceneSample {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        recording_id: i64,
        track_id: i64,
        t_frame: i64,
        origin: Pose,
        ego_history: PoseSequence,
        ego_future: PoseSequence,
        neighbor_histories: Vec<PoseSequence>,
        future_lon_accel: f64,
    ) -> Result<Self> {
        let dt = ego_history.dt();
        let same_dt = |s: &PoseSequence| (s.dt() - dt).abs() <= 1e-12 * dt.max(1.0);
        if !same_dt(&ego_future) || !neighbor_histories.iter().all(same_dt) {
            return Err(Error::invalid("all sample sequences must share dt"));
        }
        let last = ego_history.last();
        if last.x.abs() > 1e-9 || last.y.abs() > 1e-9 || last.theta.abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "ego history must end at the zero pose, ends at {last:?}"
            )));
        }
        if let Some(n) = neighbor_histories
            .iter()
            .find(|n| n.len() != ego_history.len())
        {
            return Err(Error::invalid(format!(
                "neighbor history has {} steps, expected {}",
                n.len(),
                ego_history.len()
            )));
        }
        if !future_lon_accel.is_finite() || !origin.is_finite() {
            return Err(Error::invalid("non-finite sample field"));
        }
        Ok(SceneSample {
            recording_id,
            track_id,
            t_frame,
            origin,
            ego_history,
            ego_future,
            neighbor_histories,
            future_lon_accel,
            label: None,
        })
    }

    pub fn key(&self) -> (i64, i64, i64) {
        (self.recording_id, self.track_id, self.t_frame)
    }

    /// Ego future in world coordinates.
    pub fn world_future(&self) -> PoseSequence {
        trajkit::from_ego_frame(&self.ego_future, &self.origin)
    }

    /// Current neighbor poses relative to the ego pose.
    pub fn neighbor_current_poses(&self) -> Vec<Pose> {
        self.neighbor_histories.iter().map(|n| *n.last()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub history_s: f64,
    pub future_s: f64,
    pub downsample: usize,
    /// Raw frames between consecutive windows of one track.
    pub stride: usize,
    /// Neighbors farther than this at the current time are ignored.
    pub neighbor_radius: Option<f64>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            history_s: 2.0,
            future_s: 4.0,
            downsample: 4,
            stride: 1,
            neighbor_radius: None,
        }
    }
}

impl SampleConfig {
    pub fn history_frames(&self, rate: f64) -> Result<usize> {
        frames_for(self.history_s, rate)
    }

    pub fn future_frames(&self, rate: f64) -> Result<usize> {
        frames_for(self.future_s, rate)
    }

    /// Steps after downsampling.
    pub fn history_steps(&self, rate: f64) -> Result<usize> {
        Ok(self.history_frames(rate)?.div_ceil(self.downsample))
    }

    pub fn future_steps(&self, rate: f64) -> Result<usize> {
        Ok(self.future_frames(rate)?.div_ceil(self.downsample))
    }
}

fn frames_for(seconds: f64, rate: f64) -> Result<usize> {
    let f = seconds * rate;
    if !(f >= 1.0) || (f - f.round()).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "{seconds} s at {rate} Hz is not a positive whole number of frames"
        )));
    }
    Ok(f.round() as usize)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub emitted: usize,
    /// Frames of tracks that lacked a full history or future window.
    pub skipped_frames: usize,
}

/// Windows every track into scene samples. Neighbors are all other vehicles
/// of the same recording with a full history at the current frame.
pub fn make_samples(tracks: &[RawTrack], cfg: &SampleConfig) -> Result<(Vec<SceneSample>, SampleSummary)> {
    if cfg.downsample == 0 || cfg.stride == 0 {
        return Err(Error::invalid("downsample and stride must be at least 1"));
    }
    for t in tracks {
        cfg.history_frames(t.frame_rate)?;
        cfg.future_frames(t.frame_rate)?;
    }
    let mut by_recording: BTreeMap<i64, Vec<&RawTrack>> = BTreeMap::new();
    for t in tracks {
        by_recording.entry(t.recording_id).or_default().push(t);
    }
    let jobs: Vec<(&RawTrack, &Vec<&RawTrack>)> = tracks
        .iter()
        .map(|t| (t, &by_recording[&t.recording_id]))
        .collect();
    let per_track = par::map(&jobs, |(t, peers)| windows_for_track(t, peers, cfg));
    let mut samples = Vec::new();
    let mut summary = SampleSummary::default();
    for r in per_track {
        let (s, skipped) = r?;
        summary.skipped_frames += skipped;
        samples.extend(s);
    }
    samples.sort_by_key(|s| s.key());
    summary.emitted = samples.len();
    Ok((samples, summary))
}

fn windows_for_track(
    track: &RawTrack,
    peers: &[&RawTrack],
    cfg: &SampleConfig,
) -> Result<(Vec<SceneSample>, usize)> {
    let rate = track.frame_rate;
    let hist = cfg.history_frames(rate)?;
    let fut = cfg.future_frames(rate)?;
    let dt = 1.0 / rate;
    let n = track.frames.len();
    if n < hist + fut {
        return Ok((Vec::new(), n));
    }
    let mut out = Vec::new();
    let mut i = hist - 1;
    while i + fut < n {
        let now = &track.frames[i];
        let origin = now.pose();
        let raw_hist = PoseSequence::new(
            track.frames[i + 1 - hist..=i].iter().map(FrameRecord::pose).collect(),
            dt,
        )?;
        let raw_fut = PoseSequence::new(
            track.frames[i + 1..=i + fut].iter().map(FrameRecord::pose).collect(),
            dt,
        )?;
        let accel = track.frames[i + 1..=i + fut]
            .iter()
            .map(|f| f.lon_acceleration)
            .sum::<f64>()
            / fut as f64;
        let ego_history = trajkit::resample(&trajkit::to_ego_frame(&raw_hist, &origin), cfg.downsample)?;
        let ego_future = trajkit::resample(&trajkit::to_ego_frame(&raw_fut, &origin), cfg.downsample)?;

        let t = now.frame;
        let from = t + 1 - hist as i64;
        let mut neighbors = Vec::new();
        for p in peers {
            if p.track_id == track.track_id || !p.covers(from, t) {
                continue;
            }
            let pn = p.at(t).expect("covered frame");
            if let Some(r) = cfg.neighbor_radius {
                if pn.pose().distance(&origin) > r {
                    continue;
                }
            }
            let start = (from - p.first_frame()) as usize;
            let seq = PoseSequence::new(
                p.frames[start..start + hist].iter().map(FrameRecord::pose).collect(),
                dt,
            )?;
            let ego = trajkit::resample(&trajkit::to_ego_frame(&seq, &origin), cfg.downsample)?;
            neighbors.push(ego.rewound());
        }
        out.push(SceneSample::new(
            track.recording_id,
            track.track_id,
            t,
            origin,
            ego_history,
            ego_future,
            neighbors,
            accel,
        )?);
        i += cfg.stride;
    }
    let usable = n - hist - fut + 1;
    Ok((out, n - usable))
}
