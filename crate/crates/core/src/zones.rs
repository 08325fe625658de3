//! Roundabout zone geometry and the grouping of circulating zones into
//! location sections.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ZoneId = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZoneKind {
    Entry,
    Exit,
    Circular,
    Conflict,
    Excluded,
}

impl ZoneKind {
    /// Zones that count as part of the roundabout when trimming approaches.
    pub fn is_relevant(self) -> bool {
        !matches!(self, ZoneKind::Excluded)
    }
}

/// Location maneuver class `p`, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LocationClass(u8);

impl LocationClass {
    pub fn new(p: usize, num_sections: usize) -> Result<Self> {
        if p == 0 || p > num_sections {
            return Err(Error::invalid(format!(
                "location class {p} outside 1..={num_sections}"
            )));
        }
        Ok(LocationClass(p as u8))
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }

    /// Zero-based index, for one-hot vectors.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Display for LocationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<(f64, f64)>,
    bbox: (f64, f64, f64, f64),
}

impl Polygon {
    /// Builds a simple polygon. A trailing vertex equal to the first is
    /// dropped; the ring is closed implicitly.
    pub fn new(mut vertices: Vec<(f64, f64)>) -> Result<Self> {
        if vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(Error::Geometry(format!(
                "polygon needs at least 3 distinct vertices, got {}",
                vertices.len()
            )));
        }
        if vertices.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Geometry("non-finite polygon vertex".into()));
        }
        let poly = Polygon {
            bbox: bounding_box(&vertices),
            vertices,
        };
        if let Some((i, j)) = poly.first_self_intersection() {
            return Err(Error::Geometry(format!(
                "polygon edges {i} and {j} intersect"
            )));
        }
        Ok(poly)
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }

    fn edges(&self) -> impl Iterator<Item = ((f64, f64), (f64, f64))> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    fn first_self_intersection(&self) -> Option<(usize, usize)> {
        let n = self.vertices.len();
        let e: Vec<_> = self.edges().collect();
        for i in 0..n {
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    // adjacent edges may only share their common vertex
                    let (a0, a1) = e[i];
                    let (b0, b1) = e[j];
                    let (p, q, r) = if j == i + 1 { (a0, a1, b1) } else { (b0, b1, a1) };
                    if orient(p, q, r) == 0.0 && dot_sub(p, q, r) > 0.0 {
                        return Some((i, j));
                    }
                    continue;
                }
                if segments_intersect(e[i].0, e[i].1, e[j].0, e[j].1) {
                    return Some((i, j));
                }
            }
        }
        None
    }

    pub fn area(&self) -> f64 {
        0.5 * self
            .edges()
            .map(|((x0, y0), (x1, y1))| x0 * y1 - x1 * y0)
            .sum::<f64>()
    }

    /// Area centroid.
    pub fn centroid(&self) -> (f64, f64) {
        let a = self.area();
        let (cx, cy) = self.edges().fold((0.0, 0.0), |(cx, cy), ((x0, y0), (x1, y1))| {
            let cr = x0 * y1 - x1 * y0;
            (cx + (x0 + x1) * cr, cy + (y0 + y1) * cr)
        });
        (cx / (6.0 * a), cy / (6.0 * a))
    }

    fn in_bbox(&self, (x, y): (f64, f64), pad: f64) -> bool {
        let (x0, y0, x1, y1) = self.bbox;
        x >= x0 - pad && x <= x1 + pad && y >= y0 - pad && y <= y1 + pad
    }

    /// Even-odd containment; points on an edge count as inside.
    pub fn contains(&self, p: (f64, f64)) -> bool {
        if !self.in_bbox(p, BOUNDARY_EPS) {
            return false;
        }
        let (px, py) = p;
        let mut inside = false;
        for (a, b) in self.edges() {
            if point_segment_distance(p, a, b) <= BOUNDARY_EPS {
                return true;
            }
            let ((xi, yi), (xj, yj)) = (a, b);
            if (yi > py) != (yj > py) {
                let x_cross = xi + (py - yi) * (xj - xi) / (yj - yi);
                if px < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Euclidean distance from `p` to the polygon; zero inside.
    pub fn distance(&self, p: (f64, f64)) -> f64 {
        if self.contains(p) {
            return 0.0;
        }
        self.edges()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }
}

const BOUNDARY_EPS: f64 = 1e-9;

fn bounding_box(v: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    v.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
    )
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

// (q - p) · (r - q) < 0 means r folds back over q->p
fn dot_sub(p: (f64, f64), q: (f64, f64), r: (f64, f64)) -> f64 {
    -((q.0 - p.0) * (r.0 - q.0) + (q.1 - p.1) * (r.1 - q.1))
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

fn segments_intersect(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

pub fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - (a.0 + t * dx)).hypot(p.1 - (a.1 + t * dy))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Zone {
    pub id: ZoneId,
    pub kind: ZoneKind,
    pub feeds_section: Option<usize>,
    pub polygon: Polygon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub id: usize,
    pub zones: Vec<ZoneId>,
}

/// Validated zone map. Zones are kept sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneMap {
    zones: Vec<Zone>,
    sections: Vec<Section>,
    section_of_zone: BTreeMap<ZoneId, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ZoneFile {
    zones: Vec<ZoneRecord>,
    sections: Vec<Section>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ZoneRecord {
    id: ZoneId,
    kind: ZoneKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feeds_section: Option<usize>,
    polygon: Vec<[f64; 2]>,
}

impl ZoneMap {
    pub fn new(mut zones: Vec<Zone>, mut sections: Vec<Section>) -> Result<Self> {
        zones.sort_by_key(|z| z.id);
        for w in zones.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Integrity(format!("duplicate zone id {}", w[0].id)));
            }
        }
        sections.sort_by_key(|s| s.id);
        for (i, s) in sections.iter().enumerate() {
            if s.id != i + 1 {
                return Err(Error::Integrity(format!(
                    "section ids must be 1..={} without gaps, found {}",
                    sections.len(),
                    s.id
                )));
            }
        }
        let kinds: BTreeMap<ZoneId, ZoneKind> = zones.iter().map(|z| (z.id, z.kind)).collect();
        let mut section_of_zone = BTreeMap::new();
        for s in &sections {
            for &z in &s.zones {
                match kinds.get(&z) {
                    None => {
                        return Err(Error::Integrity(format!(
                            "section {} references undefined zone {z}",
                            s.id
                        )))
                    }
                    Some(ZoneKind::Circular) => {}
                    Some(k) => {
                        return Err(Error::Integrity(format!(
                            "section {} lists zone {z} of kind {k:?}; only circular zones form sections",
                            s.id
                        )))
                    }
                }
                if section_of_zone.insert(z, s.id).is_some() {
                    return Err(Error::Integrity(format!("zone {z} belongs to more than one section")));
                }
            }
        }
        for z in &zones {
            if z.kind == ZoneKind::Circular && !section_of_zone.contains_key(&z.id) {
                return Err(Error::Integrity(format!(
                    "circular zone {} is not assigned to a section",
                    z.id
                )));
            }
            if let Some(f) = z.feeds_section {
                if f == 0 || f > sections.len() {
                    return Err(Error::Integrity(format!(
                        "zone {} feeds unknown section {f}",
                        z.id
                    )));
                }
            }
        }
        Ok(ZoneMap {
            zones,
            sections,
            section_of_zone,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ZoneFile = serde_json::from_str(text)?;
        let zones = file
            .zones
            .into_iter()
            .map(|r| {
                let polygon = Polygon::new(r.polygon.iter().map(|v| (v[0], v[1])).collect())
                    .map_err(|e| Error::Geometry(format!("zone {}: {e}", r.id)))?;
                Ok(Zone {
                    id: r.id,
                    kind: r.kind,
                    feeds_section: r.feeds_section,
                    polygon,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ZoneMap::new(zones, file.sections)
    }

    pub fn to_json(&self) -> String {
        let file = ZoneFile {
            zones: self
                .zones
                .iter()
                .map(|z| ZoneRecord {
                    id: z.id,
                    kind: z.kind,
                    feeds_section: z.feeds_section,
                    polygon: z.polygon.vertices.iter().map(|&(x, y)| [x, y]).collect(),
                })
                .collect(),
            sections: self.sections.clone(),
        };
        serde_json::to_string_pretty(&file).expect("zone map serializes")
    }

    pub fn zones(&self) -> &[Zone] {
        &self.zones
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    /// Number of location classes P.
    pub fn num_sections(&self) -> usize {
        self.sections.len()
    }

    pub fn zone(&self, id: ZoneId) -> Option<&Zone> {
        self.zones
            .binary_search_by_key(&id, |z| z.id)
            .ok()
            .map(|i| &self.zones[i])
    }

    /// Lowest id of the zones containing `point`.
    pub fn locate(&self, point: (f64, f64)) -> Option<ZoneId> {
        self.zones
            .iter()
            .find(|z| z.polygon.contains(point))
            .map(|z| z.id)
    }

    pub fn locate_zone(&self, point: (f64, f64)) -> Option<&Zone> {
        self.zones.iter().find(|z| z.polygon.contains(point))
    }

    pub fn section_of(&self, zone: ZoneId) -> Result<Option<LocationClass>> {
        let z = self.zone(zone).ok_or(Error::UnknownZone(zone))?;
        let p = match z.kind {
            ZoneKind::Circular => self.section_of_zone.get(&zone).copied(),
            ZoneKind::Excluded => None,
            _ => z.feeds_section,
        };
        p.map(|p| LocationClass::new(p, self.num_sections()))
            .transpose()
    }

    /// Section of the circular zone containing `point`, if any.
    pub fn circular_section_at(&self, point: (f64, f64)) -> Option<LocationClass> {
        let z = self.locate_zone(point)?;
        if z.kind != ZoneKind::Circular {
            return None;
        }
        self.section_of_zone
            .get(&z.id)
            .map(|&p| LocationClass(p as u8))
    }

    pub fn in_excluded_zone(&self, point: (f64, f64)) -> bool {
        self.locate_zone(point)
            .is_some_and(|z| z.kind == ZoneKind::Excluded)
    }

    /// Distance to the nearest non-excluded zone.
    pub fn distance_to_roundabout(&self, point: (f64, f64)) -> f64 {
        self.zones
            .iter()
            .filter(|z| z.kind.is_relevant())
            .map(|z| z.polygon.distance(point))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn circular_zone_ids(&self) -> BTreeSet<ZoneId> {
        self.section_of_zone.keys().copied().collect()
    }
}

pub fn load_zone_map(path: impl AsRef<Path>) -> Result<ZoneMap> {
    let text = std::fs::read_to_string(path)?;
    ZoneMap::from_json(&text)
}
