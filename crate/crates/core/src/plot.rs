//! Static SVG figures: the anchor set and per-sample prediction overlays.

use std::fmt::Write as _;

use crate::anchors::AnchorSet;
use crate::ingest::SceneSample;
use crate::maneuvers::NUM_ACCEL_CLASSES;
use crate::net::Prediction;
use crate::trajkit::PoseSequence;

/// One color per location section, cycled past eight.
pub const SECTION_COLORS: [&str; 8] = [
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#9a6324",
];
const DASHES: [&str; NUM_ACCEL_CLASSES] = ["6 3", "", "1 3"];
const SIZE: f64 = 640.0;
const MARGIN: f64 = 30.0;

struct Frame {
    x0: f64,
    y1: f64,
    scale: f64,
}

impl Frame {
    /// Equal-aspect fit of all points.
    fn fit<'a>(points: impl Iterator<Item = &'a PoseSequence>) -> Frame {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for s in points {
            for p in s.poses() {
                x0 = x0.min(p.x);
                x1 = x1.max(p.x);
                y0 = y0.min(p.y);
                y1 = y1.max(p.y);
            }
        }
        if !x0.is_finite() {
            (x0, y0, x1, y1) = (-1.0, -1.0, 1.0, 1.0);
        }
        let span = (x1 - x0).max(y1 - y0).max(1e-6);
        let scale = (SIZE - 2.0 * MARGIN) / span;
        // center the shorter axis
        let cx = 0.5 * (span - (x1 - x0));
        let cy = 0.5 * (span - (y1 - y0));
        Frame {
            x0: x0 - cx,
            y1: y1 + cy,
            scale,
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (MARGIN + (x - self.x0) * self.scale, MARGIN + (self.y1 - y) * self.scale)
    }

    fn polyline(&self, out: &mut String, seq: &PoseSequence, style: &str) {
        let pts: Vec<String> = seq
            .poses()
            .iter()
            .map(|p| {
                let (x, y) = self.map(p.x, p.y);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" points="{}" {style}/>"#, pts.join(" "));
    }
}

fn open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{MARGIN}" y="20" font-family="sans-serif" font-size="13">{title}</text>"#);
}

fn dash(q_index: usize) -> String {
    match DASHES[q_index % NUM_ACCEL_CLASSES] {
        "" => String::new(),
        d => format!(r#" stroke-dasharray="{d}""#),
    }
}

/// All anchors in the ego frame; color encodes the location section and the
/// dash pattern the acceleration profile (dashed slowing, solid constant,
/// dotted speeding).
pub fn anchors_svg(anchors: &AnchorSet) -> String {
    let frame = Frame::fit(anchors.anchors().iter());
    let mut out = String::new();
    open(&mut out, &format!("{} anchor trajectories", anchors.len()));
    for (k, a) in anchors.anchors().iter().enumerate() {
        let section = k / NUM_ACCEL_CLASSES;
        let q = k % NUM_ACCEL_CLASSES;
        let color = SECTION_COLORS[section % SECTION_COLORS.len()];
        let _ = write!(out, r#"<g class="anchor" data-k="{}" data-section="{}">"#, k + 1, section + 1);
        frame.polyline(&mut out, a, &format!(r#"stroke="{color}" stroke-width="2"{}"#, dash(q)));
        let _ = writeln!(out, "</g>");
    }
    out.push_str("</svg>\n");
    out
}

/// History, ground truth and predicted means of one sample. Mixture
/// components are drawn with opacity proportional to their probability.
pub fn overlay_svg(sample: &SceneSample, prediction: &Prediction) -> String {
    let component_means: Vec<(usize, f64, PoseSequence)> = prediction
        .mixture
        .as_ref()
        .map(|m| {
            m.components
                .iter()
                .enumerate()
                .filter_map(|(k, steps)| {
                    let poses = steps
                        .iter()
                        .map(|g| crate::trajkit::Pose::new(g.mean[0], g.mean[1], g.mean.get(2).copied().unwrap_or(0.0)))
                        .collect();
                    PoseSequence::new(poses, sample.ego_future.dt())
                        .ok()
                        .map(|s| (k, m.anchor_probs[k], s))
                })
                .collect()
        })
        .unwrap_or_default();
    let frame = Frame::fit(
        [&sample.ego_history, &sample.ego_future, &prediction.mean]
            .into_iter()
            .chain(sample.neighbor_histories.iter())
            .chain(component_means.iter().map(|(_, _, s)| s)),
    );
    let mut out = String::new();
    let (r, tr, t) = sample.key();
    open(&mut out, &format!("recording {r} track {tr} frame {t}"));
    for n in &sample.neighbor_histories {
        frame.polyline(&mut out, n, r##"stroke="#bbbbbb" stroke-width="1.5""##);
    }
    let pmax = component_means.iter().map(|c| c.1).fold(0.0, f64::max);
    for (k, p, s) in &component_means {
        let color = SECTION_COLORS[(k / NUM_ACCEL_CLASSES) % SECTION_COLORS.len()];
        let alpha = if pmax > 0.0 { (p / pmax).clamp(0.03, 1.0) } else { 0.03 };
        frame.polyline(
            &mut out,
            s,
            &format!(r#"stroke="{color}" stroke-opacity="{alpha:.3}" stroke-width="{:.2}"{}"#, 1.0 + 2.0 * alpha, dash(k % NUM_ACCEL_CLASSES)),
        );
    }
    frame.polyline(&mut out, &sample.ego_history, r##"stroke="#555555" stroke-width="2.5""##);
    frame.polyline(&mut out, &sample.ego_future, r#"stroke="black" stroke-width="2.5""#);
    frame.polyline(&mut out, &prediction.mean, r#"stroke="black" stroke-width="1.5" stroke-dasharray="4 2""#);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::tests::{random_anchors, random_sample, small_config};
    use crate::net::{DecodeMode, Model, ModelConfig, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_figure_has_24_lines_in_8_colors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_anchors(&mut rng, &ModelConfig::new(Variant::V3dA));
        assert_eq!(a.len(), 24);
        let svg = anchors_svg(&a);
        assert_eq!(svg.matches("<polyline").count(), 24);
        for c in SECTION_COLORS {
            assert_eq!(svg.matches(&format!("stroke=\"{c}\"")).count(), 3);
        }
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn overlay_draws_all_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small_config(Variant::V3dA);
        let anchors = random_anchors(&mut rng, &cfg);
        let sample = random_sample(&mut rng, &cfg, 2);
        let model = Model::new(cfg, 1).unwrap();
        let pred = model.predict(&sample, Some(&anchors), DecodeMode::FullMixture).unwrap();
        let svg = overlay_svg(&sample, &pred);
        let comps = pred.mixture.as_ref().unwrap().components.len();
        assert_eq!(comps, 6);
        assert_eq!(svg.matches("<polyline").count(), 2 + comps + 3);
    }
}
