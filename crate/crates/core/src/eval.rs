//! RMSE over prediction horizons.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::ingest::SceneSample;
use crate::net::{DecodeMode, Model, Prediction, Variant};
use crate::trajkit::PoseSequence;

/// 1-based decoder steps reported as the 1, 2, 3 and 4 s horizons.
pub const HORIZON_STEPS: [usize; 4] = [6, 12, 19, 25];
pub const HORIZON_LABELS_S: [f64; 4] = [1.0, 2.0, 3.0, 4.0];

/// The five compared configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Baseline {
    #[serde(rename = "2D")]
    TwoD,
    #[serde(rename = "3D")]
    ThreeD,
    #[serde(rename = "3D-M")]
    Maneuver,
    #[serde(rename = "3D-A-P")]
    AnchorMap,
    #[serde(rename = "3D-A-W")]
    AnchorWeighted,
}

impl Baseline {
    pub const ALL: [Baseline; 5] = [
        Baseline::TwoD,
        Baseline::ThreeD,
        Baseline::Maneuver,
        Baseline::AnchorMap,
        Baseline::AnchorWeighted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::TwoD => "2D",
            Baseline::ThreeD => "3D",
            Baseline::Maneuver => "3D-M",
            Baseline::AnchorMap => "3D-A-P",
            Baseline::AnchorWeighted => "3D-A-W",
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            Baseline::TwoD => Variant::V2d,
            Baseline::ThreeD => Variant::V3d,
            Baseline::Maneuver => Variant::V3dM,
            Baseline::AnchorMap | Baseline::AnchorWeighted => Variant::V3dA,
        }
    }

    pub fn mode(self) -> DecodeMode {
        match self {
            Baseline::TwoD | Baseline::ThreeD => DecodeMode::Plain,
            Baseline::Maneuver | Baseline::AnchorMap => DecodeMode::MapBest,
            Baseline::AnchorWeighted => DecodeMode::Weighted,
        }
    }

    /// The baseline a variant / mode pair evaluates, if any.
    pub fn from_variant_mode(variant: Variant, mode: DecodeMode) -> Result<Baseline> {
        let b = match (variant, mode) {
            (Variant::V2d, DecodeMode::Plain) => Baseline::TwoD,
            (Variant::V3d, DecodeMode::Plain) => Baseline::ThreeD,
            (Variant::V3dM, DecodeMode::MapBest) => Baseline::Maneuver,
            (Variant::V3dA, DecodeMode::MapBest) => Baseline::AnchorMap,
            (Variant::V3dA, DecodeMode::Weighted) => Baseline::AnchorWeighted,
            _ => {
                return Err(Error::Usage(format!(
                    "variant {variant} cannot be evaluated in mode {mode:?}"
                )))
            }
        };
        Ok(b)
    }

    /// Published RMSE (m) at 1, 2, 3 and 4 s on the full real-world dataset.
    pub fn reference_rmse(self) -> [f64; 4] {
        match self {
            Baseline::TwoD => [0.53, 1.62, 3.10, 4.92],
            Baseline::ThreeD => [0.55, 1.32, 2.50, 4.02],
            Baseline::Maneuver => [0.42, 0.87, 1.95, 3.31],
            Baseline::AnchorMap => [0.39, 0.84, 1.87, 3.27],
            Baseline::AnchorWeighted => [0.38, 0.80, 1.76, 3.08],
        }
    }
}

/// Root mean squared Euclidean position error at 1-based `step`.
pub fn rmse(predictions: &[PoseSequence], truths: &[PoseSequence], step: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Evaluation("no predictions".into()));
    }
    if predictions.len() != truths.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} ground truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut sum = 0.0;
    for (p, t) in predictions.iter().zip(truths) {
        if step == 0 || step > p.len() || step > t.len() {
            return Err(Error::Evaluation(format!(
                "step {step} outside prediction of {} / truth of {} steps",
                p.len(),
                t.len()
            )));
        }
        let d = p.poses()[step - 1].distance(&t.poses()[step - 1]);
        sum += d * d;
    }
    Ok((sum / predictions.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub baseline: Baseline,
    pub rmse: [f64; 4],
    pub samples: usize,
}

impl RmseRow {
    /// Mean over the four horizons.
    pub fn average(&self) -> f64 {
        self.rmse.iter().sum::<f64>() / 4.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub rows: Vec<RmseRow>,
    /// Hash of the configuration the rows were produced with.
    pub config_hash: String,
    pub dt: f64,
}

impl RmseReport {
    pub fn row(&self, b: Baseline) -> Option<&RmseRow> {
        self.rows.iter().find(|r| r.baseline == b)
    }

    fn horizon_header(&self) -> String {
        HORIZON_STEPS
            .iter()
            .map(|&s| format!("step {s} = {:.2} s", s as f64 * self.dt))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Aligned table with measured rows and, below, the published reference.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "RMSE (m); horizons {}", self.horizon_header());
        let _ = writeln!(out, "config {}", self.config_hash);
        let _ = writeln!(out, "{:<8}{:>8}{:>8}{:>8}{:>8}{:>9}{:>9}", "model", "1s", "2s", "3s", "4s", "avg", "samples");
        for r in &self.rows {
            let _ = write!(out, "{:<8}", r.baseline.name());
            for v in r.rmse {
                let _ = write!(out, "{v:>8.3}");
            }
            let _ = writeln!(out, "{:>9.3}{:>9}", r.average(), r.samples);
        }
        let _ = writeln!(out, "reference (published, real-world data):");
        for b in Baseline::ALL {
            let _ = write!(out, "{:<8}", b.name());
            for v in b.reference_rmse() {
                let _ = write!(out, "{v:>8.2}");
            }
            let _ = writeln!(out);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,kind,rmse_1s,rmse_2s,rmse_3s,rmse_4s,average,samples\n");
        for r in &self.rows {
            let v = r.rmse;
            let _ = writeln!(
                out,
                "{},measured,{},{},{},{},{},{}",
                r.baseline.name(),
                v[0],
                v[1],
                v[2],
                v[3],
                r.average(),
                r.samples
            );
        }
        for b in Baseline::ALL {
            let v = b.reference_rmse();
            let avg = v.iter().sum::<f64>() / 4.0;
            let _ = writeln!(out, "{},reference,{},{},{},{},{avg},", b.name(), v[0], v[1], v[2], v[3]);
        }
        out
    }
}

/// Predictions and RMSE row for one baseline.
pub fn evaluate(model: &Model, test: &[SceneSample], anchors: Option<&AnchorSet>, mode: DecodeMode) -> Result<(RmseRow, Vec<Prediction>)> {
    let baseline = Baseline::from_variant_mode(model.config().variant, mode)?;
    let preds = model.predict_batch(test, anchors, mode)?;
    let means: Vec<PoseSequence> = preds.iter().map(|p| p.mean.clone()).collect();
    let truths: Vec<PoseSequence> = test.iter().map(|s| s.ego_future.clone()).collect();
    let mut rm = [0.0; 4];
    for (r, &s) in rm.iter_mut().zip(&HORIZON_STEPS) {
        *r = rmse(&means, &truths, s)?;
    }
    Ok((
        RmseRow {
            baseline,
            rmse: rm,
            samples: test.len(),
        },
        preds,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajkit::{Pose, RigidTransform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(v: Vec<(f64, f64)>) -> PoseSequence {
        PoseSequence::new(v.into_iter().map(|(x, y)| Pose::new(x, y, 0.0)).collect(), 0.16).unwrap()
    }

    #[test]
    fn basic_values() {
        let a = seq(vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(rmse(&[a.clone()], &[a.clone()], 2).unwrap(), 0.0);
        let b = seq(vec![(0.0, 0.0), (4.0, 5.0)]);
        assert_eq!(rmse(&[a.clone()], &[b], 2).unwrap(), 5.0);
        assert!(matches!(rmse(&[], &[], 1), Err(Error::Evaluation(_))));
    }

    #[test]
    fn spreadsheet_oracle_and_rigid_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mk = |rng: &mut ChaCha8Rng| seq((0..3).map(|_| (rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0))).collect());
        let p: Vec<PoseSequence> = (0..10).map(|_| mk(&mut rng)).collect();
        let t: Vec<PoseSequence> = (0..10).map(|_| mk(&mut rng)).collect();
        let mut col = Vec::new();
        for i in 0..10 {
            let dx = p[i].poses()[2].x - t[i].poses()[2].x;
            let dy = p[i].poses()[2].y - t[i].poses()[2].y;
            col.push(dx * dx + dy * dy);
        }
        let want = (col.iter().sum::<f64>() / 10.0).sqrt();
        let got = rmse(&p, &t, 3).unwrap();
        assert!((got - want).abs() < 1e-12);
        let tf = RigidTransform::from_pose(&Pose::new(12.0, -3.0, 1.1));
        let p2: Vec<PoseSequence> = p.iter().map(|s| s.transformed(&tf)).collect();
        let t2: Vec<PoseSequence> = t.iter().map(|s| s.transformed(&tf)).collect();
        assert!((rmse(&p2, &t2, 3).unwrap() - got).abs() < 1e-12);
    }

    #[test]
    fn reference_rows() {
        assert_eq!(Baseline::AnchorWeighted.reference_rmse()[3], 3.08);
        assert_eq!(Baseline::TwoD.reference_rmse()[3], 4.92);
        let avg = |b: Baseline| b.reference_rmse().iter().sum::<f64>() / 4.0;
        let gain = 1.0 - avg(Baseline::AnchorWeighted) / avg(Baseline::ThreeD);
        assert!((gain - 0.28).abs() < 0.005);
    }

    #[test]
    fn mode_mismatch_is_usage_error() {
        assert!(matches!(
            Baseline::from_variant_mode(Variant::V2d, DecodeMode::MapBest),
            Err(Error::Usage(_))
        ));
        for b in Baseline::ALL {
            assert_eq!(Baseline::from_variant_mode(b.variant(), b.mode()).unwrap(), b);
        }
    }

    #[test]
    fn report_renders_both_formats() {
        let r = RmseReport {
            rows: vec![RmseRow {
                baseline: Baseline::AnchorWeighted,
                rmse: [0.1, 0.2, 0.3, 0.4],
                samples: 9,
            }],
            config_hash: "abc".into(),
            dt: 0.16,
        };
        let text = r.to_text();
        assert!(text.contains("step 19 = 3.04 s"));
        assert!(text.contains("3D-A-W"));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 1 + 5);
        assert!(csv.contains("3D-A-W,reference,0.38,0.8,1.76,3.08"));
    }
}
