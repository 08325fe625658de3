use roundpred::anchors::{build_anchors, AnchorSet};
use roundpred::dataset;
use roundpred::eval::evaluate;
use roundpred::ingest::{filter_tracks, make_samples, parse_recording, ColumnMap, SampleConfig, SceneSample};
use roundpred::maneuvers::label_all;
use roundpred::net::{DecodeMode, Model, ModelConfig, Variant};
use roundpred::synth::{generate, write_outputs, SynthConfig};
use roundpred::train::{select, split, train, TrainConfig};
use roundpred::zones::load_zone_map;

fn labeled_from_files(dir: &std::path::Path) -> Vec<SceneSample> {
    let cfg = SynthConfig {
        vehicles: 80,
        duration_s: 240.0,
        seed: 4,
        noise_std: 0.05,
        ..SynthConfig::default()
    };
    let out = generate(&cfg).unwrap();
    let files = write_outputs(&out, dir).unwrap();
    let tracks = parse_recording(&files.tracks, &files.tracks_meta, &files.recording_meta, &ColumnMap::default()).unwrap();
    let map = load_zone_map(&files.zones).unwrap();
    let tracks = filter_tracks(&tracks, &map);
    let sc = SampleConfig {
        stride: 10,
        ..SampleConfig::default()
    };
    let (samples, _) = make_samples(&tracks, &sc).unwrap();
    let (labeled, summary) = label_all(samples, &map, cfg.label_threshold);
    assert!(labeled.len() > 500, "only {} labeled samples, {} dropped", labeled.len(), summary.dropped);
    labeled
}

#[test]
fn files_round_trip_through_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let samples = labeled_from_files(dir.path());

    let data = dir.path().join("labeled.bin");
    dataset::save(&data, &samples, 8).unwrap();
    let (back, sections) = dataset::load(&data).unwrap();
    assert_eq!(sections, 8);
    assert_eq!(back, samples);

    let anchors = build_anchors(&samples, 8, 0.2).unwrap();
    let path = dir.path().join("anchors.bin");
    anchors.save(&path).unwrap();
    let loaded = AnchorSet::load(&path).unwrap();
    assert_eq!(loaded.digest(), anchors.digest());
    assert!(loaded.member_counts().iter().all(|&c| c > 0));
}

#[test]
fn short_training_gives_finite_calibrated_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let samples = labeled_from_files(dir.path());
    let sp = split(&samples, 1);
    let mut all: Vec<usize> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..samples.len()).collect::<Vec<_>>());

    let (tr, va, te) = (select(&samples, &sp.train), select(&samples, &sp.val), select(&samples, &sp.test));
    let anchors = build_anchors(&tr, 8, 0.2).unwrap();
    let mut model = Model::new(ModelConfig::new(Variant::V3dA), 2).unwrap();
    let tc = TrainConfig {
        variant: Variant::V3dA,
        max_epochs: 3,
        batch_size: 64,
        seed: 2,
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &tr, &va, Some(&anchors), &tc, |_| {}).unwrap();
    assert!(outcome.diverged.is_none());
    let first = outcome.history[0].val_nll;
    let best = outcome.history.iter().map(|l| l.val_nll).fold(f64::INFINITY, f64::min);
    assert!(best <= first);

    for mode in [DecodeMode::MapBest, DecodeMode::Weighted] {
        let (row, preds) = evaluate(&model, &te, Some(&anchors), mode).unwrap();
        assert_eq!(row.samples, te.len());
        assert!(row.rmse.iter().all(|r| r.is_finite() && *r >= 0.0));
        for p in &preds {
            let loc: f64 = p.loc_probs.as_ref().unwrap().iter().sum();
            let acc: f64 = p.acc_probs.as_ref().unwrap().iter().sum();
            assert!((loc - 1.0).abs() < 1e-9 && (acc - 1.0).abs() < 1e-9);
        }
    }
}
