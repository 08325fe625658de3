use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[synth]
seed = 5
vehicles = 240
duration_s = 720.0

[samples]
stride = 25

[train]
max_epochs = 1
batch_size = 128
seed = 3
"#;

fn roundpred(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roundpred"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = roundpred(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn error_line(o: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    serde_json::from_str(lines[0]).expect("stderr is one JSON object")
}

#[test]
fn end_to_end_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let cfg = p(&cfg);
    let world = root.join("world");
    let prep = root.join("prep");
    let lab = root.join("lab");
    let anc = root.join("anc");

    ok(&["synth", "--config", cfg, "--out", p(&world)]);
    assert!(world.join("zones.json").exists());
    ok(&["preprocess", "--config", cfg, "--input", p(&world), "--out", p(&prep)]);
    ok(&["label", "--input", p(&prep.join("samples.bin")), "--zones", p(&world.join("zones.json")), "--out", p(&lab)]);
    let labeled = lab.join("labeled.bin");
    ok(&["anchors", "--config", cfg, "--input", p(&labeled), "--svg", "--out", p(&anc)]);
    let anchors = anc.join("anchors.bin");
    assert!(anc.join("anchors.svg").exists());

    let mut ckpts = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(format!("train-{run}"));
        let o = ok(&[
            "train", "--config", cfg, "--input", p(&labeled), "--anchors", p(&anchors), "--variant", "3d-a", "--out", p(&out),
        ]);
        let log: Vec<serde_json::Value> = String::from_utf8_lossy(&o.stdout)
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(log.len(), 1);
        assert!(log[0]["log"]["val_nll"].as_f64().unwrap().is_finite());
        ckpts.push(out.join("model-3d-a.ckpt"));
    }
    let a = std::fs::read(&ckpts[0]).unwrap();
    assert_eq!(a, std::fs::read(&ckpts[1]).unwrap());

    let mut reports = Vec::new();
    for run in ["x", "y"] {
        let out = root.join(format!("eval-{run}"));
        ok(&[
            "eval", "--input", p(&labeled), "--checkpoint", p(&ckpts[0]), "--anchors", p(&anchors), "--svg", "2", "--out", p(&out),
        ]);
        reports.push(std::fs::read_to_string(out.join("report.csv")).unwrap());
        let manifest = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
        let line: serde_json::Value = serde_json::from_str(manifest.lines().last().unwrap()).unwrap();
        assert_eq!(line["command"], "eval");
        assert_eq!(std::fs::read_dir(out.join("overlays")).unwrap().count(), 4);
    }
    assert_eq!(reports[0], reports[1]);
    let measured: Vec<&str> = reports[0].lines().filter(|l| l.contains(",measured,")).collect();
    assert_eq!(measured.len(), 2);
    assert!(measured[0].starts_with("3D-A-P,") && measured[1].starts_with("3D-A-W,"));
}

#[test]
fn map_decoding_of_2d_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = roundpred(&["eval", "--variant", "2d", "--mode", "map", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "usage");
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn unknown_flag_and_missing_input_report_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = roundpred(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "usage");

    let missing = dir.path().join("nope.bin");
    let o = roundpred(&["train", "--variant", "3d", "--input", p(&missing), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert!(e["message"].as_str().unwrap().contains("nope.bin"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rat = 0.1\n").unwrap();
    let o = roundpred(&["synth", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"], "config");
}
