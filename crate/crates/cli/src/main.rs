use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use roundpred::anchors::{build_anchors, AnchorSet};
use roundpred::eval::{evaluate, RmseReport};
use roundpred::ingest::{self, ColumnMap, SampleConfig};
use roundpred::maneuvers::label_all;
use roundpred::net::{DecodeMode, Model, ModelConfig, Variant};
use roundpred::synth::{self, SynthConfig};
use roundpred::train::{self, TrainConfig};
use roundpred::zones::load_zone_map;
use roundpred::{dataset, plot};

#[derive(Parser, Debug)]
#[command(name = "roundpred", version, about = "Maneuver-anchored trajectory prediction at roundabouts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML file with [synth], [samples] and [train] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic recording, its zone map and golden labels.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Parse recordings, filter tracks and cut scene samples.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Directory with NN_tracks.csv, NN_tracksMeta.csv, NN_recordingMeta.csv.
        #[arg(long)]
        input: PathBuf,
        /// Zone map JSON; defaults to zones.json in the input directory.
        #[arg(long)]
        zones: Option<PathBuf>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Assign maneuver labels.
    Label {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        zones: PathBuf,
        #[arg(long)]
        a_threshold: Option<f64>,
    },
    /// Build anchor trajectories from the training split.
    Anchors {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        trim: Option<f64>,
        /// Also write anchors.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Train one model variant.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Evaluate checkpoints on the test split and write the RMSE report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        /// May be repeated.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        anchors: Option<PathBuf>,
        /// Expected variant of every checkpoint.
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Write overlay figures for this many test samples.
        #[arg(long)]
        svg: Option<usize>,
    },
    /// Draw the anchor set.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        anchors: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Map,
    Weighted,
}

impl From<ModeArg> for DecodeMode {
    fn from(m: ModeArg) -> DecodeMode {
        match m {
            ModeArg::Map => DecodeMode::MapBest,
            ModeArg::Weighted => DecodeMode::Weighted,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PipelineConfig {
    synth: SynthConfig,
    samples: SampleConfig,
    train: TrainConfig,
}

impl PipelineConfig {
    fn load(common: &Common) -> Result<PipelineConfig> {
        let mut cfg = match &common.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).map_err(|e| roundpred::Error::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.synth.seed = s;
            cfg.train.seed = s;
        }
        Ok(cfg)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_json<T: Serialize>(v: &T) -> String {
    sha256_hex(serde_json::to_string(v).expect("config serializes").as_bytes())
}

fn file_hash(p: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?))
}

/// One manifest record per run, appended to `<out>/manifest.jsonl`.
struct Manifest {
    command: &'static str,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Manifest {
    fn new(command: &'static str, config: serde_json::Value) -> Manifest {
        Manifest {
            command,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn write(&self, out: &Path) -> Result<()> {
        let hashes = |ps: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            ps.iter().map(|p| Ok((p.display().to_string(), file_hash(p)?))).collect()
        };
        let rec = serde_json::json!({
            "command": self.command,
            "versions": {
                "roundpred": env!("CARGO_PKG_VERSION"),
                "checkpoint_format": "RPCKPT01",
                "dataset_format": "RPDATA01",
            },
            "config_hash": hash_json(&self.config),
            "config": self.config,
            "inputs": hashes(&self.inputs)?,
            "outputs": hashes(&self.outputs)?,
        });
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(out.join("manifest.jsonl"))?;
        writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        Ok(())
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn require(p: &Path) -> Result<()> {
    if !p.exists() {
        return Err(roundpred::Error::Usage(format!("input {} does not exist", p.display())).into());
    }
    Ok(())
}

fn run_synth(common: &Common) -> Result<()> {
    let cfg = PipelineConfig::load(common)?;
    ensure_dir(&common.out)?;
    let out = synth::generate(&cfg.synth)?;
    let files = synth::write_outputs(&out, &common.out)?;
    let mut m = Manifest::new("synth", serde_json::to_value(&cfg.synth)?);
    m.outputs = vec![files.tracks, files.tracks_meta, files.recording_meta, files.zones, files.golden];
    m.write(&common.out)?;
    eprintln!("{} tracks, {} golden windows", out.tracks.len(), out.golden.len());
    Ok(())
}

fn run_preprocess(common: &Common, input: &Path, zones: Option<&Path>, stride: Option<usize>) -> Result<()> {
    let mut cfg = PipelineConfig::load(common)?;
    if let Some(s) = stride {
        cfg.samples.stride = s;
    }
    require(input)?;
    let zones = zones.map(Path::to_path_buf).unwrap_or_else(|| input.join("zones.json"));
    require(&zones)?;
    ensure_dir(&common.out)?;
    let map = load_zone_map(&zones)?;
    let prefixes = ingest::discover_recordings(input)?;
    if prefixes.is_empty() {
        return Err(roundpred::Error::Usage(format!("no *_tracks.csv recordings in {}", input.display())).into());
    }
    let mut m = Manifest::new("preprocess", serde_json::to_value(cfg.samples)?);
    m.inputs.push(zones.clone());
    let mut tracks = Vec::new();
    for p in &prefixes {
        let (t, tm, rm) = ingest::recording_files(input, p);
        tracks.extend(ingest::parse_recording(&t, &tm, &rm, &ColumnMap::default())?);
        m.inputs.extend([t, tm, rm]);
    }
    let kept = ingest::filter_tracks(&tracks, &map);
    let (samples, summary) = ingest::make_samples(&kept, &cfg.samples)?;
    let path = common.out.join("samples.bin");
    dataset::save(&path, &samples, 0)?;
    m.outputs.push(path);
    m.write(&common.out)?;
    eprintln!(
        "{} tracks ({} after filtering), {} samples, {} frames without a full window",
        tracks.len(),
        kept.len(),
        summary.emitted,
        summary.skipped_frames
    );
    Ok(())
}

fn run_label(common: &Common, input: &Path, zones: &Path, a: Option<f64>) -> Result<()> {
    let mut cfg = PipelineConfig::load(common)?;
    if let Some(a) = a {
        cfg.train.a_threshold = a;
    }
    if !(cfg.train.a_threshold > 0.0) {
        return Err(roundpred::Error::Usage("--a-threshold must be positive".into()).into());
    }
    require(input)?;
    require(zones)?;
    ensure_dir(&common.out)?;
    let map = load_zone_map(zones)?;
    let (samples, _) = dataset::load(input)?;
    let (labeled, summary) = label_all(samples, &map, cfg.train.a_threshold);
    let path = common.out.join("labeled.bin");
    dataset::save(&path, &labeled, map.num_sections())?;
    let mut m = Manifest::new("label", serde_json::json!({ "a_threshold": cfg.train.a_threshold }));
    m.inputs = vec![input.to_path_buf(), zones.to_path_buf()];
    m.outputs.push(path);
    m.write(&common.out)?;
    eprintln!("{} labeled, {} dropped", summary.labeled, summary.dropped);
    Ok(())
}

fn load_labeled(input: &Path) -> Result<(Vec<ingest::SceneSample>, usize)> {
    require(input)?;
    let (samples, sections) = dataset::load(input)?;
    if sections == 0 || samples.iter().any(|s| s.label.is_none()) {
        return Err(roundpred::Error::Usage(format!("{} is not a labeled dataset; run `label` first", input.display())).into());
    }
    Ok((samples, sections))
}

fn run_anchors(common: &Common, input: &Path, trim: Option<f64>, svg: bool) -> Result<()> {
    let mut cfg = PipelineConfig::load(common)?;
    if let Some(t) = trim {
        cfg.train.trim = t;
    }
    let (samples, sections) = load_labeled(input)?;
    ensure_dir(&common.out)?;
    let split = train::split(&samples, cfg.train.seed);
    let train_set = train::select(&samples, &split.train);
    let anchors = build_anchors(&train_set, sections, cfg.train.trim)?;
    let path = common.out.join("anchors.bin");
    anchors.save(&path)?;
    let mut m = Manifest::new("anchors", serde_json::json!({ "trim": cfg.train.trim, "split_seed": cfg.train.seed }));
    m.inputs.push(input.to_path_buf());
    m.outputs.push(path);
    if svg {
        let p = common.out.join("anchors.svg");
        std::fs::write(&p, plot::anchors_svg(&anchors))?;
        m.outputs.push(p);
    }
    m.write(&common.out)?;
    eprintln!("{} anchors from {} training samples", anchors.len(), train_set.len());
    Ok(())
}

fn load_anchors(path: Option<&Path>) -> Result<Option<AnchorSet>> {
    match path {
        Some(p) => {
            require(p)?;
            Ok(Some(AnchorSet::load(p)?))
        }
        None => Ok(None),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    train: TrainConfig,
    split_seed: u64,
    data_sha256: String,
    best_epoch: usize,
    epochs_run: usize,
    stopped_early: bool,
    diverged: Option<String>,
}

fn run_train(common: &Common, input: &Path, anchors_path: Option<&Path>, variant: Option<Variant>) -> Result<()> {
    let mut cfg = PipelineConfig::load(common)?;
    if let Some(v) = variant {
        cfg.train.variant = v;
    }
    let v = cfg.train.variant;
    if v.uses_anchors() && anchors_path.is_none() {
        return Err(roundpred::Error::Usage(format!("variant {v} needs --anchors")).into());
    }
    if !v.uses_anchors() && anchors_path.is_some() {
        return Err(roundpred::Error::Usage(format!("variant {v} does not use anchors")).into());
    }
    cfg.train.validate()?;
    let (samples, sections) = load_labeled(input)?;
    let anchors = load_anchors(anchors_path)?;
    ensure_dir(&common.out)?;
    let split = train::split(&samples, cfg.train.seed);
    let train_set = train::select(&samples, &split.train);
    let val_set = train::select(&samples, &split.val);
    let first = &samples[0];
    let model_cfg = ModelConfig {
        num_sections: sections,
        history_steps: first.ego_history.len(),
        future_steps: first.ego_future.len(),
        dt: first.ego_future.dt(),
        ..ModelConfig::new(v)
    };
    let mut model = Model::new(model_cfg, cfg.train.seed)?;
    let log_path = common.out.join(format!("train_log-{v}.jsonl"));
    let mut log = std::fs::File::create(&log_path)?;
    let outcome = train::train(&mut model, &train_set, &val_set, anchors.as_ref(), &cfg.train, |e| {
        let line = serde_json::to_string(&serde_json::json!({ "variant": v, "log": e })).expect("log serializes");
        println!("{line}");
        let _ = writeln!(log, "{line}");
    })?;
    let meta = CheckpointMeta {
        train: cfg.train.clone(),
        split_seed: cfg.train.seed,
        data_sha256: file_hash(input)?,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        stopped_early: outcome.stopped_early,
        diverged: outcome.diverged.clone(),
    };
    let ckpt = common.out.join(format!("model-{v}.ckpt"));
    model.save_checkpoint(&ckpt, &serde_json::to_value(&meta)?, anchors.as_ref())?;
    let mut m = Manifest::new("train", serde_json::to_value(&cfg.train)?);
    m.inputs.push(input.to_path_buf());
    if let Some(a) = anchors_path {
        m.inputs.push(a.to_path_buf());
    }
    m.outputs = vec![ckpt, log_path];
    m.write(&common.out)?;
    if let Some(d) = &outcome.diverged {
        eprintln!("training diverged ({d}); kept the best parameters");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_eval(
    common: &Common,
    input: Option<&Path>,
    checkpoints: &[PathBuf],
    anchors_path: Option<&Path>,
    variant: Option<Variant>,
    mode: Option<ModeArg>,
    svg: Option<usize>,
) -> Result<()> {
    // flag-level contract first, before touching any input
    if let (Some(v), Some(m)) = (variant, mode) {
        DecodeMode::from(m)
            .check(v)
            .map_err(|e| roundpred::Error::Usage(e.to_string()))?;
    }
    let Some(input) = input else {
        bail!(roundpred::Error::Usage("eval needs --input".into()));
    };
    if checkpoints.is_empty() {
        bail!(roundpred::Error::Usage("eval needs at least one --checkpoint".into()));
    }
    let (samples, _) = load_labeled(input)?;
    let anchors = load_anchors(anchors_path)?;
    ensure_dir(&common.out)?;
    let mut rows = Vec::new();
    let mut m = Manifest::new("eval", serde_json::Value::Null);
    m.inputs.push(input.to_path_buf());
    if let Some(a) = anchors_path {
        m.inputs.push(a.to_path_buf());
    }
    let mut hash_parts = vec![file_hash(input)?];
    let mut figures = 0;
    for ck in checkpoints {
        require(ck)?;
        let bytes = std::fs::read(ck)?;
        let header_variant = peek_variant(&bytes, anchors.as_ref())?;
        if let Some(v) = variant {
            if v != header_variant {
                bail!(roundpred::Error::Usage(format!(
                    "{} holds variant {header_variant}, not {v}",
                    ck.display()
                )));
            }
        }
        let a = if header_variant.uses_anchors() { anchors.as_ref() } else { None };
        let (model, meta) = Model::from_checkpoint_bytes(&bytes, a)?;
        let meta: CheckpointMeta = serde_json::from_value(meta).context("checkpoint metadata")?;
        let split = train::split(&samples, meta.split_seed);
        let test = train::select(&samples, &split.test);
        let modes: Vec<DecodeMode> = match (mode, header_variant) {
            (Some(md), v) => {
                let md = DecodeMode::from(md);
                md.check(v).map_err(|e| roundpred::Error::Usage(e.to_string()))?;
                vec![md]
            }
            (None, Variant::V3dA) => vec![DecodeMode::MapBest, DecodeMode::Weighted],
            (None, v) => vec![DecodeMode::default_for(v)],
        };
        for md in modes {
            let (row, _) = evaluate(&model, &test, a, md)?;
            if let Some(n) = svg {
                let dir = common.out.join("overlays");
                ensure_dir(&dir)?;
                let full = model.predict_batch(&test[..n.min(test.len())], a, if model.config().variant.has_heads() { DecodeMode::FullMixture } else { md })?;
                for (i, (s, p)) in test.iter().zip(&full).enumerate() {
                    let path = dir.join(format!("{}-{}-{i:04}.svg", row.baseline.name(), header_variant));
                    std::fs::write(&path, plot::overlay_svg(s, p))?;
                    figures += 1;
                }
            }
            rows.push(row);
        }
        hash_parts.push(sha256_hex(&bytes));
        m.inputs.push(ck.clone());
    }
    let report = RmseReport {
        rows,
        config_hash: sha256_hex(hash_parts.join(",").as_bytes()),
        dt: samples[0].ego_future.dt(),
    };
    let txt = common.out.join("report.txt");
    let csv = common.out.join("report.csv");
    std::fs::write(&txt, report.to_text())?;
    std::fs::write(&csv, report.to_csv())?;
    print!("{}", report.to_text());
    m.config = serde_json::json!({ "mode": mode.map(|x| format!("{x:?}").to_lowercase()), "svg": svg });
    m.outputs = vec![txt, csv];
    m.write(&common.out)?;
    if figures > 0 {
        eprintln!("{figures} overlay figures in {}", common.out.join("overlays").display());
    }
    Ok(())
}

/// Variant recorded in a checkpoint header, without loading its weights.
fn peek_variant(bytes: &[u8], anchors: Option<&AnchorSet>) -> Result<Variant> {
    match Model::from_checkpoint_bytes(bytes, anchors) {
        Ok((m, _)) => Ok(m.config().variant),
        Err(roundpred::Error::Variant(_)) if anchors.is_none() => {
            Err(roundpred::Error::Usage("checkpoint needs anchors; pass --anchors".into()).into())
        }
        Err(roundpred::Error::Integrity(e)) if anchors.is_some() => {
            // a non-anchor checkpoint can still be read without anchors
            match Model::from_checkpoint_bytes(bytes, None) {
                Ok((m, _)) => Ok(m.config().variant),
                Err(_) => Err(roundpred::Error::Integrity(e).into()),
            }
        }
        Err(e) => Err(e.into()),
    }
}

fn run_plot(common: &Common, anchors: &Path) -> Result<()> {
    require(anchors)?;
    ensure_dir(&common.out)?;
    let a = AnchorSet::load(anchors)?;
    let path = common.out.join("anchors.svg");
    std::fs::write(&path, plot::anchors_svg(&a))?;
    let mut m = Manifest::new("plot", serde_json::Value::Null);
    m.inputs.push(anchors.to_path_buf());
    m.outputs.push(path);
    m.write(&common.out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => run_synth(&common),
        Command::Preprocess { common, input, zones, stride } => run_preprocess(&common, &input, zones.as_deref(), stride),
        Command::Label { common, input, zones, a_threshold } => run_label(&common, &input, &zones, a_threshold),
        Command::Anchors { common, input, trim, svg } => run_anchors(&common, &input, trim, svg),
        Command::Train { common, input, anchors, variant } => run_train(&common, &input, anchors.as_deref(), variant),
        Command::Eval { common, input, checkpoint, anchors, variant, mode, svg } => {
            run_eval(&common, input.as_deref(), &checkpoint, anchors.as_deref(), variant, mode, svg)
        }
        Command::Plot { common, anchors } => run_plot(&common, &anchors),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `{"error": kind, "message": ...}` on stderr; usage errors exit with 2.
fn report(kind: &str, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": one_line(message) });
    eprintln!("{line}");
    ExitCode::from(if kind == "usage" { 2 } else { 1 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                e.exit();
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            return report("usage", first.trim_start_matches("error: "));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<roundpred::Error>() {
            Some(inner) => report(inner.kind(), &format!("{e:#}")),
            None => report("io", &format!("{e:#}")),
        },
    }
}
