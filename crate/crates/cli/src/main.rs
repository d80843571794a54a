use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use ssos_core::eval::{evaluate_detections, evaluate_open_world, GroundTruth};
use ssos_core::harness::coco::{load_coco_annotations, load_scenes, save_scenes, CocoDataset};
use ssos_core::harness::io::write_atomic;
use ssos_core::harness::store::{write_vectors, RecordId};
use ssos_core::harness::sweep::{run_sweep, sweep_csv};
use ssos_core::harness::synth::{generate_synthetic, SyntheticSceneSpec};
use ssos_core::harness::with_thread_pool;
use ssos_core::pipeline::{infer, train, DetectionRecord, Model, TrainConfig};
use ssos_core::scene::Scene;

/// Open-world object anomaly detection on feature scenes.
#[derive(Parser)]
#[command(name = "ssos", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train, test_in, test_ood splits).
    Synth(SynthArgs),
    /// Train a model bundle.
    Train(TrainArgs),
    /// Score candidate boxes and dump detection records.
    Infer(InferArgs),
    /// Compute a metric report from detection records.
    Eval(EvalArgs),
    /// Grid over pseudo-class count and sample count.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with generator settings; missing keys use defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of training scenes.
    #[arg(long)]
    scenes: Option<usize>,
}

/// Training settings shared by `train` and `sweep`; flags override the config file.
#[derive(Args)]
struct ConfigArgs {
    /// JSON file with flat configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    k_pseudo: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sample_count: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene prefix: reads `<PREFIX>.json` and `<PREFIX>.ofm`.
    #[arg(long)]
    scenes: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Model bundle path; the configuration is written next to it as `<OUT>.json`.
    #[arg(long)]
    out: PathBuf,
    /// Pseudo-label CSV (`object_id,label`).
    #[arg(long)]
    labels_out: Option<PathBuf>,
    /// Pooled ground-truth features as an OFV1 store.
    #[arg(long)]
    dump_features: Option<PathBuf>,
    /// Per-iteration losses and per-epoch statistics as JSON.
    #[arg(long)]
    history_out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Scene prefix: reads `<PREFIX>.json` and `<PREFIX>.ofm`.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// In-distribution detection records.
    #[arg(long)]
    records: PathBuf,
    /// Annotation file with the in-distribution ground truth.
    #[arg(long)]
    gt: PathBuf,
    /// Out-of-distribution detection records; enables the anomaly protocol.
    #[arg(long, requires = "ood_gt")]
    ood_records: Option<PathBuf>,
    #[arg(long, requires = "ood_records")]
    ood_gt: Option<PathBuf>,
    /// Pixels per box unit for size bins; defaults to the annotation stride, else 1.
    #[arg(long)]
    pixel_scale: Option<f64>,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Report as `metric,value` CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Pseudo-class counts, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    k: Vec<usize>,
    /// Outlier sample counts, comma separated; defaults to the configured count.
    #[arg(long, value_delimiter = ',')]
    samples: Vec<usize>,
    /// Seeds per cell; each row holds the mean over them.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn read_scenes(prefix: &Path) -> Result<(Vec<Scene>, CocoDataset)> {
    let (json, ofm) = (with_ext(prefix, "json"), with_ext(prefix, "ofm"));
    let (scenes, ds) = load_scenes(&json, &ofm).with_context(|| format!("loading scenes {}", prefix.display()))?;
    if ds.warnings > 0 {
        eprintln!("warning: skipped {} malformed entries in {}", ds.warnings, json.display());
    }
    Ok((scenes, ds))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => TrainConfig::default().with_overrides(&read_json(p)?).with_context(|| format!("config {}", p.display()))?,
            None => TrainConfig::default(),
        };
        let mut o = serde_json::Map::new();
        if let Some(m) = &self.mode {
            o.insert("mode".into(), json!(m.parse::<ssos_core::pipeline::Mode>()?));
        }
        if let Some(v) = self.k_pseudo {
            o.insert("k_pseudo".into(), json!(v));
        }
        if let Some(v) = self.epochs {
            o.insert("epochs".into(), json!(v));
        }
        if let Some(v) = self.seed {
            o.insert("seed".into(), json!(v));
        }
        if let Some(v) = self.sample_count {
            o.insert("sample_count".into(), json!(v));
        }
        if let Some(v) = self.learning_rate {
            o.insert("learning_rate".into(), json!(v));
        }
        let cfg = base.with_overrides(&Value::Object(o))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_value::<SyntheticSceneSpec>(read_json(p)?).context("synthetic spec")?,
        None => SyntheticSceneSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.scenes {
        spec.n_scenes = n;
    }
    let data = generate_synthetic(&spec)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, scenes) in [("train", &data.train), ("test_in", &data.test_in), ("test_ood", &data.test_ood)] {
        let prefix = a.out.join(name);
        save_scenes(scenes, spec.stride, &with_ext(&prefix, "json"), &with_ext(&prefix, "ofm"))?;
    }
    write_json(&a.out.join("spec.json"), &spec)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let (scenes, _) = read_scenes(&a.scenes)?;
    let out = with_thread_pool(|| train(&scenes, &cfg))??;
    out.model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.labels_out {
        let ids: Vec<u64> = out.object_ids.iter().map(|&(_, ann)| ann).collect();
        write_atomic(p, out.labels.to_csv(&ids)?.as_bytes())?;
    }
    if let Some(p) = &a.dump_features {
        let rows: Vec<Vec<f32>> = out.object_features.iter().map(|z| z.iter().map(|&v| v as f32).collect()).collect();
        let ids: Vec<RecordId> =
            out.object_ids.iter().map(|&(image_id, annotation_id)| RecordId { image_id, annotation_id }).collect();
        write_vectors(p, &rows, out.model.z_dim(), &ids)?;
    }
    if let Some(p) = &a.history_out {
        write_json(p, &out.history)?;
    }
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let model = Model::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let (scenes, _) = read_scenes(&a.scenes)?;
    let records = with_thread_pool(|| infer(&model, &scenes))??;
    write_json(&a.out, &records)
}

fn read_records(path: &Path) -> Result<Vec<DetectionRecord>> {
    serde_json::from_value(read_json(path)?).with_context(|| format!("detection records {}", path.display()))
}

fn read_gt(path: &Path) -> Result<(GroundTruth, Option<f64>)> {
    let ds = load_coco_annotations(path).with_context(|| format!("annotations {}", path.display()))?;
    if ds.warnings > 0 {
        eprintln!("warning: skipped {} malformed entries in {}", ds.warnings, path.display());
    }
    let gt = ds.boxes.iter().map(|(&id, boxes)| (id, boxes.iter().map(|g| g.bbox).collect())).collect();
    Ok((gt, ds.stride))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let records = read_records(&a.records)?;
    let (gt, stride) = read_gt(&a.gt)?;
    let scale = a.pixel_scale.or(stride).unwrap_or(1.0);
    let report = match (&a.ood_records, &a.ood_gt) {
        (Some(r), Some(g)) => evaluate_open_world(&records, &gt, &read_records(r)?, &read_gt(g)?.0, scale)?,
        _ => evaluate_detections(&records, &gt, scale)?,
    };
    if !report.is_finite() {
        bail!("metric report contains non-finite values");
    }
    write_json(&a.out, &report)?;
    if let Some(p) = &a.csv {
        write_atomic(p, report.to_csv().as_bytes())?;
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let (train_scenes, ds) = read_scenes(&a.data.join("train"))?;
    let (test_in, _) = read_scenes(&a.data.join("test_in"))?;
    let (test_ood, _) = read_scenes(&a.data.join("test_ood"))?;
    let samples = if a.samples.is_empty() { vec![cfg.samples()] } else { a.samples.clone() };
    let scale = ds.stride.unwrap_or(1.0);
    let rows = with_thread_pool(|| run_sweep(&train_scenes, &test_in, &test_ood, &cfg, &a.k, &samples, cfg.seed, a.repeats, scale))??;
    if rows.iter().any(|r| ![r.ar10, r.ar100, r.auroc, r.fpr95].iter().all(|v| v.is_finite())) {
        bail!("sweep produced non-finite metrics");
    }
    write_atomic(&a.out, sweep_csv(&rows).as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::FAILURE;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}
