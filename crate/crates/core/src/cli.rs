//! The `ccl` command line: one binary, five subcommands, fixed output names.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Device;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{
    dataset_fingerprint, generate_synthetic_dataset, scan_dataset, DatasetIndex, LabelSource,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::Window;
use crate::manifest::RunManifest;
use crate::metrics::{evaluate, EvalOptions};
use crate::model::{load_checkpoint, Backbone, BackboneConfig};
use crate::pseudo::{cluster_dataset, ClusterModel};
use crate::scoring::{score_images, DEFAULT_SIGMA};
use crate::seed::derive_seed;
use crate::train::{save_run, train, TrainConfig, CHECKPOINT_FILE};

pub const DATA_ROOT_ENV: &str = "CCL_DATA_ROOT";
pub const LABELS_FILE: &str = "labels.tsv";
pub const CLUSTER_FILE: &str = "cluster.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SCORES_FILE: &str = "scores.tsv";
pub const HEATMAP_DIR: &str = "heatmaps";

#[derive(Debug, Parser)]
#[command(name = "ccl", version, about = "Class-aware contrastive anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural multi-class dataset in MVTec layout.
    MakeSynthetic(MakeSyntheticArgs),
    /// Assign pseudo-class labels to the train images with k-means.
    Cluster(ClusterArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    #[command(alias = "report")]
    Eval(EvalArgs),
    /// Write per-image anomaly heatmaps and scores.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct MakeSyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 20)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 0.5)]
    pub defect_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset root (MVTec layout).
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub kc: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// JSON file with TrainConfig fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `raw`, `pseudo`, or a path to a labels.tsv file.
    #[arg(long, default_value = "raw")]
    pub labels: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Odd window size or `full`.
    #[arg(long)]
    pub k: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Checkpoint file or the directory holding checkpoint.bin.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test hook: evaluate the ground-truth masks instead of model maps.
    #[arg(long)]
    pub use_masks_as_maps: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::MakeSynthetic(a) => make_synthetic(a),
        Command::Cluster(a) => cluster(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => eval(a),
        Command::Score(a) => score(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct ManifestBuilder {
    command: &'static str,
    started: Instant,
}

impl ManifestBuilder {
    fn start(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
        }
    }

    fn finish(
        self,
        out: &Path,
        config: serde_json::Value,
        seed: u64,
        sub_seeds: &[&str],
        data: Option<&Path>,
        artifacts: Vec<String>,
    ) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seed,
            sub_seeds: sub_seeds
                .iter()
                .map(|n| (n.to_string(), derive_seed(seed, n)))
                .collect::<BTreeMap<_, _>>(),
            dataset_fingerprint: data.map(dataset_fingerprint).transpose()?,
            artifacts,
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        manifest.write(out)
    }
}

fn make_synthetic(a: MakeSyntheticArgs) -> Result<()> {
    let m = ManifestBuilder::start("make-synthetic");
    let spec = SyntheticSpec {
        size: a.size,
        ..SyntheticSpec::new(a.classes, a.train_per_class, a.test_per_class, a.defect_fraction, a.seed)
    };
    let summary = generate_synthetic_dataset(&a.out, &spec)?;
    let config = serde_json::json!({
        "classes": a.classes,
        "train_per_class": a.train_per_class,
        "test_per_class": a.test_per_class,
        "defect_fraction": a.defect_fraction,
        "size": a.size,
    });
    let files = summary
        .files
        .iter()
        .map(|f| f.strip_prefix(&a.out).unwrap_or(f).to_string_lossy().replace('\\', "/"))
        .collect();
    m.finish(&a.out, config, a.seed, &[], Some(&a.out), files)
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let m = ManifestBuilder::start("cluster");
    let index = scan_dataset(&a.data.data, a.resolution)?;
    if a.kc > index.train_count() {
        return Err(Error::invalid(format!(
            "--kc {} must not exceed the number of train images ({})",
            a.kc,
            index.train_count()
        )));
    }
    let device = Device::Cpu;
    let extractor = Backbone::new(BackboneConfig { resolution: a.resolution, ..BackboneConfig::desk() }, 0, &device)?;
    let (labeled, model) = cluster_dataset(&index, &extractor, &device, a.kc, derive_seed(a.seed, "cluster"))?;
    create_dir(&a.out)?;
    write_labels(&a.out.join(LABELS_FILE), &labeled)?;
    write_cluster_sidecar(&a.out.join(CLUSTER_FILE), &model, a.kc)?;
    let config = serde_json::json!({ "kc": a.kc, "resolution": a.resolution, "extractor": extractor.encoder().identifier() });
    m.finish(
        &a.out,
        config,
        a.seed,
        &["cluster"],
        Some(&a.data.data),
        vec![LABELS_FILE.into(), CLUSTER_FILE.into()],
    )
}

fn write_labels(path: &Path, index: &DatasetIndex) -> Result<()> {
    let mut text = String::new();
    for i in index.train_indices() {
        let s = index.sample(i);
        let label = s.pseudo_class_id.expect("labelled index");
        text.push_str(&format!("{}\t{label}\n", s.source_path));
    }
    write_text(path, &text)
}

fn write_cluster_sidecar(path: &Path, model: &ClusterModel, kc: usize) -> Result<()> {
    let sidecar = serde_json::json!({
        "kc": kc,
        "seed": model.seed,
        "inertia": model.inertia,
        "iterations": model.iterations,
    });
    write_text(path, &(serde_json::to_string_pretty(&sidecar)? + "\n"))
}

/// Reads `<source_path>\t<label>` lines and attaches them to the train samples.
pub fn read_labels(path: &Path, index: &DatasetIndex) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (name, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::invalid(format!("{}:{}: expected `<path>\\t<label>`", path.display(), n + 1)))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("{}:{}: bad label {label:?}", path.display(), n + 1)))?;
        map.insert(name.to_string(), label);
    }
    let labels = index
        .train_indices()
        .into_iter()
        .map(|i| {
            let s = index.sample(i);
            map.get(&s.source_path)
                .copied()
                .ok_or_else(|| Error::invalid(format!("no label for {} in {}", s.source_path, path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    index.with_pseudo_labels(&labels)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.lambda1 {
        c.lambda1 = v;
    }
    if let Some(v) = a.lambda2 {
        c.lambda2 = v;
    }
    if let Some(v) = a.tau {
        c.temperature = v;
    }
    if let Some(k) = &a.k {
        c.window = k.parse::<Window>().map_err(|e| Error::invalid(format!("k: {e}")))?;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.resolution {
        c.resolution = v;
    }
    if let Some(v) = a.max_epochs {
        c.max_epochs = v;
    }
    if let Some(v) = a.patience {
        c.patience = v;
    }
    c.label_source = if a.labels == "raw" { LabelSource::Raw } else { LabelSource::Pseudo };
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let m = ManifestBuilder::start("train");
    let config = train_config(&a)?;
    let device = Device::Cpu;
    let index = scan_dataset(&a.data.data, config.resolution)?;
    let index = match a.labels.as_str() {
        "raw" => index,
        "pseudo" => {
            let extractor = Backbone::new(config.backbone_config(), 0, &device)?;
            let k = index.class_count();
            cluster_dataset(&index, &extractor, &device, k, derive_seed(config.seed, "cluster"))?.0
        }
        path => read_labels(Path::new(path), &index)?,
    };
    let outcome = train(&config, &index, &device)?;
    let artifacts = save_run(&a.out, &config, &outcome)?;
    let resolved = serde_json::json!({ "train": config, "labels": a.labels });
    m.finish(
        &a.out,
        resolved,
        config.seed,
        &["split", "validation", "init", "sampler", "local", "cluster"],
        Some(&a.data.data),
        artifacts,
    )
}

fn checkpoint_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let m = ManifestBuilder::start("eval");
    let ckpt = checkpoint_file(&a.checkpoint);
    let (model, manifest) = load_checkpoint(&ckpt, &Device::Cpu)?;
    let index = scan_dataset(&a.data.data, manifest.backbone.resolution)?;
    let opts = EvalOptions {
        masks_as_maps: a.use_masks_as_maps,
        cluster_seed: derive_seed(a.seed, "eval-cluster"),
        ..EvalOptions::default()
    };
    let report = evaluate(&model, &index, &opts)?;
    create_dir(&a.out)?;
    write_text(&a.out.join(METRICS_JSON), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write_text(&a.out.join(METRICS_CSV), &report.to_csv())?;
    let config = serde_json::json!({
        "checkpoint": ckpt,
        "use_masks_as_maps": a.use_masks_as_maps,
        "sigma": opts.sigma,
        "fpr_limit": opts.fpr_limit,
        "thresholds": opts.thresholds,
    });
    m.finish(
        &a.out,
        config,
        a.seed,
        &["eval-cluster"],
        Some(&a.data.data),
        vec![METRICS_JSON.into(), METRICS_CSV.into()],
    )
}

fn heatmap_name(source_path: &str) -> String {
    let stem = source_path.strip_suffix(".png").unwrap_or(source_path);
    format!("{}.png", stem.replace('/', "__"))
}

fn score(a: ScoreArgs) -> Result<()> {
    let m = ManifestBuilder::start("score");
    let ckpt = checkpoint_file(&a.checkpoint);
    let (model, manifest) = load_checkpoint(&ckpt, &Device::Cpu)?;
    let index = scan_dataset(&a.data.data, manifest.backbone.resolution)?;
    let indices = match a.split {
        SplitArg::Train => index.train_indices(),
        SplitArg::Test => index.test_indices(),
    };
    let images: Vec<&Image> = indices.iter().map(|&i| &index.sample(i).image).collect();
    let maps = if images.is_empty() {
        Vec::new()
    } else {
        score_images(&model, &images, 16, DEFAULT_SIGMA)?
    };
    let (lo, hi) = maps
        .iter()
        .flat_map(|m| m.map.data().iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let heat_dir = a.out.join(HEATMAP_DIR);
    create_dir(&heat_dir)?;
    let mut scores = String::new();
    let mut artifacts = vec![SCORES_FILE.to_string()];
    for (&i, map) in indices.iter().zip(&maps) {
        let s = index.sample(i);
        scores.push_str(&format!("{}\t{}\n", s.source_path, map.image_score));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let pixels: Vec<u8> = map
            .map
            .data()
            .iter()
            .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let name = heatmap_name(&s.source_path);
        let path = heat_dir.join(&name);
        image::GrayImage::from_raw(map.map.width() as u32, map.map.height() as u32, pixels)
            .expect("buffer matches dimensions")
            .save(&path)
            .map_err(|e| Error::ImageWrite { path: path.clone(), source: e })?;
        artifacts.push(format!("{HEATMAP_DIR}/{name}"));
    }
    write_text(&a.out.join(SCORES_FILE), &scores)?;
    let bounds = serde_json::json!({
        "min": if lo.is_finite() { lo } else { 0.0 },
        "max": if hi.is_finite() { hi } else { 0.0 },
    });
    write_text(&heat_dir.join("normalization.json"), &(serde_json::to_string_pretty(&bounds)? + "\n"))?;
    artifacts.push(format!("{HEATMAP_DIR}/normalization.json"));
    let config = serde_json::json!({
        "checkpoint": ckpt,
        "split": match a.split { SplitArg::Train => "train", SplitArg::Test => "test" },
        "sigma": DEFAULT_SIGMA,
    });
    m.finish(&a.out, config, manifest.seed, &[], Some(&a.data.data), artifacts)
}
