//! Command-line front end: `generate`, `train`, `evaluate`, `postprocess`
//! and `compare`.
//!
//! Every flag can also be set through a `COTRAIN_`-prefixed environment
//! variable; `--config` loads a TOML or JSON file that flags override.
//! Each command writes a `run_manifest.json` next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DatasetDir;
use crate::error::{Error, Result};
use crate::metrics::{build_report, compare_reports, render_comparison, render_table, DistanceUnits, MetricsReport};
use crate::nets::{load_checkpoint, BranchAssignment, DualBranchOutput, Variant};
use crate::phantom::{generate_dataset, PhantomSpec};
use crate::postprocess::postprocess_pipeline;
use crate::trainer::{predict_cases, run_cross_validation, run_training, TrainConfig};
use crate::volume::io::save_labels;
use crate::volume::{LabelMap, Shape3, Volume, ZoneLabel};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "cotrain", version, about = "Dual-branch co-training segmentation of prostate zones")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "COTRAIN_LOG", default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom dataset and its split.
    Generate(GenerateArgs),
    /// Stage I then Stage II training, optionally cross-validated.
    Train(TrainArgs),
    /// Predict, post-process and score a checkpoint on a set of cases.
    Evaluate(EvaluateArgs),
    /// Turn a saved dual-branch output into a clean label map.
    Postprocess(PostprocessArgs),
    /// One-sided paired t-tests between two metric reports.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, env = "COTRAIN_CASES", default_value_t = 10)]
    pub cases: usize,
    #[arg(long, env = "COTRAIN_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "COTRAIN_OUT")]
    pub out: PathBuf,
    /// Volume shape as D,H,W.
    #[arg(long, env = "COTRAIN_SHAPE", value_parser = parse_shape)]
    pub shape: Option<Shape3>,
    #[arg(long, env = "COTRAIN_NOISE_LEVEL")]
    pub noise_level: Option<f64>,
    #[arg(long, env = "COTRAIN_BOUNDARY_BLUR")]
    pub boundary_blur: Option<f64>,
    /// Phantom spec file (TOML or JSON).
    #[arg(long, env = "COTRAIN_CONFIG")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "COTRAIN_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "COTRAIN_OUT")]
    pub out: PathBuf,
    /// Training config file (TOML or JSON).
    #[arg(long, env = "COTRAIN_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "COTRAIN_VARIANT", value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Cross-validation folds; 1 trains once on the stored split.
    #[arg(long, env = "COTRAIN_FOLDS")]
    pub folds: Option<usize>,
    /// Run folds on separate threads.
    #[arg(long, env = "COTRAIN_PARALLEL")]
    pub parallel: bool,
    #[arg(long, env = "COTRAIN_STAGE1_ONLY")]
    pub stage1_only: bool,
    /// Ablation: Stage II without the consistency loss.
    #[arg(long, env = "COTRAIN_DISABLE_UNSUP")]
    pub disable_unsup: bool,
    /// Record deterministic mode in the manifest (training is always
    /// reproducible for a fixed seed).
    #[arg(long, env = "COTRAIN_DETERMINISTIC")]
    pub deterministic: bool,
    #[arg(long, env = "COTRAIN_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "COTRAIN_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "COTRAIN_PATIENCE")]
    pub patience: Option<usize>,
    #[arg(long, env = "COTRAIN_MAX_EPOCHS")]
    pub max_epochs: Option<usize>,
    #[arg(long, env = "COTRAIN_STAGE1_MIN_EPOCHS")]
    pub stage1_min_epochs: Option<usize>,
    #[arg(long, env = "COTRAIN_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "COTRAIN_BASE_FILTERS")]
    pub base_filters: Option<usize>,
    #[arg(long, env = "COTRAIN_DEPTH")]
    pub depth: Option<usize>,
    /// Zone-to-branch assignment, e.g. `BG:I,PZ:I,TZ:II,DPU:I,AFS:II`.
    #[arg(long, env = "COTRAIN_ASSIGNMENT")]
    pub assignment: Option<String>,
    /// Report MAD in voxels instead of millimetres.
    #[arg(long, env = "COTRAIN_MAD_VOXELS")]
    pub mad_voxels: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, env = "COTRAIN_DATA")]
    pub data: PathBuf,
    /// Model checkpoint; not needed with `--ground-truth-bypass`.
    #[arg(long, env = "COTRAIN_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "COTRAIN_OUT")]
    pub out: PathBuf,
    /// Which split list to evaluate: test, validation, train or all.
    #[arg(long, env = "COTRAIN_SUBSET", default_value = "test")]
    pub subset: String,
    /// Training config the checkpoint must match (TOML or JSON).
    #[arg(long, env = "COTRAIN_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "COTRAIN_VARIANT", value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long, env = "COTRAIN_ASSIGNMENT")]
    pub assignment: Option<String>,
    /// Score the ground truth against itself instead of a model.
    #[arg(long, env = "COTRAIN_GROUND_TRUTH_BYPASS")]
    pub ground_truth_bypass: bool,
    /// Write axial contour overlays (ground truth left, prediction right).
    #[arg(long, env = "COTRAIN_EXPORT_SLICES")]
    pub export_slices: bool,
    #[arg(long, env = "COTRAIN_MAD_VOXELS")]
    pub mad_voxels: bool,
}

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    /// Saved dual-branch output (`.json` header or `.raw` payload).
    #[arg(long, env = "COTRAIN_INPUT")]
    pub input: PathBuf,
    /// Label map to write (`.raw`, `.nii` or `.nii.gz`).
    #[arg(long, env = "COTRAIN_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, env = "COTRAIN_ALPHA", default_value_t = 0.05)]
    pub alpha: f64,
    /// Directory for comparison.json / comparison.txt.
    #[arg(long, env = "COTRAIN_OUT")]
    pub out: Option<PathBuf>,
}

fn parse_shape(s: &str) -> std::result::Result<Shape3, String> {
    let dims: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad extent {p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match dims[..] {
        [d, h, w] => Ok(Shape3::new(d, h, w)),
        _ => Err(format!("expected D,H,W, got {s:?}")),
    }
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

/// Reads a TOML or JSON file by extension.
pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
        Some("json") => Ok(serde_json::from_str(&text)?),
        _ => Err(Error::Config(format!("{}: config must be .toml or .json", path.display()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// sha256 over `blob <len>\0<content>` per input file, keyed by path.
    pub input_hashes: BTreeMap<String, String>,
    pub tool_version: String,
    pub deterministic: bool,
    pub started_unix: u64,
    pub finished_unix: u64,
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set.
fn now_unix() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

/// Hashes of the given files; directories are walked recursively.
pub fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            collect_files(p, &mut files)?;
        } else {
            files.push(p.to_path_buf());
        }
    }
    files
        .into_iter()
        .map(|f| {
            let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
            Ok((f.display().to_string(), content_hash(&bytes)))
        })
        .collect()
}

struct ManifestBuilder {
    manifest: RunManifest,
}

impl ManifestBuilder {
    fn new(command: &str, config: &impl Serialize, deterministic: bool) -> Result<Self> {
        Ok(Self {
            manifest: RunManifest {
                command: command.to_string(),
                arguments: std::env::args().skip(1).collect(),
                config: serde_json::to_value(config)?,
                seeds: BTreeMap::new(),
                input_hashes: BTreeMap::new(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                deterministic,
                started_unix: now_unix(),
                finished_unix: 0,
            },
        })
    }

    fn seed(mut self, name: &str, value: u64) -> Self {
        self.manifest.seeds.insert(name.to_string(), value);
        self
    }

    fn inputs(mut self, paths: &[&Path]) -> Result<Self> {
        self.manifest.input_hashes = hash_inputs(paths)?;
        Ok(self)
    }

    fn write(mut self, path: &Path) -> Result<RunManifest> {
        self.manifest.finished_unix = now_unix();
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(self.manifest)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut spec: PhantomSpec = match &a.config {
        Some(p) => read_config(p)?,
        None => PhantomSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(s) = a.shape {
        spec.shape = s;
    }
    if let Some(v) = a.noise_level {
        spec.noise_level = v;
    }
    if let Some(v) = a.boundary_blur {
        spec.boundary_blur = v;
    }
    let manifest = ManifestBuilder::new("generate", &spec, true)?.seed("phantom", spec.seed);
    let split = generate_dataset(a.cases, &spec, &a.out)?;
    log::info!(
        "wrote {} cases to {} (train {}, validation {}, test {})",
        a.cases,
        a.out.display(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    manifest.write(&a.out.join(MANIFEST_FILE))?;
    Ok(())
}

/// Config file, then flags.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(v) = a.folds {
        cfg.fold_count = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    if let Some(v) = a.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.stage1_min_epochs {
        cfg.stage1_min_epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.base_filters {
        cfg.model.base_filters = v;
    }
    if let Some(v) = a.depth {
        cfg.model.depth = v;
    }
    if let Some(tag) = &a.assignment {
        cfg.assignment = BranchAssignment::from_tag(tag)?;
    }
    cfg.stage1_only |= a.stage1_only;
    cfg.disable_unsup |= a.disable_unsup;
    if a.mad_voxels {
        cfg.distance_units = DistanceUnits::Voxels;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(a)?;
    let data = DatasetDir::new(&a.data);
    let split = data.load_split()?;
    create_dir(&a.out)?;
    write_text(&a.out.join("config.json"), &(serde_json::to_string_pretty(&cfg)? + "\n"))?;
    let manifest = ManifestBuilder::new("train", &cfg, a.deterministic)?
        .seed("training", cfg.seed)
        .seed("parameters", cfg.model.parameter_seed)
        .inputs(&[&a.data])?;
    if cfg.fold_count >= 2 {
        let cv = run_cross_validation(&data, &split, &cfg, &a.out, a.parallel)?;
        for f in &cv.folds {
            log::info!(
                "fold {}: mean foreground DSC {:.4}",
                f.fold.index,
                f.outcome.report.mean_foreground_dsc()
            );
        }
    } else {
        let train = data.load_cases(&split.train)?;
        let val = data.load_cases(&split.validation)?;
        let test = data.load_cases(&split.test)?;
        let run = run_training(&train, &val, &test, &cfg, &a.out)?;
        log::info!("test mean foreground DSC {:.4}", run.report.mean_foreground_dsc());
    }
    manifest.write(&a.out.join(MANIFEST_FILE))?;
    Ok(())
}

fn subset_ids(data: &DatasetDir, subset: &str) -> Result<Vec<String>> {
    let split = data.load_split()?;
    match subset {
        "test" => Ok(split.test),
        "validation" | "val" => Ok(split.validation),
        "train" => Ok(split.train),
        "all" => Ok(split.all().cloned().collect()),
        other => Err(Error::Config(format!(
            "unknown subset {other:?} (expected test, validation, train or all)"
        ))),
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let data = DatasetDir::new(&a.data);
    let ids = subset_ids(&data, &a.subset)?;
    let cases = data.load_cases(&ids)?;
    let units = if a.mad_voxels { DistanceUnits::Voxels } else { DistanceUnits::Millimetres };
    let file_cfg: Option<TrainConfig> = a.config.as_deref().map(read_config).transpose()?;
    let assignment = match (&a.assignment, &file_cfg) {
        (Some(tag), _) => BranchAssignment::from_tag(tag)?,
        (None, Some(c)) => c.assignment,
        (None, None) => BranchAssignment::default(),
    };
    create_dir(&a.out)?;
    let mut inputs: Vec<&Path> = vec![&a.data];
    let (preds, label, config) = if a.ground_truth_bypass {
        let preds: BTreeMap<String, LabelMap> = cases.iter().map(|c| (c.id.clone(), c.labels.clone())).collect();
        (preds, "ground truth".to_string(), serde_json::json!({"ground_truth_bypass": true}))
    } else {
        let ckpt = a
            .checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("--checkpoint is required unless --ground-truth-bypass is set".into()))?;
        inputs.push(ckpt);
        let expect = file_cfg.as_ref().map(|c| (&c.model, a.variant.unwrap_or(c.variant)));
        let model = load_checkpoint(ckpt, expect)?;
        if let Some(v) = a.variant {
            if v != model.variant {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint holds variant {} but {v} was requested",
                    model.variant
                )));
            }
        }
        let preds = predict_cases(&model, &cases, &assignment)?;
        let config = serde_json::json!({
            "checkpoint": ckpt.display().to_string(),
            "variant": model.variant,
            "model": model.config,
            "assignment": assignment.tag(),
        });
        (preds, model.variant.tag().to_string(), config)
    };
    let gts: BTreeMap<String, LabelMap> = cases.iter().map(|c| (c.id.clone(), c.labels.clone())).collect();
    let report = build_report(&ids, &preds, &gts, units)?;
    report.save(&a.out.join("report.json"))?;
    write_text(&a.out.join("report.txt"), &render_table(&[(label, &report)]))?;
    if a.export_slices {
        for c in &cases {
            export_slices(&c.image, &c.labels, &preds[&c.id], &a.out.join("slices").join(&c.id))?;
        }
    }
    log::info!("mean foreground DSC {:.4} over {} cases", report.mean_foreground_dsc(), ids.len());
    ManifestBuilder::new("evaluate", &config, true)?
        .inputs(&inputs)?
        .write(&a.out.join(MANIFEST_FILE))?;
    Ok(())
}

pub const ZONE_COLOURS: [[u8; 3]; ZoneLabel::COUNT] =
    [[0, 0, 0], [230, 60, 60], [60, 200, 80], [240, 200, 40], [70, 140, 240]];
const SLICE_SCALE: u32 = 4;

/// One PNG per axial slice: image with ground-truth contours on the left and
/// predicted contours on the right, upscaled for legibility.
pub fn export_slices(image: &Volume, gt: &LabelMap, pred: &LabelMap, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let s = image.shape();
    let (h, w) = (s.height as u32, s.width as u32);
    let k = SLICE_SCALE;
    let (lo, hi) = image
        .data
        .as_slice()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    for z in 0..s.depth {
        let mut img = image::RgbImage::new(2 * w * k, h * k);
        for (panel, labels) in [gt, pred].into_iter().enumerate() {
            for y in 0..s.height {
                for x in 0..s.width {
                    let l = *labels.labels.get(z, y, x);
                    let edge = l != ZoneLabel::Background
                        && [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dy, dx)| {
                            let (ny, nx) = (y as isize + dy, x as isize + dx);
                            ny < 0
                                || nx < 0
                                || ny >= s.height as isize
                                || nx >= s.width as isize
                                || *labels.labels.get(z, ny as usize, nx as usize) != l
                        });
                    let px = if edge {
                        ZONE_COLOURS[l.index()]
                    } else {
                        let g = (((image.data.get(z, y, x) - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8;
                        [g, g, g]
                    };
                    let (x0, y0) = (panel as u32 * w * k + x as u32 * k, y as u32 * k);
                    for dy in 0..k {
                        for dx in 0..k {
                            img.put_pixel(x0 + dx, y0 + dy, image::Rgb(px));
                        }
                    }
                }
            }
        }
        let path = dir.join(format!("slice_{z:03}.png"));
        img.save(&path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn cmd_postprocess(a: &PostprocessArgs) -> Result<()> {
    let (out, assignment) = DualBranchOutput::load(&a.input)?;
    let labels = postprocess_pipeline(&out, &assignment)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_labels(&labels, &a.out)?;
    let config = serde_json::json!({"assignment": assignment.tag(), "output": a.out.display().to_string()});
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let input_json = a.input.with_extension("json");
    let input_raw = a.input.with_extension("raw");
    ManifestBuilder::new("postprocess", &config, true)?
        .inputs(&[&input_json, &input_raw])?
        .write(&dir.join(MANIFEST_FILE))?;
    Ok(())
}

pub fn cmd_compare(a: &CompareArgs) -> Result<()> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", a.alpha)));
    }
    let ra = MetricsReport::load(&a.a)?;
    let rb = MetricsReport::load(&a.b)?;
    let cmp = compare_reports(&ra, &rb, a.alpha)?;
    let text = render_comparison(&cmp, a.alpha);
    print!("{text}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_text(&dir.join("comparison.json"), &(serde_json::to_string_pretty(&cmp)? + "\n"))?;
        write_text(&dir.join("comparison.txt"), &text)?;
        let config = serde_json::json!({"a": a.a.display().to_string(), "b": a.b.display().to_string(), "alpha": a.alpha});
        ManifestBuilder::new("compare", &config, true)?
            .inputs(&[&a.a, &a.b])?
            .write(&dir.join(MANIFEST_FILE))?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Postprocess(a) => cmd_postprocess(a),
        Command::Compare(a) => cmd_compare(a),
    }
}
