//! Subcommand drivers behind the `diffpose` binary.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{create_dir, read_file, write_atomic, write_file, Error};
use crate::metrics::{self, EvalConfig, PredictionRecord};
use crate::pipeline::{self, InferMode, InferOptions, StepLog, TrainConfig, Trainer, TrainingSet};
use crate::priors::{self, SemanticPrior};
use crate::synthdata::{self, CocoFile, Dataset, GenerateOptions, RenderOptions, SkeletonSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EMBEDDING_FILE: &str = "embeddings.dpat";
pub const PROMPTS_FILE: &str = "prompts.txt";
pub const TRAIN_LOG_HEADER: &str = "step,epoch,loss,lr,wall_ms";

const FORMATS: &str = "\
File formats:
  tensor container   DPAT v1 (magic \"DPAT\", little-endian)
  embedding file     JSON header line + DPAT records F_g [d], F_l [N,d]
  checkpoint         diffpose-checkpoint v1 (JSON header line + DPAT params, m, v)
  prompt template    v1
  annotations        COCO-style JSON, images as plain PPM (P3)
  training log       CSV: step,epoch,loss,lr,wall_ms

Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error, 3 numeric failure";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("{source} (diagnostics written to {})", path.display())]
    Diverged {
        #[source]
        source: Error,
        path: PathBuf,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Diverged { .. } => EXIT_NUMERIC,
            CliError::Lib(e) => match e {
                Error::Io { .. } => EXIT_IO,
                Error::Numeric(_) => EXIT_NUMERIC,
                _ => EXIT_USAGE,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "diffpose", version, about = "Diffusion heatmap keypoint estimation on synthetic skeletons", after_help = FORMATS)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic keypoint split with COCO-style annotations.
    GenData(GenDataArgs),
    /// Build prompts and embeddings, or import an external embedding file.
    Embed(EmbedArgs),
    /// Train a denoiser.
    Train(TrainArgs),
    /// Predict keypoints for every image of a split.
    Infer(InferArgs),
    /// Score predictions against annotations.
    Eval(EvalArgs),
    /// Render a CSV column as an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Built-in skeleton name (`quadruped`) or a skeleton JSON file.
    #[arg(long, default_value = "quadruped")]
    pub spec: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Square canvas side in pixels.
    #[arg(long, default_value_t = synthdata::DEFAULT_CANVAS)]
    pub canvas: usize,
    #[arg(long, default_value_t = synthdata::DEFAULT_OCCLUSION_PROB)]
    pub occlusion_prob: f64,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub species: Option<String>,
    /// Annotation file whose category lists the keypoint names.
    #[arg(long)]
    pub keypoints_from: Option<PathBuf>,
    #[arg(long, default_value_t = priors::DEFAULT_EMBED_DIM)]
    pub d: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Validate and re-normalize an externally produced embedding file.
    #[arg(long, conflicts_with_all = ["species", "d", "seed"])]
    pub import: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Flat `key = value` file; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run with the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Predictions JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the checkpoint's configured mode.
    #[arg(long)]
    pub mode: Option<InferMode>,
    /// Defaults to the checkpoint's training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Annotation JSON with the ground truth.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Output directory for metrics.csv, metrics.json and pck_curve.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = metrics::DEFAULT_PCK_ALPHA)]
    pub alpha: f64,
    /// OKS falloff applied to every keypoint.
    #[arg(long, default_value_t = metrics::DEFAULT_KAPPA)]
    pub kappa: f64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Column for the horizontal axis; defaults to the first column.
    #[arg(long)]
    pub x: Option<String>,
    /// Column for the vertical axis; defaults to `loss` when present, else the second column.
    #[arg(long)]
    pub y: Option<String>,
    #[arg(long)]
    pub title: Option<String>,
}

/// Provenance record written next to a command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// SHA-256 over `blob <len>\0<bytes>` of every input file, in path order.
    pub input_hash: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> crate::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<crate::Result<_>>()?;
        entries.sort();
        for p in entries {
            collect_files(&p, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Content hash over files and directory trees, independent of their location.
pub fn hash_inputs(paths: &[&Path]) -> crate::Result<String> {
    let mut hasher = Sha256::new();
    for root in paths {
        let mut files = Vec::new();
        collect_files(root, &mut files)?;
        for f in files {
            let bytes = read_file(&f)?;
            let rel = f.strip_prefix(root).unwrap_or(&f);
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
            hasher.update(format!("blob {}\0", bytes.len()).as_bytes());
            hasher.update(&bytes);
        }
    }
    Ok(hasher.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

impl RunManifest {
    fn start(
        argv: &[String],
        subcommand: &str,
        config: serde_json::Value,
        seed: u64,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> crate::Result<Self> {
        Ok(RunManifest {
            command: argv.to_vec(),
            subcommand: subcommand.into(),
            config,
            seed,
            input_hash: hash_inputs(inputs)?,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix_ms: unix_ms(),
            finished_unix_ms: None,
        })
    }

    fn save(&self, path: &Path) -> crate::Result<()> {
        write_atomic(path, &synthdata::to_json_bytes(self)?)
    }

    fn finish(mut self, path: &Path) -> crate::Result<()> {
        self.finished_unix_ms = Some(unix_ms());
        self.save(path)
    }
}

fn require_input(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn to_value<T: Serialize>(v: &T) -> crate::Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::json("run manifest", e))
}

/// Sibling of `path` with its extension replaced by `suffix`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn ensure_parent(path: &Path) -> crate::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

/// Parse `argv` and run the selected subcommand, returning the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command, argv: &[String]) -> CliResult<()> {
    match command {
        Command::GenData(a) => gen_data(&a, argv),
        Command::Embed(a) => embed(&a, argv),
        Command::Train(a) => train(&a, argv),
        Command::Infer(a) => infer(&a, argv),
        Command::Eval(a) => eval(&a, argv),
        Command::Plot(a) => plot(&a, argv),
    }
}

fn resolve_skeleton(name: &str) -> CliResult<SkeletonSpec> {
    if name == "quadruped" {
        return Ok(synthdata::builtin_quadruped());
    }
    let path = Path::new(name);
    require_input(path, "skeleton file")?;
    let spec: SkeletonSpec = serde_json::from_slice(&read_file(path)?)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    spec.validate()?;
    Ok(spec)
}

pub fn gen_data(a: &GenDataArgs, argv: &[String]) -> CliResult<()> {
    let spec = resolve_skeleton(&a.spec)?;
    if !(0.0..=1.0).contains(&a.occlusion_prob) {
        return Err(CliError::Usage(format!(
            "--occlusion-prob {} must lie in [0, 1]",
            a.occlusion_prob
        )));
    }
    let opts = GenerateOptions {
        render: RenderOptions {
            canvas: (a.canvas, a.canvas),
            occlusion_prob: a.occlusion_prob,
        },
        ..GenerateOptions::default()
    };
    create_dir(&a.out)?;
    let spec_path = Path::new(&a.spec);
    let inputs: Vec<&Path> = if spec_path.exists() {
        vec![spec_path]
    } else {
        vec![]
    };
    let manifest_path = a.out.join(RUN_MANIFEST_FILE);
    let config = serde_json::json!({ "spec": spec.name, "n": a.n, "options": to_value(&opts)? });
    let manifest = RunManifest::start(argv, "gen-data", config, a.seed, &inputs, &[&a.out])?;
    manifest.save(&manifest_path)?;
    synthdata::generate_split(&spec, a.n, a.seed, &a.out, &opts)?;
    manifest.finish(&manifest_path)?;
    Ok(())
}

fn write_embedding_outputs(prior: &SemanticPrior, out: &Path) -> crate::Result<()> {
    priors::save_embeddings(prior, &out.join(EMBEDDING_FILE))
}

pub fn embed(a: &EmbedArgs, argv: &[String]) -> CliResult<()> {
    let coco = match &a.keypoints_from {
        Some(p) => {
            require_input(p, "annotation file")?;
            Some(CocoFile::load(p)?)
        }
        None => None,
    };
    let expected = coco
        .as_ref()
        .map(|c| c.category().map(|cat| cat.keypoints.clone()))
        .transpose()?;
    create_dir(&a.out)?;
    let manifest_path = a.out.join(RUN_MANIFEST_FILE);
    let emb_path = a.out.join(EMBEDDING_FILE);

    if let Some(import) = &a.import {
        require_input(import, "embedding file")?;
        let mut inputs = vec![import.as_path()];
        inputs.extend(a.keypoints_from.as_deref());
        let manifest = RunManifest::start(
            argv,
            "embed",
            serde_json::json!({ "import": true }),
            0,
            &inputs,
            &[&emb_path],
        )?;
        let prior = priors::load_embeddings(import)?;
        if let Some(names) = &expected {
            prior.check_keypoints(names.len())?;
        }
        manifest.save(&manifest_path)?;
        write_embedding_outputs(&prior, &a.out)?;
        manifest.finish(&manifest_path)?;
        return Ok(());
    }

    let names = expected.ok_or_else(|| {
        CliError::Usage("--keypoints-from is required unless --import is given".into())
    })?;
    let species = match (&a.species, &coco) {
        (Some(s), _) => s.clone(),
        (None, Some(c)) => c.category()?.name.clone(),
        (None, None) => return Err(CliError::Usage("--species is required".into())),
    };
    let bundle = priors::build_prompts(&species, &names)?;
    let prior = priors::pseudo_embed(&bundle, a.d, a.seed)?;
    let inputs: Vec<&Path> = a.keypoints_from.iter().map(PathBuf::as_path).collect();
    let config = serde_json::json!({
        "species": species,
        "d": a.d,
        "encoder": priors::PSEUDO_ENCODER_NAME,
        "prompt_template_version": priors::PROMPT_TEMPLATE_VERSION,
    });
    let manifest = RunManifest::start(argv, "embed", config, a.seed, &inputs, &[&emb_path])?;
    manifest.save(&manifest_path)?;
    write_file(&a.out.join(PROMPTS_FILE), bundle.to_text().as_bytes())?;
    write_embedding_outputs(&prior, &a.out)?;
    manifest.finish(&manifest_path)?;
    Ok(())
}

fn load_prior_for(path: &Path, ds: &Dataset) -> CliResult<SemanticPrior> {
    require_input(path, "embedding file")?;
    let prior = priors::load_embeddings(path)?;
    prior.check_keypoints(ds.category.keypoints.len())?;
    Ok(prior)
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    require_input(path, "data directory")?;
    let ds = Dataset::load(path)?;
    if ds.is_empty() {
        return Err(CliError::Usage(format!(
            "dataset {} has no annotated images",
            path.display()
        )));
    }
    Ok(ds)
}

/// Rows of an existing training log up to and including `step`.
fn log_prefix(path: &Path, step: u64) -> crate::Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = String::from_utf8_lossy(&read_file(path)?).into_owned();
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step)
        })
        .map(str::to_owned)
        .collect())
}

pub fn train(a: &TrainArgs, argv: &[String]) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_input(p, "config file")?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    let prior = load_prior_for(&a.embeddings, &ds)?;
    if let Some(r) = &a.resume {
        require_input(r, "checkpoint")?;
    }
    let canvas = ds.canvas().expect("non-empty dataset");
    let model = cfg.model_config(ds.category.keypoints.len(), prior.dim(), canvas)?;
    let data = TrainingSet::from_dataset(&ds, &model, &cfg)?;
    let mut trainer = match &a.resume {
        Some(r) => {
            let t = pipeline::load_checkpoint(r)?;
            t.check_compatible(&cfg, &model)?;
            t
        }
        None => Trainer::new(cfg.clone(), model)?,
    };

    create_dir(&a.out.join(CHECKPOINT_DIR))?;
    let manifest_path = a.out.join(RUN_MANIFEST_FILE);
    let log_path = a.out.join(TRAIN_LOG_FILE);
    let mut inputs = vec![a.data.as_path(), a.embeddings.as_path()];
    inputs.extend(a.config.as_deref());
    inputs.extend(a.resume.as_deref());
    let final_path = a.out.join(FINAL_CHECKPOINT);
    let manifest = RunManifest::start(
        argv,
        "train",
        to_value(&cfg)?,
        cfg.seed,
        &inputs,
        &[&log_path, &final_path],
    )?;
    manifest.save(&manifest_path)?;
    write_file(&a.out.join(RESOLVED_CONFIG_FILE), cfg.to_text().as_bytes())?;

    let mut log_text = format!("{TRAIN_LOG_HEADER}\n");
    for row in log_prefix(&log_path, trainer.step())? {
        log_text.push_str(&row);
        log_text.push('\n');
    }
    write_file(&log_path, log_text.as_bytes())?;
    let mut log = std::fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let start = Instant::now();
    while !trainer.finished() {
        let mut write_row = |s: &StepLog| -> crate::Result<()> {
            writeln!(
                log,
                "{},{},{},{},{}",
                s.step,
                s.epoch,
                s.loss,
                s.lr,
                start.elapsed().as_millis()
            )
            .map_err(|e| Error::io(&log_path, e))
        };
        match trainer.train_epoch(&data, &prior, &mut write_row) {
            Ok(_) => {}
            Err(e @ Error::Numeric(_)) => {
                let diag = a.out.join("diagnostic.txt");
                write_file(&diag, format!("{e}\n").as_bytes())?;
                return Err(CliError::Diverged {
                    source: e,
                    path: diag,
                });
            }
            Err(e) => return Err(e.into()),
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let ckpt = a
            .out
            .join(CHECKPOINT_DIR)
            .join(format!("epoch_{:03}.ckpt", trainer.epoch));
        pipeline::save_checkpoint(&ckpt, &trainer)?;
    }
    pipeline::save_checkpoint(&final_path, &trainer)?;
    manifest.finish(&manifest_path)?;
    Ok(())
}

pub fn infer(a: &InferArgs, argv: &[String]) -> CliResult<()> {
    let ds = load_dataset(&a.data)?;
    require_input(&a.checkpoint, "checkpoint")?;
    let trainer = pipeline::load_checkpoint(&a.checkpoint)?;
    let prior = load_prior_for(&a.embeddings, &ds)?;
    crate::model::check_prior(&prior, &trainer.model)?;
    let (h, w) = trainer.model.image_size();
    if ds.canvas() != Some((w, h)) {
        return Err(CliError::Usage(format!(
            "images are {:?} but the model expects {w}x{h}",
            ds.canvas().unwrap_or_default()
        )));
    }
    let opts = InferOptions {
        mode: a.mode.unwrap_or(trainer.cfg.infer_mode),
        ..InferOptions::from_config(&trainer.cfg)
    };
    let seed = a.seed.unwrap_or(trainer.cfg.seed);
    ensure_parent(&a.out)?;
    let manifest_path = sibling(&a.out, ".manifest.json");
    let config = serde_json::json!({
        "mode": opts.mode.to_string(),
        "loss_target": opts.target.to_string(),
        "vis_threshold": opts.vis_threshold,
    });
    let inputs = [
        a.data.as_path(),
        a.checkpoint.as_path(),
        a.embeddings.as_path(),
    ];
    let manifest = RunManifest::start(argv, "infer", config, seed, &inputs, &[&a.out])?;
    manifest.save(&manifest_path)?;
    let preds = pipeline::infer_dataset(
        &ds,
        &trainer.params,
        &trainer.model,
        &trainer.sched,
        &prior,
        &opts,
        seed,
    )?;
    write_atomic(&a.out, &synthdata::to_json_bytes(&preds)?)?;
    manifest.finish(&manifest_path)?;
    Ok(())
}

pub fn eval(a: &EvalArgs, argv: &[String]) -> CliResult<()> {
    require_input(&a.gt, "annotation file")?;
    require_input(&a.pred, "predictions file")?;
    let gt = CocoFile::load(&a.gt)?;
    let preds: Vec<PredictionRecord> = serde_json::from_slice(&read_file(&a.pred)?)
        .map_err(|e| Error::json(a.pred.display().to_string(), e))?;
    let n = gt.category()?.keypoints.len();
    let mut cfg = EvalConfig::new(n);
    cfg.pck_alpha = a.alpha;
    cfg.kappa = vec![a.kappa; n];
    cfg.validate()?;
    let images = metrics::assemble(&gt, &preds)?;
    create_dir(&a.out)?;
    let manifest_path = a.out.join(RUN_MANIFEST_FILE);
    let manifest = RunManifest::start(
        argv,
        "eval",
        to_value(&cfg)?,
        0,
        &[&a.gt, &a.pred],
        &[&a.out],
    )?;
    manifest.save(&manifest_path)?;
    let report = metrics::evaluate(&images, &cfg)?;
    write_file(&a.out.join("metrics.csv"), report.to_csv().as_bytes())?;
    write_file(
        &a.out.join("metrics.json"),
        format!("{}\n", report.to_json()?).as_bytes(),
    )?;
    let mut curve = String::from("alpha,pck\n");
    for (alpha, v) in metrics::pck_curve(&images, &cfg)? {
        let _ = writeln!(curve, "{alpha},{v}");
    }
    write_file(&a.out.join("pck_curve.csv"), curve.as_bytes())?;
    manifest.finish(&manifest_path)?;
    Ok(())
}

/// Parsed numeric CSV: header names and rows.
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn parse_csv(text: &str) -> crate::Result<Table> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let columns: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Validation("CSV has no header".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Validation(format!("CSV row {} is not numeric: {line}", i + 2)))?;
        if row.len() != columns.len() {
            return Err(Error::Validation(format!(
                "CSV row {} has {} fields, header has {}",
                i + 2,
                row.len(),
                columns.len()
            )));
        }
        rows.push(row);
    }
    Ok(Table { columns, rows })
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Line chart of `(x, y)` points with one marker per point.
pub fn render_svg(points: &[(f64, f64)], x_label: &str, y_label: &str, title: &str) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        w / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    for (v, anchor_y) in [(y0, py(y0)), (y1, py(y1))] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{anchor_y:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.4}</text>"#,
            m - 6.0
        );
    }
    for (v, anchor_x) in [(x0, px(x0)), (x1, px(x1))] {
        let _ = writeln!(
            s,
            r#"<text x="{anchor_x:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{v}</text>"#,
            h - m + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        w / 2.0,
        h - 12.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        h / 2.0,
        h / 2.0,
        xml_escape(y_label)
    );
    let coords: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##,
        coords.join(" ")
    );
    for &(x, y) in points {
        let _ = writeln!(
            s,
            r##"<circle class="point" cx="{:.2}" cy="{:.2}" r="2.5" fill="#1f77b4"/>"##,
            px(x),
            py(y)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn plot(a: &PlotArgs, _argv: &[String]) -> CliResult<()> {
    require_input(&a.csv, "CSV file")?;
    let table = parse_csv(&String::from_utf8_lossy(&read_file(&a.csv)?))?;
    let column = |name: &str| {
        table.columns.iter().position(|c| c == name).ok_or_else(|| {
            CliError::Usage(format!(
                "column '{name}' not in CSV header {:?}",
                table.columns
            ))
        })
    };
    let xi = match &a.x {
        Some(name) => column(name)?,
        None => 0,
    };
    let yi = match &a.y {
        Some(name) => column(name)?,
        None => table.columns.iter().position(|c| c == "loss").unwrap_or(1),
    };
    if yi >= table.columns.len() {
        return Err(CliError::Usage("CSV needs at least two columns".into()));
    }
    let points: Vec<(f64, f64)> = table.rows.iter().map(|r| (r[xi], r[yi])).collect();
    let title = a
        .title
        .clone()
        .unwrap_or_else(|| format!("{} vs {}", table.columns[yi], table.columns[xi]));
    ensure_parent(&a.out)?;
    write_atomic(
        &a.out,
        render_svg(&points, &table.columns[xi], &table.columns[yi], &title).as_bytes(),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), EXIT_USAGE);
        assert_eq!(
            CliError::Lib(Error::Config("x".into())).exit_code(),
            EXIT_USAGE
        );
        assert_eq!(
            CliError::Lib(Error::Numeric("x".into())).exit_code(),
            EXIT_NUMERIC
        );
        let io = Error::io("/nope", std::io::Error::other("boom"));
        assert_eq!(CliError::Lib(io).exit_code(), EXIT_IO);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(&argv("diffpose gen-data --n 3")), EXIT_USAGE);
        assert_eq!(run(&argv("diffpose frobnicate")), EXIT_USAGE);
        assert_eq!(run(&argv("diffpose --help")), EXIT_OK);
    }

    #[test]
    fn help_lists_format_versions() {
        let help = <Cli as clap::CommandFactory>::command()
            .render_long_help()
            .to_string();
        assert!(help.contains("DPAT v1") && help.contains("diffpose-checkpoint v1"));
    }

    #[test]
    fn input_hash_depends_on_content_only() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [&a, &b] {
            std::fs::write(d.path().join("x.txt"), "hello").unwrap();
        }
        let ha = hash_inputs(&[a.path()]).unwrap();
        assert_eq!(ha, hash_inputs(&[b.path()]).unwrap());
        assert_eq!(ha.len(), 64);
        std::fs::write(b.path().join("x.txt"), "hellO").unwrap();
        assert_ne!(ha, hash_inputs(&[b.path()]).unwrap());
    }

    #[test]
    fn csv_parsing_and_svg_points() {
        let t = parse_csv("step,loss\n1,0.5\n2,0.25\n").unwrap();
        assert_eq!(t.columns, ["step", "loss"]);
        assert_eq!(t.rows, vec![vec![1.0, 0.5], vec![2.0, 0.25]]);
        assert!(parse_csv("a,b\n1\n").is_err());
        assert!(parse_csv("a\nx\n").is_err());
        let svg = render_svg(&[(1.0, 0.5), (2.0, 0.25)], "step", "loss", "a < b");
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("a &lt; b"));
    }

    #[test]
    fn log_prefix_keeps_rows_up_to_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        std::fs::write(
            &p,
            "step,epoch,loss,lr,wall_ms\n1,0,0.5,0.1,3\n2,0,0.4,0.1,5\n3,1,0.3,0.1,9\n",
        )
        .unwrap();
        assert_eq!(
            log_prefix(&p, 2).unwrap(),
            ["1,0,0.5,0.1,3", "2,0,0.4,0.1,5"]
        );
        assert!(log_prefix(&dir.path().join("none.csv"), 2)
            .unwrap()
            .is_empty());
    }
}
