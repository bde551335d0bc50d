//! Training and inference drivers: configuration, AdamW, the per-batch
//! denoising step, checkpoints, and the two reverse samplers.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{self, DiffusionSchedule, ScheduleKind};
use crate::error::{read_file, write_atomic, Error, Result};
use crate::heatmap::{self, HeatmapStack, KeypointSet};
use crate::metrics::PredictionRecord;
use crate::model::{self, DenoiserParams, ModelConfig, ParamVars, FEATURE_STRIDE, PARAM_NAMES};
use crate::numerics::io::{write_record, RecordReader};
use crate::numerics::{Tape, Tensor};
use crate::priors::SemanticPrior;
use crate::rng::{Rng, RngState};
use crate::synthdata::Dataset;

pub const CHECKPOINT_FORMAT: &str = "diffpose-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// What the denoiser output is trained to match.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTarget {
    /// The clean heatmaps `y_0`.
    X0,
    /// The injected noise `ε`.
    Eps,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferMode {
    /// Feed each prediction back unchanged as the next step's input.
    Literal,
    /// Deterministic DDIM update treating each prediction as `ŷ_0`.
    Ddim,
}

macro_rules! keyword_enum {
    ($ty:ident { $($word:literal => $variant:ident),+ }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}' (expected one of:", $(" ", $word,)+ ")"),
                        other
                    ))),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $($ty::$variant => $word,)+ })
            }
        }
    };
}

keyword_enum!(LossTarget { "x0" => X0, "eps" => Eps });
keyword_enum!(InferMode { "literal" => Literal, "ddim" => Ddim });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Zero-based epochs from which the rate is multiplied by `lr_decay_factor` once more.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub loss_target: LossTarget,
    /// Restrict the loss to channels of labeled keypoints.
    pub mask_visibility: bool,
    pub sigma: f64,
    pub channels: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub infer_mode: InferMode,
    pub vis_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 5e-4,
            weight_decay: 1e-4,
            lr_decay_epochs: vec![24, 29],
            lr_decay_factor: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: diffusion::DEFAULT_STEPS,
            beta_start: diffusion::DEFAULT_BETA_START,
            beta_end: diffusion::DEFAULT_BETA_END,
            loss_target: LossTarget::X0,
            mask_visibility: true,
            sigma: heatmap::DEFAULT_SIGMA,
            channels: 32,
            heads: 4,
            time_dim: 16,
            infer_mode: InferMode::Literal,
            vis_threshold: heatmap::DEFAULT_VIS_THRESHOLD,
            seed: 0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("config key '{key}': cannot parse '{raw}'")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_decay_epochs must be strictly increasing".into());
        }
        if self
            .lr_decay_epochs
            .last()
            .is_some_and(|&e| e >= self.epochs)
        {
            return bad(format!(
                "lr_decay_epochs must all be below epochs = {}",
                self.epochs
            ));
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return bad("adam betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.vis_threshold) {
            return bad("vis_threshold must lie in [0, 1]".into());
        }
        DiffusionSchedule::new(
            self.steps,
            self.beta_start,
            self.beta_end,
            ScheduleKind::Linear,
        )
        .map(|_| ())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(
            self.steps,
            self.beta_start,
            self.beta_end,
            ScheduleKind::Linear,
        )
    }

    /// Learning rate in effect during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    pub fn model_config(
        &self,
        num_keypoints: usize,
        embed_dim: usize,
        canvas: (usize, usize),
    ) -> Result<ModelConfig> {
        let (w, h) = canvas;
        if w % (2 * FEATURE_STRIDE) != 0 || h % (2 * FEATURE_STRIDE) != 0 {
            return Err(Error::Config(format!(
                "canvas {w}x{h} must be a multiple of {} in both axes",
                2 * FEATURE_STRIDE
            )));
        }
        let cfg = ModelConfig {
            channels: self.channels,
            embed_dim,
            heads: self.heads,
            heatmap: (h / FEATURE_STRIDE, w / FEATURE_STRIDE),
            num_keypoints,
            steps: self.steps,
            time_dim: self.time_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, raw)?,
            "batch_size" => self.batch_size = parse_value(key, raw)?,
            "lr" => self.lr = parse_value(key, raw)?,
            "weight_decay" => self.weight_decay = parse_value(key, raw)?,
            "lr_decay_epochs" => {
                self.lr_decay_epochs = raw
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_value(key, s))
                    .collect::<Result<_>>()?
            }
            "lr_decay_factor" => self.lr_decay_factor = parse_value(key, raw)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, raw)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, raw)?,
            "adam_eps" => self.adam_eps = parse_value(key, raw)?,
            "steps" => self.steps = parse_value(key, raw)?,
            "beta_start" => self.beta_start = parse_value(key, raw)?,
            "beta_end" => self.beta_end = parse_value(key, raw)?,
            "loss_target" => self.loss_target = raw.parse()?,
            "mask_visibility" => self.mask_visibility = parse_value(key, raw)?,
            "sigma" => self.sigma = parse_value(key, raw)?,
            "channels" => self.channels = parse_value(key, raw)?,
            "heads" => self.heads = parse_value(key, raw)?,
            "time_dim" => self.time_dim = parse_value(key, raw)?,
            "infer_mode" => self.infer_mode = raw.parse()?,
            "vis_threshold" => self.vis_threshold = parse_value(key, raw)?,
            "seed" => self.seed = parse_value(key, raw)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse flat `key = value` text over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its resolved value, parseable by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let decays: Vec<String> = self.lr_decay_epochs.iter().map(|e| e.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "lr_decay_epochs = {}", decays.join(","));
        let _ = writeln!(s, "lr_decay_factor = {}", self.lr_decay_factor);
        let _ = writeln!(s, "adam_beta1 = {}", self.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", self.adam_beta2);
        let _ = writeln!(s, "adam_eps = {}", self.adam_eps);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "beta_start = {}", self.beta_start);
        let _ = writeln!(s, "beta_end = {}", self.beta_end);
        let _ = writeln!(s, "loss_target = {}", self.loss_target);
        let _ = writeln!(s, "mask_visibility = {}", self.mask_visibility);
        let _ = writeln!(s, "sigma = {}", self.sigma);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "time_dim = {}", self.time_dim);
        let _ = writeln!(s, "infer_mode = {}", self.infer_mode);
        let _ = writeln!(s, "vis_threshold = {}", self.vis_threshold);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

/// AdamW moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &DenoiserParams) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        };
        OptimizerState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Decoupled weight decay, then a bias-corrected adaptive-moment step.
    pub fn update(&mut self, params: &mut DenoiserParams, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let k = self.step as i32;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let (c1, c2) = (1.0 - b1.powi(k), 1.0 - b2.powi(k));
        for ((p, m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let grad = p.grad.clone();
            let data = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                data[i] -= lr * cfg.weight_decay * data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let (mh, vh) = (m[i] / c1, v[i] / c2);
                data[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Images with their clean target heatmaps and loss masks.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub images: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    /// Per keypoint: included in the loss.
    pub masks: Vec<Vec<bool>>,
}

impl TrainingSet {
    pub fn from_dataset(ds: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        let mut set = TrainingSet {
            images: Vec::with_capacity(ds.len()),
            targets: Vec::with_capacity(ds.len()),
            masks: Vec::with_capacity(ds.len()),
        };
        for (img, kps) in ds.images.iter().zip(&ds.instances) {
            set.push(img.clone(), kps, model, cfg)?;
        }
        Ok(set)
    }

    pub fn push(
        &mut self,
        image: Tensor,
        kps: &KeypointSet,
        model: &ModelConfig,
        cfg: &TrainConfig,
    ) -> Result<()> {
        let (h, w) = model.image_size();
        if image.shape() != [3, h, w] {
            return Err(Error::shape("training image", image.shape(), &[3, h, w]));
        }
        if kps.len() != model.num_keypoints {
            return Err(Error::Validation(format!(
                "instance has {} keypoints, model expects {}",
                kps.len(),
                model.num_keypoints
            )));
        }
        let enc = heatmap::encode(kps, model.heatmap, FEATURE_STRIDE as f64, cfg.sigma)?;
        self.images.push(image);
        self.targets.push(enc.heatmaps.values);
        self.masks.push(
            kps.visibility
                .iter()
                .map(|&v| !cfg.mask_visibility || v != heatmap::VIS_UNLABELED)
                .collect(),
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ModelConfig,
    pub params: DenoiserParams,
    pub opt: OptimizerState,
    pub sched: DiffusionSchedule,
    pub rng: Rng,
    /// Next zero-based epoch to run.
    pub epoch: usize,
}

/// Per-element loss weights: `1 / (labeled elements · batch)` on included channels.
fn loss_weights(mask: &[bool], plane: usize, batch: usize) -> Vec<f64> {
    let included = mask.iter().filter(|&&m| m).count();
    let w = if included == 0 {
        0.0
    } else {
        1.0 / (included * plane * batch) as f64
    };
    mask.iter()
        .flat_map(|&m| std::iter::repeat_n(if m { w } else { 0.0 }, plane))
        .collect()
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        if model.steps != cfg.steps {
            return Err(Error::Config(format!(
                "model T = {} but training T = {}",
                model.steps, cfg.steps
            )));
        }
        let params = DenoiserParams::init(&model, cfg.seed)?;
        Ok(Trainer {
            opt: OptimizerState::new(&params),
            sched: cfg.schedule()?,
            rng: Rng::derive(cfg.seed, 1),
            params,
            model,
            cfg,
            epoch: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// One optimizer step on the samples `batch` of `data`.
    pub fn train_step(
        &mut self,
        data: &TrainingSet,
        batch: &[usize],
        prior: &SemanticPrior,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        model::check_prior(prior, &self.model)?;
        let lr = self.cfg.lr_at(self.epoch);
        let mut timesteps = Vec::with_capacity(batch.len());
        let loss = match self.forward_backward(data, batch, prior, &mut timesteps) {
            Ok(loss) if loss.is_finite() => loss,
            Ok(loss) => return Err(self.divergence(&format!("non-finite loss {loss}"), &timesteps)),
            Err(Error::Numeric(msg)) => {
                return Err(self.divergence(&format!("non-finite loss ({msg})"), &timesteps))
            }
            Err(e) => return Err(e),
        };
        self.opt.update(&mut self.params, lr, &self.cfg);
        Ok(loss)
    }

    /// Loss of one batch; leaves its gradients on the parameters.
    fn forward_backward(
        &mut self,
        data: &TrainingSet,
        batch: &[usize],
        prior: &SemanticPrior,
        timesteps: &mut Vec<usize>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, &self.params, true);
        let global = tape.constant(prior.global.clone());
        let local = tape.constant(prior.local.clone());
        let plane = self.model.cells();
        let mut total = None;
        for &i in batch {
            let y0 = data
                .targets
                .get(i)
                .ok_or_else(|| Error::Validation(format!("sample index {i} out of range")))?;
            let t = 1 + self.rng.below(self.cfg.steps);
            timesteps.push(t);
            let eps = Tensor::new(y0.shape(), self.rng.normal_vec(y0.numel()))?;
            let y_t = diffusion::forward_sample(
                &HeatmapStack::new(y0.clone(), FEATURE_STRIDE as f64)?,
                t,
                &eps,
                &self.sched,
            )?;
            let image = tape.constant(data.images[i].clone());
            let features = model::encode_image(&mut tape, image, &pv, &self.model)?;
            let fused = model::fuse_condition(&mut tape, features, global)?;
            let ctx = model::Context {
                features,
                fused,
                local,
            };
            let y_var = tape.constant(y_t.values);
            let out = model::denoise(&mut tape, &ctx, y_var, t, &pv, &self.model)?;
            let target = match self.cfg.loss_target {
                LossTarget::X0 => y0,
                LossTarget::Eps => &eps,
            };
            let weights = loss_weights(&data.masks[i], plane, batch.len());
            let l = tape.weighted_squared_error(out, target, &weights)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let total = total.expect("non-empty batch");
        let loss = tape.value(total).item()?;
        tape.backward(total)?;
        self.params.zero_grad();
        self.params.accumulate_grads(&tape, &pv);
        Ok(loss)
    }

    fn divergence(&self, what: &str, timesteps: &[usize]) -> Error {
        let max_grad = self
            .params
            .tensors()
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .fold(0.0f64, |m, g| m.max(g.abs()));
        Error::Numeric(format!(
            "{what} at step {} (epoch {}); timesteps {timesteps:?}; max |grad| {max_grad}",
            self.opt.step + 1,
            self.epoch
        ))
    }

    /// Run the next epoch: reshuffle, then step through consecutive batches.
    pub fn train_epoch(
        &mut self,
        data: &TrainingSet,
        prior: &SemanticPrior,
        mut on_step: impl FnMut(&StepLog) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        if data.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.rng.shuffle(&mut order);
        let mut logs = Vec::with_capacity(order.len().div_ceil(self.cfg.batch_size));
        for batch in order.chunks(self.cfg.batch_size) {
            let lr = self.cfg.lr_at(self.epoch);
            let loss = self.train_step(data, batch, prior)?;
            let log = StepLog {
                step: self.opt.step,
                epoch: self.epoch,
                loss,
                lr,
            };
            on_step(&log)?;
            logs.push(log);
        }
        self.epoch += 1;
        Ok(logs)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    step: u64,
    rng: RngState,
    params: Vec<String>,
}

pub fn checkpoint_bytes(tr: &Trainer) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: tr.model.clone(),
        train: tr.cfg.clone(),
        epoch: tr.epoch,
        step: tr.opt.step,
        rng: tr.rng.state(),
        params: PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
    out.push(b'\n');
    for t in tr.params.tensors() {
        write_record(&mut out, t);
    }
    for t in tr.opt.m.iter().chain(&tr.opt.v) {
        write_record(&mut out, t);
    }
    Ok(out)
}

/// JSON header line, then parameters, first moments and second moments as
/// DPAT records, each group in [`PARAM_NAMES`] order.
pub fn save_checkpoint(path: &Path, tr: &Trainer) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(tr)?)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(bytes.len(), "missing checkpoint header line"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(0, format!("bad checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(Error::Validation(format!(
            "checkpoint is {} v{}, expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}",
            header.format, header.version
        )));
    }
    if header.params != PARAM_NAMES {
        return Err(Error::Validation(format!(
            "checkpoint parameter list {:?} differs",
            header.params
        )));
    }
    let mut reader = RecordReader::new(bytes, nl + 1);
    let mut read_group =
        || -> Result<Vec<Tensor>> { (0..PARAM_NAMES.len()).map(|_| reader.read()).collect() };
    let params = DenoiserParams::from_tensors(read_group()?, &header.model)?;
    let m = read_group()?;
    let v = read_group()?;
    for (group, name) in [(&m, "first"), (&v, "second")] {
        for (t, p) in group.iter().zip(params.tensors()) {
            if t.shape() != p.shape() {
                return Err(Error::Validation(format!(
                    "{name}-moment shape {:?} differs from {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
        }
    }
    if !reader.at_end() {
        return Err(Error::format(
            reader.position(),
            "trailing bytes after optimizer state",
        ));
    }
    let rng = Rng::from_state(&header.rng)
        .ok_or_else(|| Error::Validation(format!("unusable RNG state {:?}", header.rng)))?;
    header.train.validate()?;
    Ok(Trainer {
        sched: header.train.schedule()?,
        cfg: header.train,
        model: header.model,
        params,
        opt: OptimizerState {
            step: header.step,
            m,
            v,
        },
        rng,
        epoch: header.epoch,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    checkpoint_from_bytes(&read_file(path)?)
}

impl Trainer {
    /// Refuse a restored state whose configuration differs from `expected`.
    pub fn check_compatible(&self, cfg: &TrainConfig, model: &ModelConfig) -> Result<()> {
        if &self.model != model {
            return Err(Error::Validation(format!(
                "checkpoint model config {:?} does not match requested {:?}",
                self.model, model
            )));
        }
        if &self.cfg != cfg {
            return Err(Error::Validation(format!(
                "checkpoint training config\n{}does not match requested\n{}",
                self.cfg.to_text(),
                cfg.to_text()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferOptions {
    pub mode: InferMode,
    pub target: LossTarget,
    pub vis_threshold: f64,
}

impl InferOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        InferOptions {
            mode: cfg.infer_mode,
            target: cfg.loss_target,
            vis_threshold: cfg.vis_threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub heatmaps: HeatmapStack,
    pub keypoints: KeypointSet,
}

/// Reverse process from `ŷ_T ~ N(0, I)` down to `ŷ_0`, then heatmap decoding.
pub fn infer(
    image: &Tensor,
    params: &DenoiserParams,
    model: &ModelConfig,
    sched: &DiffusionSchedule,
    prior: &SemanticPrior,
    opts: &InferOptions,
    rng: &mut Rng,
) -> Result<Inference> {
    model.validate()?;
    if sched.steps() != model.steps {
        return Err(Error::Config(format!(
            "schedule T = {} but model T = {}",
            sched.steps(),
            model.steps
        )));
    }
    let ctx = model::image_context(params, model, image, prior)?;
    let (h, w) = model.heatmap;
    let shape = [model.num_keypoints, h, w];
    let stride = FEATURE_STRIDE as f64;
    let mut y = HeatmapStack::new(
        Tensor::new(&shape, rng.normal_vec(shape.iter().product()))?,
        stride,
    )?;
    for t in (1..=model.steps).rev() {
        let out = model::denoise_with(params, model, &ctx, &y.values, t)?;
        let y0_hat = match opts.target {
            LossTarget::X0 => HeatmapStack::new(out, stride)?,
            LossTarget::Eps => diffusion::x0_from_eps(&y, &out, t, sched)?,
        };
        y = match opts.mode {
            InferMode::Literal => y0_hat,
            InferMode::Ddim => diffusion::ddim_step(&y, &y0_hat, t, sched)?,
        };
        if !y.values.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite heatmap at step t = {t}"
            )));
        }
    }
    let mut keypoints = heatmap::decode(&y, opts.vis_threshold);
    keypoints.species = prior.species.clone();
    Ok(Inference {
        heatmaps: y,
        keypoints,
    })
}

/// Predictions for every image of `ds`; image `i` draws its noise from stream `image_id`.
pub fn infer_dataset(
    ds: &Dataset,
    params: &DenoiserParams,
    model: &ModelConfig,
    sched: &DiffusionSchedule,
    prior: &SemanticPrior,
    opts: &InferOptions,
    seed: u64,
) -> Result<Vec<PredictionRecord>> {
    ds.image_ids
        .iter()
        .zip(&ds.images)
        .map(|(&id, img)| {
            let mut rng = Rng::derive(seed, id);
            let inf = infer(img, params, model, sched, prior, opts, &mut rng)?;
            Ok(PredictionRecord::from_keypoints(id, &inf.keypoints))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{build_prompts, pseudo_embed};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            channels: 8,
            embed_dim: 8,
            heads: 2,
            heatmap: (4, 4),
            num_keypoints: 3,
            steps: 5,
            time_dim: 4,
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr_decay_epochs: vec![1],
            steps: 5,
            channels: 8,
            heads: 2,
            time_dim: 4,
            sigma: 1.0,
            ..TrainConfig::default()
        }
    }

    fn tiny_prior() -> SemanticPrior {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        pseudo_embed(&build_prompts("cat", &names).unwrap(), 8, 1).unwrap()
    }

    fn tiny_data(n: usize, vis: u8, cfg: &TrainConfig) -> TrainingSet {
        let model = tiny_model();
        let mut set = TrainingSet {
            images: vec![],
            targets: vec![],
            masks: vec![],
        };
        let mut rng = Rng::seed_from(3);
        for _ in 0..n {
            let img = Tensor::uniform(&[3, 16, 16], 1.0, &mut rng);
            let coords = (0..3)
                .map(|_| [rng.uniform_in(1.0, 14.0), rng.uniform_in(1.0, 14.0)])
                .collect();
            let kps =
                KeypointSet::new(coords, vec![vis; 3], [0.0, 0.0, 16.0, 16.0], "cat").unwrap();
            set.push(img, &kps, &model, cfg).unwrap();
        }
        set
    }

    #[test]
    fn config_text_roundtrip_and_errors() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let c =
            TrainConfig::parse("# desk\nepochs = 3\nlr_decay_epochs = 1, 2\nloss_target = eps\n")
                .unwrap();
        assert_eq!(
            (c.epochs, c.lr_decay_epochs.clone(), c.loss_target),
            (3, vec![1, 2], LossTarget::Eps)
        );
        assert!(
            matches!(TrainConfig::parse("bogus = 1"), Err(Error::Config(m)) if m.contains("bogus"))
        );
        assert!(TrainConfig::parse("lr = -1").is_err());
        assert!(TrainConfig::parse("epochs = 3\nlr_decay_epochs = 2,1").is_err());
        assert!(TrainConfig::parse("epochs = 3\nlr_decay_epochs = 3").is_err());
        assert!(TrainConfig::parse("infer_mode = fancy").is_err());
        assert!(TrainConfig::parse("just words").is_err());
    }

    #[test]
    fn lr_schedule_matches_decay_boundaries() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 5e-4);
        assert_eq!(cfg.lr_at(23), 5e-4);
        assert!((cfg.lr_at(24) - 5e-5).abs() < 1e-18);
        assert!((cfg.lr_at(28) - 5e-5).abs() < 1e-18);
        assert!((cfg.lr_at(29) - 5e-6).abs() < 1e-18);
    }

    #[test]
    fn adamw_first_step_by_hand() {
        let model = tiny_model();
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..tiny_cfg()
        };
        let mut params = DenoiserParams::init(&model, 0).unwrap();
        params.zero_grad();
        params.kp_bias.accumulate_grad(&[2.0, -0.5, 0.0]);
        let before = params.clone();
        let mut opt = OptimizerState::new(&params);
        opt.update(&mut params, 0.01, &cfg);
        // Bias-corrected first step moves each coordinate by lr · sign(g) (up to eps).
        let b = params.kp_bias.data();
        assert!((b[0] - (0.0 - 0.01 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        assert!((b[1] - (0.0 + 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert_eq!(b[2], 0.0);
        // Weight decay alone shrinks other parameters by (1 - lr·wd).
        let (w0, w1) = (before.o_w.data()[0], params.o_w.data()[0]);
        assert!((w1 - w0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn zero_loss_leaves_parameters_unchanged() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            mask_visibility: false,
            ..tiny_cfg()
        };
        let data = tiny_data(2, 0, &cfg);
        assert!(data.targets.iter().all(|t| t.max_abs() == 0.0));
        let mut tr = Trainer::new(cfg, tiny_model()).unwrap();
        for t in tr.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let before = tr.params.clone();
        let loss = tr.train_step(&data, &[0, 1], &tiny_prior()).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(
            tr.params.tensors().map(|t| t.data().to_vec()),
            before.tensors().map(|t| t.data().to_vec())
        );
    }

    #[test]
    fn masked_loss_ignores_unlabeled_channels() {
        let mut w = loss_weights(&[true, false, true], 4, 2);
        assert_eq!(w.len(), 12);
        assert!(w[4..8].iter().all(|&x| x == 0.0));
        assert!((w.iter().sum::<f64>() - 0.5).abs() < 1e-15);
        w = loss_weights(&[false, false], 4, 1);
        assert!(w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn training_is_reproducible_and_resumable() {
        let cfg = tiny_cfg();
        let data = tiny_data(5, 2, &cfg);
        let prior = tiny_prior();
        let run = || {
            let mut tr = Trainer::new(cfg.clone(), tiny_model()).unwrap();
            let mut losses = vec![];
            while !tr.finished() {
                losses.extend(
                    tr.train_epoch(&data, &prior, |_| Ok(()))
                        .unwrap()
                        .into_iter()
                        .map(|l| l.loss),
                );
            }
            (tr, losses)
        };
        let (a, la) = run();
        let (_, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(la.len(), 6);

        let mut tr = Trainer::new(cfg.clone(), tiny_model()).unwrap();
        let first = tr.train_epoch(&data, &prior, |_| Ok(())).unwrap();
        assert_eq!(first[0].lr, 5e-4);
        let bytes = checkpoint_bytes(&tr).unwrap();
        let mut resumed = checkpoint_from_bytes(&bytes).unwrap();
        resumed.check_compatible(&cfg, &tiny_model()).unwrap();
        let second = resumed.train_epoch(&data, &prior, |_| Ok(())).unwrap();
        assert!((second[0].lr - 5e-5).abs() < 1e-18);
        let tail: Vec<f64> = second.iter().map(|l| l.loss).collect();
        assert_eq!(tail, la[3..]);
        assert_eq!(resumed.params, a.params);
    }

    #[test]
    fn checkpoint_errors() {
        let tr = Trainer::new(tiny_cfg(), tiny_model()).unwrap();
        let mut bytes = checkpoint_bytes(&tr).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        bytes[nl + 1] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(Error::Format { .. })
        ));

        let loaded = checkpoint_from_bytes(&checkpoint_bytes(&tr).unwrap()).unwrap();
        let other = ModelConfig {
            num_keypoints: 4,
            ..tiny_model()
        };
        assert!(matches!(
            loaded.check_compatible(&tiny_cfg(), &other),
            Err(Error::Validation(_))
        ));
        let cfg2 = TrainConfig {
            lr: 1e-3,
            ..tiny_cfg()
        };
        let err = loaded
            .check_compatible(&cfg2, &tiny_model())
            .unwrap_err()
            .to_string();
        assert!(err.contains("lr = 0.0005") && err.contains("lr = 0.001"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &tr).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap().params, tr.params);
    }

    #[test]
    fn samplers_agree_at_one_step_and_are_seeded() {
        let model = ModelConfig {
            steps: 1,
            ..tiny_model()
        };
        let cfg = TrainConfig {
            steps: 1,
            ..tiny_cfg()
        };
        let params = DenoiserParams::init(&model, 4).unwrap();
        let sched = cfg.schedule().unwrap();
        let img = Tensor::uniform(&[3, 16, 16], 1.0, &mut Rng::seed_from(1));
        let prior = tiny_prior();
        for target in [LossTarget::X0, LossTarget::Eps] {
            let run = |mode| {
                let opts = InferOptions {
                    mode,
                    target,
                    vis_threshold: 0.3,
                };
                infer(
                    &img,
                    &params,
                    &model,
                    &sched,
                    &prior,
                    &opts,
                    &mut Rng::seed_from(9),
                )
                .unwrap()
            };
            let (lit, ddim) = (run(InferMode::Literal), run(InferMode::Ddim));
            for (a, b) in lit
                .heatmaps
                .values
                .data()
                .iter()
                .zip(ddim.heatmaps.values.data())
            {
                assert!((a - b).abs() <= 1e-12);
            }
            assert_eq!(run(InferMode::Literal), lit);
        }
    }

    #[test]
    fn literal_sampling_stays_finite_and_leaves_params_alone() {
        let model = tiny_model();
        let params = DenoiserParams::init(&model, 8).unwrap();
        let snapshot = params.clone();
        let sched = tiny_cfg().schedule().unwrap();
        let img = Tensor::uniform(&[3, 16, 16], 1.0, &mut Rng::seed_from(2));
        let opts = InferOptions {
            mode: InferMode::Literal,
            target: LossTarget::X0,
            vis_threshold: 0.3,
        };
        for seed in 0..100 {
            let r = infer(
                &img,
                &params,
                &model,
                &sched,
                &tiny_prior(),
                &opts,
                &mut Rng::seed_from(seed),
            )
            .unwrap();
            assert!(r.heatmaps.values.all_finite());
        }
        assert_eq!(params, snapshot);
    }
}
