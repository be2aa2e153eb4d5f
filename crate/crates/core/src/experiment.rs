//! Training loop, optimizer, early stopping, grid search and candidate
//! emission.
//!
//! A run can live purely in memory ([`train`]) or in a directory
//! ([`train_in_dir`]) holding:
//!
//! ```text
//! config.toml    the TrainConfig
//! metrics.csv    one row per finished epoch
//! state.json     everything needed to continue after an interruption
//! best.json      checkpoint of the selected epoch
//! report.json    the final RunRecord
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{soften_mask, LesionMask, SoftMask};
use crate::data::{DatasetSplit, LabeledImage};
use crate::error::{Error, Result};
use crate::fairmetrics::{
    auroc, equalized_odds, fairness_report, group_rates, FairnessReport, Group, GroupedPredictions,
};
use crate::model::{Checkpoint, InputMode, ModelConfig, Rann, Scratch, TrainExample};
use crate::pareto::ModelCandidate;
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STATE_FILE: &str = "state.json";
pub const BEST_CHECKPOINT_FILE: &str = "best.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    #[default]
    LesionAttn,
    LesionOnly,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Baseline, Method::LesionAttn, Method::LesionOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::LesionAttn => "lesion_attn",
            Method::LesionOnly => "lesion_only",
        }
    }

    pub fn input_mode(self) -> InputMode {
        match self {
            Method::LesionOnly => InputMode::LesionOnly,
            _ => InputMode::Attention,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().replace('-', "_"))
            .ok_or_else(|| Error::Unknown {
                kind: "method",
                name: s.to_string(),
            })
    }
}

/// Quantity watched by early stopping and best-epoch selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    #[default]
    ValAuroc,
    ValLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub learning_rate: f64,
    /// Weight of the attention loss; must be zero unless `method` is `lesion_attn`.
    pub lambda_attn: f64,
    /// Background value of the softened mask.
    pub rho: f64,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub early_stop_metric: EarlyStopMetric,
    pub lr_decay_factor: f64,
    /// Optimizer steps between decays.
    pub lr_decay_every: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Seeds weight initialisation and batch order; overrides `model.seed`.
    pub seed: u64,
    /// Decision threshold for the fairness reports.
    pub threshold: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::LesionAttn,
            learning_rate: 1e-3,
            lambda_attn: 0.5,
            rho: 0.7,
            epochs: 100,
            early_stop_patience: 10,
            early_stop_metric: EarlyStopMetric::ValAuroc,
            lr_decay_factor: 0.99,
            lr_decay_every: 10,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            batch_size: 32,
            seed: 0,
            threshold: 0.5,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for `method`; the attention weight is zeroed for methods
    /// that do not use it.
    pub fn for_method(method: Method) -> Self {
        TrainConfig::default().with_method(method)
    }

    pub fn with_method(mut self, method: Method) -> Self {
        if method != Method::LesionAttn {
            self.lambda_attn = 0.0;
        } else if self.method != Method::LesionAttn && self.lambda_attn == 0.0 {
            self.lambda_attn = TrainConfig::default().lambda_attn;
        }
        self.method = method;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("train config: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.lambda_attn >= 0.0 && self.lambda_attn.is_finite()) {
            return bad(format!("lambda_attn {} must be non-negative", self.lambda_attn));
        }
        if self.method != Method::LesionAttn && self.lambda_attn != 0.0 {
            return bad(format!("lambda_attn must be 0 for method {}", self.method));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho {} outside [0, 1]", self.rho));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 || self.lr_decay_every == 0 {
            return bad("epochs, batch_size, early_stop_patience and lr_decay_every must be positive".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!("lr_decay_factor {} outside (0, 1]", self.lr_decay_factor));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps be positive".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        self.model_config().validate()
    }

    /// The model configuration this run trains.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_mode: self.method.input_mode(),
            seed: self.seed,
            ..self.model.clone()
        }
    }

    /// Sets one named hyperparameter from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("cannot parse {key} = {value:?}")))
        }
        match key {
            "method" => *self = self.clone().with_method(value.parse()?),
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "lambda_attn" | "lambda" => self.lambda_attn = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "early_stop_patience" | "patience" => self.early_stop_patience = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, value)?,
            "lr_decay_every" => self.lr_decay_every = parse(key, value)?,
            "input_resolution" => self.model.input_resolution = parse(key, value)?,
            "head_hidden_units" => self.model.head_hidden_units = parse(key, value)?,
            "attention_kernel_size" => self.model.attention_kernel_size = parse(key, value)?,
            "channels_per_block" => {
                self.model.channels_per_block = value
                    .split(|c: char| c == ',' || c == '/' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "early_stop_metric" => {
                self.early_stop_metric = match value.trim() {
                    "val_auroc" | "auroc" => EarlyStopMetric::ValAuroc,
                    "val_loss" | "loss" => EarlyStopMetric::ValLoss,
                    other => {
                        return Err(Error::Unknown {
                            kind: "early stop metric",
                            name: other.to_string(),
                        })
                    }
                }
            }
            other => {
                return Err(Error::Unknown {
                    kind: "hyperparameter",
                    name: other.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("serializing config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("parsing config: {e}")))
    }
}

/// `lr0 * factor^floor(step / every)`.
pub fn learning_rate_at(lr0: f64, factor: f64, every: usize, step: u64) -> f64 {
    lr0 * factor.powi((step / every as u64) as i32)
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub t: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, betas: (f64, f64), eps: f64) -> Self {
        Adam {
            beta1: T::lit(betas.0),
            beta2: T::lit(betas.1),
            eps: T::lit(eps),
            t: 0,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        self.t += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        let lr = T::lit(lr);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: u64,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_classification_loss: f64,
    pub train_attention_loss: f64,
    pub val_loss: f64,
    pub val_auroc: f64,
    /// Absent when a group lacks positives or negatives.
    pub val_eo: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: TrainConfig,
    /// Grid coordinates (and method) that produced this run.
    pub hyperparams: BTreeMap<String, String>,
    pub epoch_history: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Path of the kept checkpoint, when the run lives on disk.
    pub best_checkpoint: Option<PathBuf>,
    pub validation_report: Option<FairnessReport<f64>>,
    pub test_report: Option<FairnessReport<f64>>,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// A trained run: its record and the selected weights.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub record: RunRecord,
    pub model: Rann<T>,
}

/// A cohort at model resolution, with the per-sample inputs each method needs.
struct Prepared<T> {
    images: Vec<ImageTensor<T>>,
    labels: Vec<bool>,
    groups: Vec<Group>,
    masks: Vec<Option<LesionMask>>,
    targets: Vec<Option<SoftMask<T>>>,
}

impl<T: Scalar> Prepared<T> {
    fn new(data: &[LabeledImage<T>], resolution: usize, masks_needed: bool, rho: Option<f64>) -> Result<Self> {
        let mut p = Prepared {
            images: Vec::with_capacity(data.len()),
            labels: Vec::with_capacity(data.len()),
            groups: Vec::with_capacity(data.len()),
            masks: Vec::with_capacity(data.len()),
            targets: Vec::with_capacity(data.len()),
        };
        for s in data {
            let image = if s.image.spatial() == (resolution, resolution) {
                s.image.clone()
            } else {
                s.image.resized(resolution, resolution)
            };
            let mask = if masks_needed || rho.is_some() {
                let m = s.mask.as_ref().ok_or_else(|| Error::MissingMask(s.source_id.clone()))?;
                Some(m.resized(resolution, resolution))
            } else {
                None
            };
            let target = match (rho, &mask) {
                (Some(r), Some(m)) => Some(soften_mask(m, T::lit(r))?),
                _ => None,
            };
            p.images.push(image);
            p.labels.push(s.label);
            p.groups.push(s.group);
            p.masks.push(mask);
            p.targets.push(target);
        }
        Ok(p)
    }

    fn len(&self) -> usize {
        self.images.len()
    }
}

fn sigmoid_bce(score: f64, label: bool) -> f64 {
    let p = score.clamp(1e-12, 1.0 - 1e-12);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Scores of every sample. Masks are read only by the lesion-only variant.
pub fn predict_scores<T: Scalar>(model: &Rann<T>, data: &[LabeledImage<T>]) -> Result<Vec<f64>> {
    let r = model.config().input_resolution;
    let lesion_only = model.config().input_mode == InputMode::LesionOnly;
    let mut scratch = Scratch::default();
    data.iter()
        .map(|s| {
            let resized;
            let image = if s.image.spatial() == (r, r) {
                &s.image
            } else {
                resized = s.image.resized(r, r);
                &resized
            };
            let mask = if lesion_only {
                let m = s.mask.as_ref().ok_or_else(|| Error::MissingMask(s.source_id.clone()))?;
                Some(m.resized(r, r))
            } else {
                None
            };
            Ok(model.predict(image, mask.as_ref(), &mut scratch)?.as_f64())
        })
        .collect()
}

/// Forward pass over `data` followed by the full fairness report.
pub fn evaluate<T: Scalar>(model: &Rann<T>, data: &[LabeledImage<T>], threshold: f64) -> Result<FairnessReport<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let scores = predict_scores(model, data)?;
    let preds = GroupedPredictions::new(
        scores,
        data.iter().map(|s| s.label).collect(),
        data.iter().map(|s| s.group).collect(),
    )?;
    fairness_report(&preds, threshold)
}

pub fn evaluate_checkpoint<T: Scalar>(
    checkpoint: &Path,
    data: &[LabeledImage<T>],
    threshold: f64,
) -> Result<FairnessReport<f64>> {
    let model = Checkpoint::load(checkpoint)?.to_model::<T>()?;
    evaluate(&model, data, threshold)
}

/// Everything needed to continue an interrupted run exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainingState {
    epochs_done: usize,
    steps: u64,
    params: Vec<u64>,
    adam_t: u64,
    adam_m: Vec<u64>,
    adam_v: Vec<u64>,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    best_value: f64,
    best_params: Vec<u64>,
}

fn to_bits<T: Scalar>(v: &[T]) -> Vec<u64> {
    v.iter().map(|x| x.as_f64().to_bits()).collect()
}

fn from_bits<T: Scalar>(v: &[u64]) -> Vec<T> {
    v.iter().map(|&b| T::lit(f64::from_bits(b))).collect()
}

/// Options for directory-backed runs.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Return after this many epochs in this call, leaving the run resumable.
    pub stop_after_epochs: Option<usize>,
}

/// Result of one call to [`train_in_dir`].
#[derive(Clone, Debug)]
pub enum RunStatus<T> {
    Finished(TrainOutcome<T>),
    /// Interrupted on request after `epochs_done` epochs.
    Paused { epochs_done: usize },
}

fn default_hyperparams(config: &TrainConfig) -> BTreeMap<String, String> {
    let mut h = BTreeMap::new();
    h.insert("method".into(), config.method.to_string());
    h.insert("learning_rate".into(), config.learning_rate.to_string());
    if config.method == Method::LesionAttn {
        h.insert("lambda_attn".into(), config.lambda_attn.to_string());
        h.insert("rho".into(), config.rho.to_string());
    }
    h
}

/// Trains in memory.
pub fn train<T: Scalar>(config: &TrainConfig, split: &DatasetSplit<T>) -> Result<TrainOutcome<T>> {
    let id = format!("{}_s{}", config.method, config.seed);
    match Trainer::new(config, split, id, default_hyperparams(config))?.run(None, RunOptions::default())? {
        RunStatus::Finished(o) => Ok(o),
        RunStatus::Paused { .. } => unreachable!("in-memory runs never pause"),
    }
}

/// Trains with all state under `dir`, resuming whatever is already there.
pub fn train_in_dir<T: Scalar>(
    config: &TrainConfig,
    split: &DatasetSplit<T>,
    dir: &Path,
    run_id: &str,
    hyperparams: BTreeMap<String, String>,
    options: RunOptions,
) -> Result<RunStatus<T>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let config_path = dir.join(CONFIG_FILE);
    let text = config.to_toml()?;
    if config_path.exists() {
        let stored = TrainConfig::from_toml(&read_file(&config_path)?)?;
        if &stored != config {
            return Err(Error::invalid(format!(
                "{} holds a run with a different configuration",
                dir.display()
            )));
        }
    } else {
        write_file(&config_path, &text)?;
    }
    let report = dir.join(REPORT_FILE);
    if report.exists() {
        let record = RunRecord::load(&report)?;
        let model = Checkpoint::load(&dir.join(BEST_CHECKPOINT_FILE))?.to_model()?;
        return Ok(RunStatus::Finished(TrainOutcome { record, model }));
    }
    Trainer::new(config, split, run_id.to_string(), hyperparams)?.run(Some(dir), options)
}

struct Trainer<'a, T> {
    config: &'a TrainConfig,
    run_id: String,
    hyperparams: BTreeMap<String, String>,
    train: Prepared<T>,
    val: Prepared<T>,
    split: &'a DatasetSplit<T>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    fn new(
        config: &'a TrainConfig,
        split: &'a DatasetSplit<T>,
        run_id: String,
        hyperparams: BTreeMap<String, String>,
    ) -> Result<Self> {
        config.validate()?;
        if split.train.is_empty() || split.validation.is_empty() {
            return Err(Error::Empty("training or validation split"));
        }
        let r = config.model.input_resolution;
        let lesion_only = config.method == Method::LesionOnly;
        let rho = (config.method == Method::LesionAttn && config.lambda_attn > 0.0).then_some(config.rho);
        if rho.is_some() {
            if let Some(s) = split.train.iter().find(|s| s.mask.is_none()) {
                return Err(Error::MissingMask(format!(
                    "lesion_attn training needs a mask for every training image; {} has none",
                    s.source_id
                )));
            }
        }
        Ok(Trainer {
            config,
            run_id,
            hyperparams,
            train: Prepared::new(&split.train, r, lesion_only, rho)?,
            val: Prepared::new(&split.validation, r, lesion_only, None)?,
            split,
        })
    }

    /// (mean BCE, AUROC, EO) on the validation split.
    fn validate(&self, model: &Rann<T>, scratch: &mut Scratch<T>) -> Result<(f64, f64, Option<f64>)> {
        let mut scores = Vec::with_capacity(self.val.len());
        for i in 0..self.val.len() {
            scores.push(model.predict(&self.val.images[i], self.val.masks[i].as_ref(), scratch)?.as_f64());
        }
        let loss = scores
            .iter()
            .zip(&self.val.labels)
            .map(|(&s, &y)| sigmoid_bce(s, y))
            .sum::<f64>()
            / scores.len() as f64;
        let au = auroc(&scores, &self.val.labels)?;
        let preds = GroupedPredictions::new(scores, self.val.labels.clone(), self.val.groups.clone())?;
        let eo = group_rates(&preds, self.config.threshold)
            .and_then(|r| equalized_odds(&r))
            .ok()
            .map(|e| e.eo);
        Ok((loss, au, eo))
    }

    fn run(self, dir: Option<&Path>, options: RunOptions) -> Result<RunStatus<T>> {
        let cfg = self.config;
        let mut model = Rann::<T>::new(cfg.model_config())?;
        let n = model.n_params();
        let mut adam = Adam::<T>::new(n, cfg.adam_betas, cfg.adam_eps);
        let mut history: Vec<EpochRecord> = Vec::new();
        let mut steps = 0u64;
        let mut best_epoch = 0usize;
        let mut best_value = f64::NEG_INFINITY;
        let mut best_params = model.params().to_vec();

        if let Some(state) = dir.map(|d| d.join(STATE_FILE)).filter(|p| p.exists()) {
            let text = read_file(&state)?;
            let s: TrainingState = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: state.clone(),
                message: e.to_string(),
            })?;
            if s.params.len() != n {
                return Err(Error::Format {
                    path: state,
                    message: format!("{} parameters stored, model has {n}", s.params.len()),
                });
            }
            model.params_mut().copy_from_slice(&from_bits::<T>(&s.params));
            adam.t = s.adam_t;
            adam.m = from_bits(&s.adam_m);
            adam.v = from_bits(&s.adam_v);
            history = s.history;
            steps = s.steps;
            best_epoch = s.best_epoch;
            best_value = s.best_value;
            best_params = from_bits(&s.best_params);
        }

        let lambda = T::lit(cfg.lambda_attn);
        let mut grad = vec![T::zero(); n];
        let mut scratch = Scratch::default();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut epochs_this_call = 0;
        let mut stopped_early = false;

        while history.len() < cfg.epochs {
            let epoch = history.len() + 1;
            if patience_exhausted(best_epoch, history.len(), cfg.early_stop_patience) {
                stopped_early = true;
                break;
            }
            if options.stop_after_epochs.is_some_and(|k| epochs_this_call >= k) {
                return Ok(RunStatus::Paused {
                    epochs_done: history.len(),
                });
            }

            // Batch order depends only on (seed, epoch), so a resumed run
            // replays exactly the batches an uninterrupted one would.
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64);
            order.sort_unstable();
            order.shuffle(&mut rng);

            let (mut tot, mut cls, mut att, mut seen) = (0.0, 0.0, 0.0, 0usize);
            let mut lr = learning_rate_at(cfg.learning_rate, cfg.lr_decay_factor, cfg.lr_decay_every, steps);
            for batch_idx in order.chunks(cfg.batch_size) {
                let batch: Vec<TrainExample<'_, T>> = batch_idx
                    .iter()
                    .map(|&i| TrainExample {
                        image: &self.train.images[i],
                        label: self.train.labels[i],
                        mask: self.train.masks[i].as_ref(),
                        target: self.train.targets[i].as_ref(),
                    })
                    .collect();
                let loss = model.loss_and_gradient(&batch, lambda, &mut grad, &mut scratch)?;
                let total = loss.total.as_f64();
                if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    let err = Error::NonFiniteLoss {
                        epoch,
                        step: steps as usize,
                        loss: total,
                    };
                    if let Some(d) = dir {
                        let diag = serde_json::json!({
                            "run_id": self.run_id,
                            "epoch": epoch,
                            "step": steps,
                            "loss": total.to_string(),
                            "classification_loss": loss.classification.as_f64().to_string(),
                            "attention_loss": loss.attention.as_f64().to_string(),
                            "learning_rate": lr,
                        });
                        write_file(&d.join("failure.json"), &serde_json::to_string_pretty(&diag)?)?;
                    }
                    return Err(err);
                }
                lr = learning_rate_at(cfg.learning_rate, cfg.lr_decay_factor, cfg.lr_decay_every, steps);
                adam.step(model.params_mut(), &grad, lr);
                steps += 1;
                let b = batch.len() as f64;
                tot += total * b;
                cls += loss.classification.as_f64() * b;
                att += loss.attention.as_f64() * b;
                seen += batch.len();
            }

            let (val_loss, val_auroc, val_eo) = self.validate(&model, &mut scratch)?;
            let record = EpochRecord {
                epoch,
                steps,
                learning_rate: lr,
                train_loss: tot / seen as f64,
                train_classification_loss: cls / seen as f64,
                train_attention_loss: att / seen as f64,
                val_loss,
                val_auroc,
                val_eo,
            };
            log::info!(
                "{} epoch {epoch}: loss {:.4} val_auroc {:.4} val_eo {:?}",
                self.run_id,
                record.train_loss,
                val_auroc,
                val_eo
            );
            let value = match cfg.early_stop_metric {
                EarlyStopMetric::ValAuroc => val_auroc,
                EarlyStopMetric::ValLoss => -val_loss,
            };
            if value > best_value {
                best_value = value;
                best_epoch = epoch;
                best_params.copy_from_slice(model.params());
                if let Some(d) = dir {
                    let best = Rann::from_parts(cfg.model_config(), best_params.clone())?;
                    Checkpoint::from_model(&best).save(&d.join(BEST_CHECKPOINT_FILE))?;
                }
            }
            history.push(record);
            epochs_this_call += 1;

            if let Some(d) = dir {
                write_metrics(&d.join(METRICS_FILE), &history)?;
                let state = TrainingState {
                    epochs_done: history.len(),
                    steps,
                    params: to_bits(model.params()),
                    adam_t: adam.t,
                    adam_m: to_bits(&adam.m),
                    adam_v: to_bits(&adam.v),
                    history: history.clone(),
                    best_epoch,
                    best_value,
                    best_params: to_bits(&best_params),
                };
                write_file(&d.join(STATE_FILE), &serde_json::to_string(&state)?)?;
            }
        }

        let best = Rann::from_parts(cfg.model_config(), best_params)?;
        let validation_report = evaluate(&best, &self.split.validation, cfg.threshold)?;
        let test_report = if self.split.test.is_empty() {
            None
        } else {
            Some(evaluate(&best, &self.split.test, cfg.threshold)?)
        };
        let record = RunRecord {
            run_id: self.run_id,
            config: cfg.clone(),
            hyperparams: self.hyperparams,
            epoch_history: history,
            best_epoch,
            stopped_early,
            best_checkpoint: dir.map(|d| d.join(BEST_CHECKPOINT_FILE)),
            validation_report: Some(validation_report),
            test_report,
        };
        if let Some(d) = dir {
            record.save(&d.join(REPORT_FILE))?;
        }
        Ok(RunStatus::Finished(TrainOutcome { record, model: best }))
    }
}

/// True once `patience` epochs have passed since the last strict improvement.
pub(crate) fn patience_exhausted(best_epoch: usize, epochs_done: usize, patience: usize) -> bool {
    best_epoch > 0 && epochs_done - best_epoch >= patience
}

pub fn write_metrics(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Grid axes: hyperparameter name to the values to try, in text form.
pub type Grid = BTreeMap<String, Vec<String>>;

/// Cartesian product of the grid axes, in lexicographic axis order.
pub fn grid_points(grid: &Grid) -> Result<Vec<BTreeMap<String, String>>> {
    if grid.is_empty() {
        return Err(Error::Empty("hyperparameter grid"));
    }
    let mut points = vec![BTreeMap::new()];
    for (key, values) in grid {
        if values.is_empty() {
            return Err(Error::invalid(format!("grid axis {key} has no values")));
        }
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.insert(key.clone(), v.clone());
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

/// One configuration per grid point and seed, validated up front.
pub fn grid_configs(base: &TrainConfig, grid: &Grid, n_seeds: usize) -> Result<Vec<(String, BTreeMap<String, String>, TrainConfig)>> {
    if n_seeds == 0 {
        return Err(Error::invalid("n_seeds must be at least 1"));
    }
    let mut out = Vec::new();
    for (i, point) in grid_points(grid)?.into_iter().enumerate() {
        let mut cfg = base.clone();
        // Method first so its lambda reset never clobbers an explicit grid value.
        if let Some(m) = point.get("method") {
            cfg.set("method", m)?;
        }
        for (k, v) in point.iter().filter(|(k, _)| k.as_str() != "method") {
            cfg.set(k, v)?;
        }
        let mut hp = point.clone();
        hp.insert("method".into(), cfg.method.to_string());
        for s in 0..n_seeds as u64 {
            let mut c = cfg.clone();
            c.seed = base.seed + s;
            c.validate()?;
            out.push((format!("{}_g{i:03}_s{}", c.method, c.seed), hp.clone(), c));
        }
    }
    Ok(out)
}

/// Every grid point crossed with `n_seeds` seeds (`base.seed`, `base.seed + 1`, ...).
///
/// With `out_dir`, each run lives in `out_dir/<run_id>` and finished runs
/// are picked up rather than retrained.
pub fn grid_search<T: Scalar>(
    base: &TrainConfig,
    grid: &Grid,
    split: &DatasetSplit<T>,
    n_seeds: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<RunRecord>> {
    let configs = grid_configs(base, grid, n_seeds)?;
    let mut records = Vec::with_capacity(configs.len());
    for (id, hp, cfg) in configs {
        let record = match out_dir {
            Some(d) => match train_in_dir(&cfg, split, &d.join(&id), &id, hp, RunOptions::default())? {
                RunStatus::Finished(o) => o.record,
                RunStatus::Paused { .. } => unreachable!("no pause requested"),
            },
            None => {
                let trainer = Trainer::new(&cfg, split, id, hp)?;
                match trainer.run(None, RunOptions::default())? {
                    RunStatus::Finished(o) => o.record,
                    RunStatus::Paused { .. } => unreachable!("no pause requested"),
                }
            }
        };
        records.push(record);
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestConfig {
    pub hyperparams: BTreeMap<String, String>,
    pub mean_val_auroc: f64,
    pub n_runs: usize,
}

/// Per method, the hyperparameters with the highest mean validation AUROC
/// across seeds. Ties keep the lexicographically smaller hyperparameter set.
pub fn best_configurations(records: &[RunRecord]) -> Result<BTreeMap<Method, BestConfig>> {
    let mut sums: BTreeMap<(Method, BTreeMap<String, String>), (f64, usize)> = BTreeMap::new();
    for r in records {
        let report = r
            .validation_report
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("run {} has no validation report", r.run_id)))?;
        let e = sums.entry((r.config.method, r.hyperparams.clone())).or_insert((0.0, 0));
        e.0 += report.auroc;
        e.1 += 1;
    }
    let mut best: BTreeMap<Method, BestConfig> = BTreeMap::new();
    for ((method, hp), (sum, n)) in sums {
        let mean = sum / n as f64;
        let better = best.get(&method).is_none_or(|b| mean > b.mean_val_auroc);
        if better {
            best.insert(
                method,
                BestConfig {
                    hyperparams: hp,
                    mean_val_auroc: mean,
                    n_runs: n,
                },
            );
        }
    }
    Ok(best)
}

/// One candidate per run: validation AUROC as predictive performance,
/// `1 - EO` on validation as fairness.
pub fn emit_candidates(records: &[RunRecord]) -> Result<Vec<ModelCandidate<f64>>> {
    if records.is_empty() {
        return Err(Error::Empty("run records"));
    }
    records
        .iter()
        .map(|r| {
            let v = r
                .validation_report
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("run {} has no validation report", r.run_id)))?;
            let mut hp = r.hyperparams.clone();
            hp.insert("seed".into(), r.config.seed.to_string());
            ModelCandidate::new(r.run_id.clone(), v.auroc, 1.0 - v.eo).map(|c| c.with_hyperparams(hp))
        })
        .collect()
}
