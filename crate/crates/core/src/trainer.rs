//! Training loop with Adam updates and epoch-end callbacks.
//!
//! Each epoch runs one optimiser step per training batch, evaluates the
//! validation partition, appends a history row and then runs the callbacks in
//! order: CSV logger, model checkpoint, early stopping.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::ArrayD;
use thiserror::Error;

use crate::data_pipeline::{BatchGenerator, DatasetSplit, PipelineError};
use crate::evaluation_report::{self, EvalError};
use crate::metrics::{DiceMode, MetricAccumulator, MetricError, MetricValues, METRIC_NAMES};
use crate::preprocess::{PreprocessConfig, NUM_CLASSES};
use crate::unet::{self, ModelError, UNet, UNetConfig};

/// Header of the training log, in column order.
pub const CSV_COLUMNS: [&str; 22] = [
    "epoch",
    "loss",
    "accuracy",
    "mean_iou",
    "precision",
    "sensitivity",
    "specificity",
    "dice",
    "dice_necrotic",
    "dice_edema",
    "dice_enhancing",
    "val_loss",
    "val_accuracy",
    "val_mean_iou",
    "val_precision",
    "val_sensitivity",
    "val_specificity",
    "val_dice",
    "val_dice_necrotic",
    "val_dice_edema",
    "val_dice_enhancing",
    "seconds",
];

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAINING_LOG: &str = "training_log.csv";
pub const HYPERPARAMETERS_FILE: &str = "hyperparameters.cfg";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparameters(String),
    #[error("the {0} partition is empty")]
    EmptyPartition(&'static str),
    #[error(transparent)]
    Data(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("batch {batch} of epoch {epoch} ({first_slice}): {source}")]
    Batch {
        epoch: usize,
        batch: usize,
        first_slice: String,
        #[source]
        source: Box<TrainError>,
    },
    #[error("could not write {path} (disk full or not writable): {source}")]
    CallbackWrite {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed training log {path}: {reason}")]
    MalformedLog { path: PathBuf, reason: String },
}

/// Optimisation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    /// A [`CSV_COLUMNS`] metric name, e.g. `val_loss`.
    pub monitor: String,
    pub seed: u64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            epochs: 235,
            batch_size: 1,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-7,
            early_stop_patience: 10,
            early_stop_min_delta: 0.0,
            monitor: "val_loss".to_string(),
            seed: 0,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidHyperparameters(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        // A zero rate is allowed for frozen-parameter runs.
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad("learning_rate must be non-negative and finite");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        if self.early_stop_min_delta.is_nan() || self.early_stop_min_delta < 0.0 {
            return bad("early_stop_min_delta must be non-negative");
        }
        monitor_direction(&self.monitor).map_err(|e| TrainError::InvalidHyperparameters(e.to_string()))?;
        Ok(())
    }

    /// `key = value` lines for every field, in a fixed order.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "batch-size = {}", self.batch_size);
        let _ = writeln!(out, "learning-rate = {}", self.learning_rate);
        let _ = writeln!(out, "adam-beta1 = {}", self.adam_beta1);
        let _ = writeln!(out, "adam-beta2 = {}", self.adam_beta2);
        let _ = writeln!(out, "adam-eps = {}", self.adam_eps);
        let _ = writeln!(out, "patience = {}", self.early_stop_patience);
        let _ = writeln!(out, "min-delta = {}", self.early_stop_min_delta);
        let _ = writeln!(out, "monitor = {}", self.monitor);
        let _ = writeln!(out, "seed = {}", self.seed);
        out
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<ArrayD<f64>>,
    second: Vec<ArrayD<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(model: &UNet, hp: &Hyperparameters) -> Self {
        let zeros: Vec<ArrayD<f64>> = model
            .parameters()
            .iter()
            .map(|(_, p)| ArrayD::zeros(p.raw_dim()))
            .collect();
        Adam {
            learning_rate: hp.learning_rate,
            beta1: hp.adam_beta1,
            beta2: hp.adam_beta2,
            eps: hp.adam_eps,
            second: zeros.clone(),
            first: zeros,
            steps: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, model: &mut UNet, grads: &UNet) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let grads = grads.parameters();
        for (((mut p, (_, g)), m), v) in model
            .parameters_mut()
            .into_iter()
            .zip(grads.iter())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            ndarray::Zip::from(&mut p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train: MetricValues,
    pub validation: MetricValues,
    pub seconds: f64,
}

impl EpochRecord {
    /// Value of a [`CSV_COLUMNS`] entry other than `epoch`.
    pub fn value(&self, column: &str) -> Result<f64, MetricError> {
        match column {
            "seconds" => Ok(self.seconds),
            c => match c.strip_prefix("val_") {
                Some(name) => self.validation.get(name),
                None => self.train.get(c),
            },
        }
    }

    fn csv_line(&self) -> String {
        let mut fields = vec![self.epoch.to_string()];
        fields.extend(self.train.to_array().iter().map(|v| v.to_string()));
        fields.extend(self.validation.to_array().iter().map(|v| v.to_string()));
        fields.push(self.seconds.to_string());
        fields.join(",")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    EarlyStop,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::Completed => "completed",
            StopReason::EarlyStop => "early_stop",
        }
    }
}

/// Per-epoch records plus run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHistory {
    pub rows: Vec<EpochRecord>,
    pub seed: u64,
    pub model_config: UNetConfig,
    pub hyperparameters: Hyperparameters,
    pub stop_reason: StopReason,
    pub optimizer_steps: u64,
}

impl TrainingHistory {
    pub fn new(model_config: UNetConfig, hyperparameters: Hyperparameters) -> Self {
        TrainingHistory {
            rows: Vec::new(),
            seed: hyperparameters.seed,
            model_config,
            hyperparameters,
            stop_reason: StopReason::Completed,
            optimizer_steps: 0,
        }
    }

    pub fn series(&self, column: &str) -> Result<Vec<f64>, MetricError> {
        self.rows.iter().map(|r| r.value(column)).collect()
    }
}

/// Whether lower values of `monitor` are better.
pub fn monitor_direction(monitor: &str) -> Result<bool, MetricError> {
    let base = monitor.strip_prefix("val_").unwrap_or(monitor);
    if !METRIC_NAMES.contains(&base) {
        return Err(MetricError::UnknownMetric(monitor.to_string()));
    }
    Ok(base == "loss")
}

/// Index of the best row, where a later row only replaces the best when it
/// improves on it by more than `min_delta`.
fn best_index(series: &[f64], lower_is_better: bool, min_delta: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in series.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) if lower_is_better => v < series[b] - min_delta,
            Some(b) => v > series[b] + min_delta,
        };
        if better {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stop once `patience` epochs have passed since the best epoch without an
/// improvement larger than `min_delta`.
pub fn early_stopping_check(
    history: &TrainingHistory,
    monitor: &str,
    patience: usize,
    min_delta: f64,
) -> Result<StopDecision, MetricError> {
    let lower = monitor_direction(monitor)?;
    let series = history.series(monitor)?;
    let Some(best) = best_index(&series, lower, min_delta) else {
        return Ok(StopDecision::Continue);
    };
    let last = series.len() - 1;
    if last > best && last - best >= patience {
        Ok(StopDecision::Stop)
    } else {
        Ok(StopDecision::Continue)
    }
}

/// Appends one row to the training log, writing the header when the file is new or empty.
pub fn append_csv_log(row: &EpochRecord, path: &Path) -> Result<(), TrainError> {
    let io = |source| TrainError::CallbackWrite {
        path: path.to_path_buf(),
        source,
    };
    let needs_header = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    let mut text = String::new();
    if needs_header {
        text.push_str(&CSV_COLUMNS.join(","));
        text.push('\n');
    }
    text.push_str(&row.csv_line());
    text.push('\n');
    file.write_all(text.as_bytes()).map_err(io)?;
    file.flush().map_err(io)?;
    file.sync_data().map_err(io)
}

/// Parses a training log written by [`append_csv_log`].
pub fn read_csv_log(path: &Path) -> Result<Vec<EpochRecord>, TrainError> {
    let malformed = |reason: String| TrainError::MalformedLog {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| malformed(e.to_string()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| malformed("empty file".into()))?.split(',').collect();
    let index_of = |name: &str| header.iter().position(|h| h.trim() == name);
    let positions = CSV_COLUMNS
        .iter()
        .map(|c| index_of(c).ok_or_else(|| malformed(format!("missing column '{c}'"))))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let value = |col: usize| -> Result<f64, TrainError> {
            let raw = fields
                .get(positions[col])
                .ok_or_else(|| malformed(format!("row {} is short", n + 1)))?;
            raw.trim()
                .parse::<f64>()
                .map_err(|e| malformed(format!("row {} column '{}': {e}", n + 1, CSV_COLUMNS[col])))
        };
        let mut train = [0.0; 10];
        let mut val = [0.0; 10];
        for i in 0..10 {
            train[i] = value(1 + i)?;
            val[i] = value(11 + i)?;
        }
        rows.push(EpochRecord {
            epoch: value(0)? as usize,
            train: MetricValues::from_array(train),
            validation: MetricValues::from_array(val),
            seconds: value(21)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointOutcome {
    Saved,
    Skipped,
}

/// Refreshes `last.ckpt` and writes `best.ckpt` when the latest row is the
/// best so far on `monitor`.
pub fn checkpoint_if_best(
    model: &UNet,
    history: &TrainingHistory,
    monitor: &str,
    out_dir: &Path,
) -> Result<CheckpointOutcome, TrainError> {
    let lower = monitor_direction(monitor)?;
    let series = history.series(monitor)?;
    let Some(&latest) = series.last() else {
        return Ok(CheckpointOutcome::Skipped);
    };
    let previous = &series[..series.len() - 1];
    let is_best = previous
        .iter()
        .all(|&v| if lower { latest < v } else { latest > v });
    let save = |name: &str| -> Result<(), TrainError> {
        unet::save_checkpoint(model, &out_dir.join(name)).map_err(|e| match e {
            ModelError::Io { path, source } => TrainError::CallbackWrite {
                path: PathBuf::from(path),
                source,
            },
            other => TrainError::Model(other),
        })
    };
    save(LAST_CHECKPOINT)?;
    if is_best {
        save(BEST_CHECKPOINT)?;
        Ok(CheckpointOutcome::Saved)
    } else {
        Ok(CheckpointOutcome::Skipped)
    }
}

/// State visible to callbacks at the end of an epoch.
pub struct EpochContext<'a> {
    pub model: &'a UNet,
    pub history: &'a TrainingHistory,
    pub out_dir: &'a Path,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallbackAction {
    Continue,
    Stop,
}

pub trait Callback {
    fn on_epoch_end(&mut self, ctx: &EpochContext<'_>) -> Result<CallbackAction, TrainError>;
}

pub struct CsvLogger {
    pub path: PathBuf,
}

impl Callback for CsvLogger {
    fn on_epoch_end(&mut self, ctx: &EpochContext<'_>) -> Result<CallbackAction, TrainError> {
        if let Some(row) = ctx.history.rows.last() {
            append_csv_log(row, &self.path)?;
        }
        Ok(CallbackAction::Continue)
    }
}

pub struct ModelCheckpoint {
    pub monitor: String,
    /// Outcome of every call, in order.
    pub outcomes: Vec<CheckpointOutcome>,
}

impl Callback for ModelCheckpoint {
    fn on_epoch_end(&mut self, ctx: &EpochContext<'_>) -> Result<CallbackAction, TrainError> {
        let outcome = checkpoint_if_best(ctx.model, ctx.history, &self.monitor, ctx.out_dir)?;
        self.outcomes.push(outcome);
        Ok(CallbackAction::Continue)
    }
}

pub struct EarlyStopping {
    pub monitor: String,
    pub patience: usize,
    pub min_delta: f64,
}

impl Callback for EarlyStopping {
    fn on_epoch_end(&mut self, ctx: &EpochContext<'_>) -> Result<CallbackAction, TrainError> {
        Ok(
            match early_stopping_check(ctx.history, &self.monitor, self.patience, self.min_delta)? {
                StopDecision::Stop => CallbackAction::Stop,
                StopDecision::Continue => CallbackAction::Continue,
            },
        )
    }
}

/// The three standard callbacks in their fixed order.
pub fn default_callbacks(hp: &Hyperparameters, out_dir: &Path) -> Vec<Box<dyn Callback>> {
    vec![
        Box::new(CsvLogger {
            path: out_dir.join(TRAINING_LOG),
        }),
        Box::new(ModelCheckpoint {
            monitor: hp.monitor.clone(),
            outcomes: Vec::new(),
        }),
        Box::new(EarlyStopping {
            monitor: hp.monitor.clone(),
            patience: hp.early_stop_patience,
            min_delta: hp.early_stop_min_delta,
        }),
    ]
}

/// What the `seconds` column records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpochTiming {
    WallClock,
    /// A constant, for byte-reproducible logs.
    Fixed(f64),
}

/// Training driver; [`train`] covers the common case.
pub struct Trainer {
    pub hyperparameters: Hyperparameters,
    pub preprocess: PreprocessConfig,
    pub out_dir: PathBuf,
    pub callbacks: Vec<Box<dyn Callback>>,
    pub timing: EpochTiming,
}

impl Trainer {
    /// A trainer with the default callbacks and wall-clock timing.
    pub fn new(hyperparameters: Hyperparameters, preprocess: PreprocessConfig, out_dir: &Path) -> Self {
        Trainer {
            callbacks: default_callbacks(&hyperparameters, out_dir),
            hyperparameters,
            preprocess,
            out_dir: out_dir.to_path_buf(),
            timing: EpochTiming::WallClock,
        }
    }

    pub fn run(&mut self, model: &mut UNet, split: &DatasetSplit) -> Result<TrainingHistory, TrainError> {
        let hp = self.hyperparameters.clone();
        hp.validate()?;
        if split.train.is_empty() {
            return Err(TrainError::EmptyPartition("train"));
        }
        if split.validation.is_empty() {
            return Err(TrainError::EmptyPartition("validation"));
        }
        fs::create_dir_all(&self.out_dir).map_err(|source| TrainError::CallbackWrite {
            path: self.out_dir.clone(),
            source,
        })?;
        let log = self.out_dir.join(TRAINING_LOG);
        if log.exists() {
            fs::remove_file(&log).map_err(|source| TrainError::CallbackWrite { path: log.clone(), source })?;
        }
        self.write_run_config(model, &hp)?;

        let mut history = TrainingHistory::new(*model.config(), hp.clone());
        let mut adam = Adam::new(model, &hp);
        for epoch in 1..=hp.epochs {
            let started = Instant::now();
            let train = self.train_epoch(model, &mut adam, split, epoch)?;
            let validation = evaluation_report::accumulate(
                &*model,
                &split.validation,
                &self.preprocess,
                hp.batch_size,
            )?
            .0
            .finalize(DiceMode::Soft);
            let seconds = match self.timing {
                EpochTiming::WallClock => started.elapsed().as_secs_f64(),
                EpochTiming::Fixed(s) => s,
            };
            history.rows.push(EpochRecord {
                epoch,
                train,
                validation,
                seconds,
            });
            history.optimizer_steps = adam.steps();
            log::info!(
                "epoch {epoch}/{}: loss {:.5} val_loss {:.5} val_dice {:.4}",
                hp.epochs,
                train.loss,
                validation.loss,
                validation.dice
            );
            let ctx = EpochContext {
                model: &*model,
                history: &history,
                out_dir: &self.out_dir,
            };
            let mut stop = false;
            for cb in &mut self.callbacks {
                if cb.on_epoch_end(&ctx)? == CallbackAction::Stop {
                    stop = true;
                }
            }
            if stop {
                history.stop_reason = StopReason::EarlyStop;
                break;
            }
        }
        Ok(history)
    }

    fn train_epoch(
        &self,
        model: &mut UNet,
        adam: &mut Adam,
        split: &DatasetSplit,
        epoch: usize,
    ) -> Result<MetricValues, TrainError> {
        let hp = &self.hyperparameters;
        let seed = hp.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
        let batches = BatchGenerator::new(&split.train, &self.preprocess, hp.batch_size, true, seed)?;
        let mut acc = MetricAccumulator::new(NUM_CLASSES);
        for (index, batch) in batches.enumerate() {
            let batch = batch?;
            let annotate = |e: TrainError| TrainError::Batch {
                epoch,
                batch: index,
                first_slice: batch
                    .provenance
                    .first()
                    .map(|p| format!("{} slice {}", p.case_id, p.slice_index))
                    .unwrap_or_default(),
                source: Box::new(e),
            };
            let tape = model
                .forward_train(batch.inputs.view())
                .map_err(|e| annotate(e.into()))?;
            let probs = tape.probabilities();
            acc.add(batch.targets.view(), probs.view())
                .map_err(|e| annotate(e.into()))?;
            let grads = model
                .backward(&tape, batch.targets.view())
                .map_err(|e| annotate(e.into()))?;
            adam.step(model, &grads);
        }
        Ok(acc.finalize(DiceMode::Soft))
    }

    fn write_run_config(&self, model: &UNet, hp: &Hyperparameters) -> Result<(), TrainError> {
        let c = model.config();
        let mut text = String::from(
            "# learning-rate, Adam moments and early-stopping settings default to assumed values\n",
        );
        text.push_str(&hp.to_config_text());
        let _ = writeln!(text, "in-channels = {}", c.in_channels);
        let _ = writeln!(text, "num-classes = {}", c.num_classes);
        let _ = writeln!(text, "base-features = {}", c.base_features);
        let _ = writeln!(text, "depth = {}", c.depth);
        let _ = writeln!(text, "input-size = {}x{}", c.input_size.0, c.input_size.1);
        let _ = writeln!(text, "init-seed = {}", model.seed());
        let _ = writeln!(text, "window-start = {}", self.preprocess.window.start);
        let _ = writeln!(text, "window-length = {}", self.preprocess.window.length);
        let path = self.out_dir.join(HYPERPARAMETERS_FILE);
        fs::write(&path, text).map_err(|source| TrainError::CallbackWrite { path, source })
    }
}

/// Trains `model` on `split` with the default callbacks writing into `out_dir`.
pub fn train(
    model: &mut UNet,
    split: &DatasetSplit,
    preprocess: &PreprocessConfig,
    hp: &Hyperparameters,
    out_dir: &Path,
) -> Result<TrainingHistory, TrainError> {
    Trainer::new(hp.clone(), preprocess.clone(), out_dir).run(model, split)
}
