//! Optimization loop: AdamW under a warmup-then-cosine schedule, driving any
//! configured supervision recipe, with resumable checkpoints and a
//! deterministic metrics log.

mod batch;
mod optim;
mod schedule;
mod state;

pub use batch::{build_objective, derive_seed, BatchContext, BuiltObjective, PreparedBatch, Skips};
pub use optim::{adamw_step, AdamConfig, AdamState};
pub use schedule::Schedule;
pub use state::{load_for_eval, CheckpointMeta, StateMeta};

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentError, ImageAugPolicy, SynonymTable, TextAugPolicy, TextStrategy};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{split_words, BatchPlan, DataError, Image, PairRecord, Vocab};
use crate::encoders::{ClipModel, EncoderError, ModelConfig};
use crate::supervision::{LossBreakdown, LossConfig, LossError, NNQueue, Variant};
use crate::tensor::{Graph, TensorError};
use crate::zeroshot::{build_classifier, classify_images, EvalReport, PromptSet, ZeroShotError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss is not finite at step {step}: {fields}")]
    NonFiniteLoss { step: u64, fields: String },
    #[error("gradient of {param} is not finite ({value})")]
    NonFiniteGradient { param: String, value: f64 },
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    ZeroShot(#[from] ZeroShotError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl TrainError {
    /// The run diverged rather than being misconfigured.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Self::NonFiniteLoss { .. } | Self::NonFiniteGradient { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            base_lr: 1e-4,
            peak_lr: 1e-3,
            warmup_epochs: 1,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            variant: Variant::Clip,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.base_lr > 0.0 && self.peak_lr >= self.base_lr && self.peak_lr.is_finite()) {
            return bad(format!(
                "need peak_lr >= base_lr > 0, got base_lr {} and peak_lr {}",
                self.base_lr, self.peak_lr
            ));
        }
        if self.epochs > 0 && self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        Schedule {
            base: self.base_lr,
            peak: self.peak_lr,
            warmup_steps: (self.warmup_epochs * steps_per_epoch) as u64,
            total_steps: (self.epochs * steps_per_epoch) as u64,
        }
    }
}

/// Text augmentation as stored in configs: the synonym table is named by
/// path (or the bundled one) rather than inlined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextAugSettings {
    pub strategies: Vec<TextStrategy>,
    pub rate: f64,
    pub synonyms: Option<PathBuf>,
}

impl Default for TextAugSettings {
    fn default() -> Self {
        let policy = TextAugPolicy::default();
        Self {
            strategies: policy.strategies,
            rate: policy.rate,
            synonyms: None,
        }
    }
}

impl TextAugSettings {
    /// The policy with synonyms limited to words `vocab` knows.
    pub fn policy(&self, vocab: &Vocab) -> Result<TextAugPolicy, AugmentError> {
        let table = match &self.synonyms {
            Some(path) => SynonymTable::load(path)?,
            None => SynonymTable::builtin(),
        };
        let policy = TextAugPolicy {
            strategies: self.strategies.clone(),
            rate: self.rate,
            synonyms: table.restricted_to(vocab),
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub image_aug: ImageAugPolicy,
    pub text_aug: TextAugSettings,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.image_aug.validate()?;
        if self.text_aug.strategies.is_empty() || !(0.0..1.0).contains(&self.text_aug.rate) {
            return Err(TrainError::Config(format!(
                "text_aug needs at least one strategy and a rate in [0, 1), got {:?} at {}",
                self.text_aug.strategies, self.text_aug.rate
            )));
        }
        Ok(())
    }
}

/// Training pairs with images decoded and captions split into words.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub images: Vec<Image>,
    pub captions: Vec<Vec<String>>,
}

impl PairSet {
    pub fn from_records(records: &[PairRecord], image_size: usize) -> Result<Self, TrainError> {
        let mut images = Vec::with_capacity(records.len());
        let mut captions = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            images.push(r.load_image(image_size)?);
            let words = split_words(&r.caption);
            if words.is_empty() {
                return Err(TrainError::Config(format!("record {} has an empty caption", i + 1)));
            }
            captions.push(words);
        }
        Ok(Self { images, captions })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Labelled images for zero-shot evaluation.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl EvalSet {
    /// Classes are the sorted distinct labels; every record needs one.
    pub fn from_records(records: &[PairRecord], image_size: usize) -> Result<Self, TrainError> {
        if records.is_empty() {
            return Err(TrainError::Config("evaluation set is empty".into()));
        }
        let class_names = crate::data::class_names(records);
        let mut images = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let label = r
                .label
                .as_ref()
                .ok_or_else(|| TrainError::Config(format!("evaluation record {} has no label", i + 1)))?;
            labels.push(class_names.binary_search(label).expect("label is listed"));
            images.push(r.load_image(image_size)?);
        }
        Ok(Self {
            images,
            labels,
            class_names,
        })
    }

    pub fn evaluate(&self, model: &ClipModel, vocab: &Vocab, prompts: &PromptSet) -> Result<EvalReport, TrainError> {
        let classifier = build_classifier(model, vocab, &self.class_names, prompts)?;
        let predictions = classify_images(model, &self.images, &classifier)?;
        Ok(EvalReport::new(self.class_names.clone(), &predictions, &self.labels)?)
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    /// Temperature used by the step's forward pass.
    pub tau: f64,
    pub breakdown: LossBreakdown,
    pub skips: Skips,
}

impl StepRecord {
    /// One metrics-log line.
    pub fn log_line(&self) -> String {
        format!(
            "step epoch={} step={} lr={:.6e} tau={:.6} {} skipped_tss={} skipped_nns={}",
            self.epoch,
            self.step,
            self.lr,
            self.tau,
            self.breakdown.format_fields(),
            u8::from(self.skips.tss),
            u8::from(self.skips.nns),
        )
    }
}

pub fn eval_log_line(epoch: u64, step: u64, top1: f64) -> String {
    format!("eval epoch={epoch} step={step} val_top1={top1:.6}")
}

/// Model, optimizer and data cursor of a run.
pub struct Trainer {
    model: ClipModel,
    settings: TrainSettings,
    vocab: Vocab,
    text_policy: TextAugPolicy,
    data: PairSet,
    plan: BatchPlan,
    schedule: Schedule,
    adam: AdamState,
    queue: NNQueue,
    step: u64,
    best_top1: Option<f64>,
    epoch_batches: Option<(u64, Vec<Vec<usize>>)>,
}

impl Trainer {
    pub fn new(settings: TrainSettings, vocab: Vocab, data: PairSet) -> Result<Self, TrainError> {
        settings.validate()?;
        let model = ClipModel::new(&settings.model, settings.train.seed)?;
        Self::assemble(settings, vocab, data, model)
    }

    fn assemble(settings: TrainSettings, vocab: Vocab, data: PairSet, model: ClipModel) -> Result<Self, TrainError> {
        if vocab.len() > settings.model.text.vocab_size {
            return Err(TrainError::Config(format!(
                "vocabulary of {} words exceeds the model's vocab_size {}",
                vocab.len(),
                settings.model.text.vocab_size
            )));
        }
        if data.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        let plan = BatchPlan::new(data.len(), settings.train.batch_size, settings.train.seed)?;
        let schedule = settings.train.schedule(plan.batches_per_epoch());
        let text_policy = settings.text_aug.policy(&vocab)?;
        let adam = AdamState::new(model.params());
        let queue = NNQueue::new(settings.loss.queue_capacity, settings.model.embed_dim());
        Ok(Self {
            model,
            settings,
            vocab,
            text_policy,
            data,
            plan,
            schedule,
            adam,
            queue,
            step: 0,
            best_top1: None,
            epoch_batches: None,
        })
    }

    pub fn model(&self) -> &ClipModel {
        &self.model
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn queue(&self) -> &NNQueue {
        &self.queue
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.plan.batches_per_epoch() as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn best_top1(&self) -> Option<f64> {
        self.best_top1
    }

    pub fn context(&self) -> BatchContext<'_> {
        BatchContext {
            vocab: &self.vocab,
            context_length: self.settings.model.text.context_length,
            loss: &self.settings.loss,
            image_aug: &self.settings.image_aug,
            text_aug: &self.text_policy,
            seed: self.settings.train.seed,
        }
    }

    /// Record indices of the batch consumed at `step`.
    pub fn batch_records(&mut self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        if self.epoch_batches.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.epoch_batches = Some((epoch, self.plan.epoch(epoch)));
        }
        let (_, batches) = self.epoch_batches.as_ref().expect("filled above");
        batches[(step % spe) as usize].clone()
    }

    /// The batch the next call to [`Trainer::step`] will train on.
    pub fn prepare_next(&mut self) -> Result<PreparedBatch, TrainError> {
        let records = self.batch_records(self.step);
        self.context().prepare(self.step, &records, &self.data.images, &self.data.captions)
    }

    /// One forward/backward/update. On a non-finite loss or gradient the
    /// trainer is left exactly as it was before the call.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let prepared = self.prepare_next()?;
        let step = self.step;
        let tau = self.model.temperature();
        let mut g = Graph::new();
        let p = self.model.params().bind(&mut g);
        let built = build_objective(&self.model, &mut g, &p, &prepared, &self.settings.loss, &self.queue)?;
        let breakdown = built.objective.breakdown(&g);
        if !breakdown.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                fields: breakdown.format_fields(),
            });
        }
        g.backward(built.objective.total)?;
        let grads: Vec<_> = p.vars().iter().map(|&v| g.grad(v)).collect();
        let texts = self.settings.loss.nns.then(|| batch::rows_of(g.value(built.text_pooled)));
        drop(g);

        let lr = self.schedule.lr_at(step);
        adamw_step(self.model.params_mut(), &grads, &mut self.adam, lr, &self.settings.train.adam())?;
        self.model.clamp_temperature();
        if let Some(texts) = texts {
            self.queue.extend(texts, step);
        }
        self.step += 1;
        Ok(StepRecord {
            epoch: step / self.steps_per_epoch(),
            step,
            lr,
            tau,
            breakdown,
            skips: built.skips,
        })
    }

    pub fn evaluate(&self, eval: &EvalSet, prompts: &PromptSet) -> Result<EvalReport, TrainError> {
        eval.evaluate(&self.model, &self.vocab, prompts)
    }

    /// Records a validation score; returns whether it is a new best.
    pub fn observe_top1(&mut self, top1: f64) -> bool {
        let better = self.best_top1.is_none_or(|b| top1 > b);
        if better {
            self.best_top1 = Some(top1);
        }
        better
    }
}

/// Where a run writes and what it evaluates on.
pub struct RunOptions<'a> {
    pub out_dir: &'a Path,
    pub eval: Option<&'a EvalSet>,
    pub prompts: &'a PromptSet,
    /// Receives each evaluation line as it is logged.
    pub progress: Option<&'a dyn Fn(&str)>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: u64,
    pub best_top1: Option<f64>,
    pub final_report: Option<EvalReport>,
}

pub const METRICS_FILE: &str = "metrics.log";
pub const INITIAL_CHECKPOINT: &str = "initial.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";
pub const EVAL_REPORT_FILE: &str = "eval_report.txt";

/// Trains until the configured number of epochs, logging every step and
/// evaluating after every epoch. A fresh run writes the initial
/// checkpoint and starts a new log; a resumed run appends to it.
pub fn run(trainer: &mut Trainer, opts: &RunOptions) -> Result<RunSummary, TrainError> {
    let dir = opts.out_dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let metrics_path = dir.join(METRICS_FILE);
    let fresh = trainer.step_count() == 0;
    if fresh {
        save(&trainer.checkpoint()?, &dir.join(INITIAL_CHECKPOINT))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    let mut log = BufWriter::new(file);
    let write_line = |log: &mut BufWriter<File>, line: String| -> Result<(), TrainError> {
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(io_err(&metrics_path))
    };

    let start = trainer.step_count();
    while trainer.step_count() < trainer.total_steps() {
        let record = match trainer.step() {
            Ok(r) => r,
            Err(e) if e.is_divergence() => {
                save(&trainer.checkpoint()?, &dir.join(LAST_GOOD_CHECKPOINT))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        write_line(&mut log, record.log_line())?;
        if trainer.step_count().is_multiple_of(trainer.steps_per_epoch()) {
            if let Some(eval) = opts.eval {
                let report = trainer.evaluate(eval, opts.prompts)?;
                let line = eval_log_line(record.epoch, record.step, report.accuracy);
                if let Some(progress) = opts.progress {
                    progress(&line);
                }
                write_line(&mut log, line)?;
                if trainer.observe_top1(report.accuracy) {
                    save(&trainer.checkpoint()?, &dir.join(BEST_CHECKPOINT))?;
                }
            }
        }
    }
    let mut final_report = None;
    if trainer.step_count() > start || !fresh {
        save(&trainer.checkpoint()?, &dir.join(FINAL_CHECKPOINT))?;
        if let Some(eval) = opts.eval {
            let report = trainer.evaluate(eval, opts.prompts)?;
            let path = dir.join(EVAL_REPORT_FILE);
            std::fs::write(&path, report.to_string()).map_err(io_err(&path))?;
            final_report = Some(report);
        }
    }
    Ok(RunSummary {
        steps: trainer.step_count(),
        best_top1: trainer.best_top1(),
        final_report,
    })
}

fn save(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    ckpt.save(path).map_err(io_err(path))
}
