//! Training pipelines for the refiner and the world model.
//!
//! Equilibrium mode alternates two phases per iteration: episodes on the
//! training tasks with differentiation off, whose inner-loop equilibria go to
//! memory, then optimizer steps on decay-weighted batches of those equilibria
//! paired with ground truth. Supervised mode spends the same number of
//! steps on empty-draft, empty-context pairs. Both start from the same
//! supervised warmup, logged as iteration 0.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eqgrad::{Adam, AdamConfig, Optimizer};
use crate::homeworld::TaskRecord;
use crate::memory::{EquilibriumMemory, MemoryError, NewRecord};
use crate::numerics::{no_grad, Gradients};
use crate::planner::{plan_task, ContextEntry, FeedbackSchedule, PlannerConfig, PlannerError};
use crate::refiner::{encode_prompt, sequence_loss, PromptLimit, RefinerError, Token, Transformer, Vocab};
use crate::worldmodel::{build_wm_dataset, wm_prompt, WorldModel, WorldModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error("no training examples")]
    EmptyDataset,
    #[error("record refers to unknown task `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Refiner(#[from] RefinerError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    WorldModel(#[from] WorldModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Equilibrium,
    Supervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Iterations after the warmup.
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    /// Epochs of optimizer steps per iteration; an epoch is
    /// `ceil(tasks / batch_size)` steps in both modes.
    pub epochs_per_iteration: usize,
    /// Planner outer bound during collection.
    pub train_outer_bound: usize,
    pub train_inner_bound: usize,
    /// Caps the tasks visited per collection phase.
    pub task_cap: Option<usize>,
    /// Global gradient norm clip; 0 disables it.
    pub clip_norm: f64,
    pub wm_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Equilibrium,
            iterations: 6,
            learning_rate: 2e-4,
            batch_size: 32,
            warmup_epochs: 1,
            epochs_per_iteration: 1,
            train_outer_bound: 3,
            train_inner_bound: 8,
            task_cap: None,
            clip_norm: 1.0,
            wm_epochs: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::Config(format!("{what} must be positive")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if self.train_outer_bound == 0 {
            return bad("train_outer_bound");
        }
        if self.train_inner_bound == 0 {
            return bad("train_inner_bound");
        }
        if self.task_cap == Some(0) {
            return bad("task_cap");
        }
        if !(self.clip_norm >= 0.0) {
            return Err(TrainError::Config("clip_norm must be nonnegative".into()));
        }
        Ok(())
    }

    /// Planner settings used while collecting equilibria.
    pub fn collection_planner(&self) -> PlannerConfig {
        PlannerConfig {
            outer_bound: self.train_outer_bound,
            inner_bound: self.train_inner_bound,
            schedule: FeedbackSchedule::EnvOnly,
            ..PlannerConfig::default()
        }
    }

    fn steps_per_epoch(&self, n_tasks: usize) -> usize {
        n_tasks.div_ceil(self.batch_size)
    }

    /// Optimizer steps a run takes on `n_tasks` training tasks; identical in
    /// both modes.
    pub fn total_steps(&self, n_tasks: usize) -> usize {
        self.steps_per_epoch(n_tasks) * (self.warmup_epochs + self.iterations * self.epochs_per_iteration)
    }
}

/// One metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub iteration: usize,
    /// `warmup`, `collect`, `update`, `supervised` or `world_model`.
    pub phase: String,
    /// Mean loss over the phase's examples; absent for collection.
    pub mean_loss: Option<f64>,
    pub memory_size: usize,
    pub env_interactions: usize,
    pub steps: usize,
    pub skipped_batches: usize,
}

pub fn write_metrics(out: &mut impl Write, lines: &[MetricsLine]) -> std::io::Result<()> {
    for line in lines {
        writeln!(out, "{}", serde_json::to_string(line).expect("metrics serialize"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub metrics: Vec<MetricsLine>,
    pub steps: usize,
    pub skipped_batches: usize,
    pub env_interactions: usize,
}

/// A tokenized example with its target plan.
struct Example {
    prompt: Vec<Token>,
    target: Vec<Token>,
}

struct Stepper {
    optimizer: Adam,
    clip_norm: f64,
    steps: usize,
    skipped: usize,
}

impl Stepper {
    fn new(cfg: &TrainConfig) -> Self {
        Stepper {
            optimizer: Adam::new(AdamConfig {
                lr: cfg.learning_rate,
                ..AdamConfig::default()
            }),
            clip_norm: cfg.clip_norm,
            steps: 0,
            skipped: 0,
        }
    }

    /// One optimizer step on the mean loss of `batch`. Returns the mean loss,
    /// or `None` when the batch was skipped for a non-finite loss or gradient.
    fn step(&mut self, model: &mut Transformer, batch: &[&Example]) -> Result<Option<f64>, TrainError> {
        if batch.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        let mut acc: Option<Gradients> = None;
        for ex in batch {
            let (loss, grads) = sequence_loss(model, &ex.prompt, &ex.target)?;
            total += loss;
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(acc) => {
                    for (name, g) in grads {
                        acc.get_mut(&name).expect("same parameters").axpy(1.0, &g);
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let mut grads = acc.expect("nonempty batch");
        let mut sq = 0.0;
        for g in grads.values_mut() {
            *g = g.scale(1.0 / n);
            sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        let norm = sq.sqrt();
        if !total.is_finite() || !norm.is_finite() {
            self.skipped += 1;
            return Ok(None);
        }
        if self.clip_norm > 0.0 && norm > self.clip_norm {
            let factor = self.clip_norm / norm;
            for g in grads.values_mut() {
                *g = g.scale(factor);
            }
        }
        self.optimizer
            .step(model.params_mut(), &grads)
            .map_err(RefinerError::from)?;
        self.steps += 1;
        Ok(Some(total / n))
    }
}

fn supervised_example(vocab: &Vocab, task: &TaskRecord, limit: PromptLimit) -> Result<Example, TrainError> {
    Ok(Example {
        prompt: encode_prompt(vocab, task, &[], &[], limit)?.tokens,
        target: vocab.encode_plan(&task.gt_plan),
    })
}

fn limit_of(model: &Transformer) -> PromptLimit {
    PromptLimit {
        window: model.config().window,
        ..PromptLimit::default()
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ a.rotate_left(21) ^ b.rotate_left(42));
    rand::Rng::gen(&mut rng)
}

/// Shuffled supervised epochs; every epoch has `steps_per_epoch` batches.
fn supervised_epochs(
    model: &mut Transformer,
    vocab: &Vocab,
    tasks: &[TaskRecord],
    cfg: &TrainConfig,
    stepper: &mut Stepper,
    epochs: usize,
    seed: u64,
) -> Result<Option<f64>, TrainError> {
    let limit = limit_of(model);
    let examples: Vec<Example> = tasks
        .iter()
        .map(|t| supervised_example(vocab, t, limit))
        .collect::<Result<_, _>>()?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::new();
    for epoch in 0..epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, 0x5)));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            if let Some(loss) = stepper.step(model, &batch)? {
                losses.push(loss);
            }
        }
    }
    Ok(mean(&losses))
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Runs the configured training mode on the training tasks. Equilibrium mode
/// appends every collected equilibrium to `memory`.
pub fn train(
    model: &mut Transformer,
    vocab: &Vocab,
    tasks: &[TaskRecord],
    memory: &mut EquilibriumMemory,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    match cfg.mode {
        TrainMode::Equilibrium => train_equilibrium(model, vocab, tasks, memory, cfg),
        TrainMode::Supervised => train_supervised(model, vocab, tasks, cfg),
    }
}

fn warmup(
    model: &mut Transformer,
    vocab: &Vocab,
    tasks: &[TaskRecord],
    cfg: &TrainConfig,
    stepper: &mut Stepper,
    metrics: &mut Vec<MetricsLine>,
) -> Result<(), TrainError> {
    if cfg.warmup_epochs == 0 {
        return Ok(());
    }
    let loss = supervised_epochs(model, vocab, tasks, cfg, stepper, cfg.warmup_epochs, mix(cfg.seed, 0, 0xA))?;
    metrics.push(MetricsLine {
        iteration: 0,
        phase: "warmup".into(),
        mean_loss: loss,
        memory_size: 0,
        env_interactions: 0,
        steps: stepper.steps,
        skipped_batches: stepper.skipped,
    });
    Ok(())
}

pub fn train_equilibrium(
    model: &mut Transformer,
    vocab: &Vocab,
    tasks: &[TaskRecord],
    memory: &mut EquilibriumMemory,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let by_id: BTreeMap<&str, &TaskRecord> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let planner = cfg.collection_planner();
    let limit = limit_of(model);
    let mut stepper = Stepper::new(cfg);
    let mut metrics = Vec::new();
    let mut env_total = 0;
    warmup(model, vocab, tasks, cfg, &mut stepper, &mut metrics)?;
    let visit = cfg.task_cap.unwrap_or(tasks.len()).min(tasks.len());
    for iteration in 1..=cfg.iterations {
        // Phase (a): collection never records a graph.
        let mut env = 0;
        let snapshot: &Transformer = model;
        let episodes = no_grad(|| {
            let mut order: Vec<&TaskRecord> = tasks.iter().collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, iteration as u64, 0xC)));
            order
                .into_iter()
                .take(visit)
                .map(|t| plan_task(snapshot, None, vocab, t, &planner, mix(cfg.seed, iteration as u64, 0xE)))
                .collect::<Result<Vec<_>, _>>()
        })?;
        for ep in &episodes {
            env += ep.env_interactions;
            for step in &ep.outer {
                let (Some(feedback), Some(source)) = (step.feedback.clone(), step.source) else {
                    continue;
                };
                let context = step.context_before.prepended(ContextEntry {
                    plan: step.plan.clone(),
                    feedback: feedback.clone(),
                    source,
                });
                memory.append(NewRecord {
                    task_id: ep.task_id.clone(),
                    plan: step.plan.clone(),
                    context,
                    feedback,
                    source,
                    iteration,
                })?;
            }
        }
        env_total += env;
        metrics.push(MetricsLine {
            iteration,
            phase: "collect".into(),
            mean_loss: None,
            memory_size: memory.len(),
            env_interactions: env,
            steps: stepper.steps,
            skipped_batches: stepper.skipped,
        });

        // Phase (b): decay-weighted batches paired with ground truth.
        let mut losses = Vec::new();
        if !memory.is_empty() {
            let n_steps = cfg.steps_per_epoch(tasks.len()) * cfg.epochs_per_iteration;
            for s in 0..n_steps {
                let records = memory.sample_batch(cfg.batch_size, iteration, mix(cfg.seed, iteration as u64, s as u64))?;
                let mut batch = Vec::with_capacity(records.len());
                for r in records {
                    let task = by_id
                        .get(r.task_id.as_str())
                        .ok_or_else(|| TrainError::UnknownTask(r.task_id.clone()))?;
                    let feedback: Vec<_> = r.context.feedback();
                    let prompt = encode_prompt(vocab, task, &feedback, &r.plan, limit)?.tokens;
                    batch.push(Example {
                        prompt,
                        target: vocab.encode_plan(&task.gt_plan),
                    });
                }
                let refs: Vec<&Example> = batch.iter().collect();
                if let Some(loss) = stepper.step(model, &refs)? {
                    losses.push(loss);
                }
            }
        }
        metrics.push(MetricsLine {
            iteration,
            phase: "update".into(),
            mean_loss: mean(&losses),
            memory_size: memory.len(),
            env_interactions: env,
            steps: stepper.steps,
            skipped_batches: stepper.skipped,
        });
    }
    Ok(TrainReport {
        metrics,
        steps: stepper.steps,
        skipped_batches: stepper.skipped,
        env_interactions: env_total,
    })
}

pub fn train_supervised(
    model: &mut Transformer,
    vocab: &Vocab,
    tasks: &[TaskRecord],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut stepper = Stepper::new(cfg);
    let mut metrics = Vec::new();
    warmup(model, vocab, tasks, cfg, &mut stepper, &mut metrics)?;
    for iteration in 1..=cfg.iterations {
        let loss = supervised_epochs(
            model,
            vocab,
            tasks,
            cfg,
            &mut stepper,
            cfg.epochs_per_iteration,
            mix(cfg.seed, iteration as u64, 0x5F),
        )?;
        metrics.push(MetricsLine {
            iteration,
            phase: "supervised".into(),
            mean_loss: loss,
            memory_size: 0,
            env_interactions: 0,
            steps: stepper.steps,
            skipped_batches: stepper.skipped,
        });
    }
    Ok(TrainReport {
        metrics,
        steps: stepper.steps,
        skipped_batches: stepper.skipped,
        env_interactions: 0,
    })
}

/// Mean cross-entropy of the ground truth under empty draft and context.
pub fn supervised_loss(model: &Transformer, vocab: &Vocab, tasks: &[TaskRecord]) -> Result<f64, TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let limit = limit_of(model);
    let mut total = 0.0;
    for t in tasks {
        let ex = supervised_example(vocab, t, limit)?;
        total += no_grad(|| model.loss(&ex.prompt, &ex.target))?;
    }
    Ok(total / tasks.len() as f64)
}

/// World-model fit: `cfg.wm_epochs` shuffled epochs over the environment
/// records in `memory`. Returns one metrics line per epoch whose loss is the
/// full-dataset loss after that epoch.
pub fn train_world_model(
    wm: &mut WorldModel,
    vocab: &Vocab,
    tasks: &[TaskRecord],
    memory: &EquilibriumMemory,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsLine>, TrainError> {
    cfg.validate()?;
    let by_id: BTreeMap<&str, &TaskRecord> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let window = wm.model().config().window;
    let examples: Vec<Example> = build_wm_dataset(vocab, memory)?
        .into_iter()
        .map(|ex| {
            let task = by_id
                .get(ex.task_id.as_str())
                .ok_or_else(|| TrainError::UnknownTask(ex.task_id.clone()))?;
            Ok(Example {
                prompt: wm_prompt(vocab, task, &ex.plan, window)?,
                target: ex.target,
            })
        })
        .collect::<Result<_, TrainError>>()?;
    let mut stepper = Stepper::new(cfg);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut metrics = Vec::new();
    for epoch in 1..=cfg.wm_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0x3F)));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            stepper.step(wm.model_mut(), &batch)?;
        }
        let model = wm.model();
        let mut total = 0.0;
        for ex in &examples {
            total += no_grad(|| model.loss(&ex.prompt, &ex.target))?;
        }
        metrics.push(MetricsLine {
            iteration: epoch,
            phase: "world_model".into(),
            mean_loss: Some(total / examples.len() as f64),
            memory_size: memory.len(),
            env_interactions: 0,
            steps: stepper.steps,
            skipped_batches: stepper.skipped,
        });
    }
    Ok(metrics)
}
