//! Nested equilibrium solving: an inner loop refines a plan against frozen
//! feedback until the token sequence repeats, and an outer loop collects
//! feedback on each equilibrium from the environment or a world model.

mod noise;

#[cfg(test)]
mod tests;

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fixedpoint::{detect_sequence_fixed_point, SequenceStatus, DEFAULT_MAX_CYCLE};
use crate::homeworld::{assess, Feedback, FeedbackCategory, HomeError, TaskRecord};
use crate::refiner::{
    encode_prompt, generate_refinement, DecodePolicy, PromptLimit, RefinerError, Token, TokenModel, Vocab,
    DEFAULT_MAX_NEW_TOKENS,
};

pub use noise::inject_feedback_noise;

#[derive(Debug, thiserror::Error)]
pub enum PlannerError {
    #[error(transparent)]
    Refiner(#[from] RefinerError),
    #[error(transparent)]
    Home(#[from] HomeError),
    #[error("the feedback schedule needs a world model")]
    MissingWorldModel,
    #[error("invalid planner configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeedbackSource {
    Env,
    WorldModel,
}

impl FeedbackSource {
    pub fn name(self) -> &'static str {
        match self {
            FeedbackSource::Env => "ENV",
            FeedbackSource::WorldModel => "WORLD_MODEL",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEntry {
    /// Plan tokens the feedback is about.
    pub plan: Vec<Token>,
    pub feedback: Feedback,
    pub source: FeedbackSource,
}

/// Feedback history, most recent first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextHistory {
    entries: Vec<ContextEntry>,
}

impl ContextHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[ContextEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A new history with `entry` in front.
    pub fn prepended(&self, entry: ContextEntry) -> ContextHistory {
        let mut entries = Vec::with_capacity(self.entries.len() + 1);
        entries.push(entry);
        entries.extend(self.entries.iter().cloned());
        ContextHistory { entries }
    }

    pub fn feedback(&self) -> Vec<&Feedback> {
        self.entries.iter().map(|e| &e.feedback).collect()
    }
}

/// Where outer-loop feedback comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSchedule {
    /// One inner loop and no feedback.
    None,
    EnvOnly,
    WmOnly,
    /// Alternates one to one, starting with the environment when
    /// `env_first`.
    Alternate { env_first: bool },
}

impl FeedbackSchedule {
    pub fn source(self, outer: usize) -> Option<FeedbackSource> {
        match self {
            FeedbackSchedule::None => None,
            FeedbackSchedule::EnvOnly => Some(FeedbackSource::Env),
            FeedbackSchedule::WmOnly => Some(FeedbackSource::WorldModel),
            FeedbackSchedule::Alternate { env_first } => {
                if (outer % 2 == 0) == env_first {
                    Some(FeedbackSource::Env)
                } else {
                    Some(FeedbackSource::WorldModel)
                }
            }
        }
    }

    pub fn uses_world_model(self) -> bool {
        matches!(self, FeedbackSchedule::WmOnly | FeedbackSchedule::Alternate { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    /// Outer iterations N.
    pub outer_bound: usize,
    /// Refinements per inner loop M.
    pub inner_bound: usize,
    pub cycle_cap: usize,
    pub schedule: FeedbackSchedule,
    /// k of the stochastic first refinement; 0 makes it greedy too.
    pub first_top_k: usize,
    pub noise_ratio: f64,
    pub truncate_illegal: bool,
    pub max_new_tokens: usize,
    pub window: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            outer_bound: 10,
            inner_bound: 8,
            cycle_cap: DEFAULT_MAX_CYCLE,
            schedule: FeedbackSchedule::EnvOnly,
            first_top_k: 10,
            noise_ratio: 0.0,
            truncate_illegal: false,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            window: 256,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        if self.outer_bound == 0 || self.inner_bound == 0 || self.cycle_cap == 0 {
            return Err(PlannerError::Config("outer, inner and cycle bounds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return Err(PlannerError::Config(format!("noise ratio {} outside [0, 1]", self.noise_ratio)));
        }
        Ok(())
    }

    fn limit(&self) -> PromptLimit {
        PromptLimit {
            window: self.window,
            reserve: self.max_new_tokens,
        }
    }

    fn policy(&self, first: bool, seed: u64) -> DecodePolicy {
        let base = if first && self.first_top_k > 0 {
            DecodePolicy::top_k(self.first_top_k, seed)
        } else {
            DecodePolicy::greedy()
        };
        DecodePolicy {
            max_new_tokens: self.max_new_tokens,
            ..base
        }
    }
}

/// Predicts feedback for a plan without touching the environment.
pub trait FeedbackPredictor: Sync {
    fn predict(&self, task: &TaskRecord, plan: &[Token]) -> Result<Feedback, PlannerError>;
}

/// Per-task seed stream derived from the run seed and the task id.
pub fn task_seed(seed: u64, task_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(task_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerOutcome {
    pub plan: Vec<Token>,
    pub iterations: usize,
    pub status: SequenceStatus,
}

/// Refines `start` under frozen `context` until the newest plan repeats an
/// earlier one (within the cycle cap) or `inner_bound` refinements ran.
/// `first_seed` selects top-k decoding for the first refinement.
pub fn inner_loop(
    model: &dyn TokenModel,
    vocab: &Vocab,
    task: &TaskRecord,
    context: &ContextHistory,
    start: &[Token],
    cfg: &PlannerConfig,
    first_seed: Option<u64>,
) -> Result<InnerOutcome, PlannerError> {
    let feedback = context.feedback();
    let mut history: Vec<Vec<Token>> = vec![start.to_vec()];
    let mut status = SequenceStatus::Continue;
    for i in 0..cfg.inner_bound {
        let draft = history.last().expect("nonempty");
        let prompt = encode_prompt(vocab, task, &feedback, draft, cfg.limit())?;
        let policy = match first_seed {
            Some(seed) if i == 0 => cfg.policy(true, seed),
            _ => cfg.policy(false, 0),
        };
        let out = generate_refinement(model, &prompt.tokens, policy)?;
        history.push(out.tokens);
        status = detect_sequence_fixed_point(&history, cfg.cycle_cap);
        if status.is_terminal() {
            break;
        }
    }
    Ok(InnerOutcome {
        plan: history.pop().expect("at least one refinement"),
        iterations: history.len(),
        status,
    })
}

/// Outer update: the equilibrium becomes the next start verbatim and its
/// feedback is prepended to the context.
pub fn outer_step(
    x_star: &[Token],
    context: &ContextHistory,
    feedback: Feedback,
    source: FeedbackSource,
) -> (Vec<Token>, ContextHistory) {
    let next = x_star.to_vec();
    let entry = ContextEntry {
        plan: next.clone(),
        feedback,
        source,
    };
    (next, context.prepended(entry))
}

/// One outer iteration as recorded in traces and memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub outer_idx: usize,
    pub inner_iters: usize,
    pub status: SequenceStatus,
    /// The inner-loop equilibrium.
    pub plan: Vec<Token>,
    /// Context the equilibrium was solved under.
    pub context_before: ContextHistory,
    pub source: Option<FeedbackSource>,
    /// Feedback as the planner saw it, after any noise.
    pub feedback: Option<Feedback>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: String,
    pub final_plan: Vec<Token>,
    pub context: ContextHistory,
    pub inner_counts: Vec<usize>,
    pub env_interactions: usize,
    pub refiner_calls: usize,
    /// Environment verdict on the final plan.
    pub outcome: Feedback,
    pub exec: bool,
    pub success: bool,
    pub gcr: f64,
    pub outer: Vec<OuterRecord>,
}

/// Runs the nested loop on one task from `x₀ = ∅`, `c₀ = ∅`.
///
/// Stops on success feedback, on a repeated (plan, feedback category)
/// pair, or after `outer_bound` iterations. The final plan is scored in the
/// environment; that execution counts as an interaction unless the last
/// outer step already executed the same plan.
pub fn plan_task(
    model: &dyn TokenModel,
    world_model: Option<&dyn FeedbackPredictor>,
    vocab: &Vocab,
    task: &TaskRecord,
    cfg: &PlannerConfig,
    seed: u64,
) -> Result<EpisodeResult, PlannerError> {
    cfg.validate()?;
    if cfg.schedule.uses_world_model() && world_model.is_none() {
        return Err(PlannerError::MissingWorldModel);
    }
    let base_seed = task_seed(seed, &task.task_id);
    let mut x: Vec<Token> = Vec::new();
    let mut context = ContextHistory::new();
    let mut outer = Vec::new();
    let mut inner_counts = Vec::new();
    let mut env_interactions = 0;
    let mut last_env: Option<(Vec<Token>, crate::homeworld::Assessment)> = None;
    let mut seen: Vec<(Vec<Token>, FeedbackCategory)> = Vec::new();

    let score = |plan: &[Token]| -> Result<crate::homeworld::Assessment, PlannerError> {
        let parsed = vocab.decode_plan(plan, &task.scene);
        Ok(assess(&task.scene, &task.goals, &parsed, cfg.truncate_illegal)?)
    };

    for t in 0..cfg.outer_bound {
        let first_seed = (t == 0).then_some(base_seed);
        let inner = inner_loop(model, vocab, task, &context, &x, cfg, first_seed)?;
        inner_counts.push(inner.iterations);
        let source = cfg.schedule.source(t);
        let mut record = OuterRecord {
            outer_idx: t,
            inner_iters: inner.iterations,
            status: inner.status,
            plan: inner.plan.clone(),
            context_before: context.clone(),
            source,
            feedback: None,
        };
        let Some(source) = source else {
            x = inner.plan;
            outer.push(record);
            break;
        };
        let raw = match source {
            FeedbackSource::Env => {
                let a = score(&inner.plan)?;
                env_interactions += 1;
                let fb = a.feedback.clone();
                last_env = Some((inner.plan.clone(), a));
                fb
            }
            FeedbackSource::WorldModel => world_model
                .expect("checked above")
                .predict(task, &inner.plan)?,
        };
        let noise_seed = base_seed.wrapping_add(0x9E37_79B9 * (t as u64 + 1));
        let feedback = inject_feedback_noise(&raw, cfg.noise_ratio, noise_seed, &task.scene);
        record.feedback = Some(feedback.clone());
        outer.push(record);
        let key = (inner.plan.clone(), feedback.category());
        let repeated = seen.contains(&key);
        seen.push(key);
        let done = feedback.is_success() || repeated;
        let (next, next_context) = outer_step(&inner.plan, &context, feedback, source);
        x = next;
        context = next_context;
        if done {
            break;
        }
    }

    let verdict = match last_env {
        Some((plan, a)) if plan == x => a,
        _ => {
            env_interactions += 1;
            score(&x)?
        }
    };
    Ok(EpisodeResult {
        task_id: task.task_id.clone(),
        refiner_calls: inner_counts.iter().sum(),
        final_plan: x,
        context,
        inner_counts,
        env_interactions,
        outcome: verdict.feedback,
        exec: verdict.exec,
        success: verdict.success,
        gcr: verdict.gcr,
        outer,
    })
}

/// One line of the episode trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub task_id: String,
    pub outer_idx: usize,
    pub inner_iters: usize,
    pub source: Option<FeedbackSource>,
    pub feedback_category: Option<FeedbackCategory>,
    pub plan_text: String,
}

/// Renders plan tokens as canonical plan text, or as raw token names when
/// they do not decode.
pub fn plan_text(vocab: &Vocab, task: &TaskRecord, plan: &[Token]) -> String {
    match vocab.decode_plan(plan, &task.scene) {
        Ok(p) => crate::homeworld::render_plan(&p, &task.scene),
        Err(_) => vocab.render(plan),
    }
}

pub fn trace_lines(vocab: &Vocab, task: &TaskRecord, episode: &EpisodeResult) -> Vec<TraceLine> {
    episode
        .outer
        .iter()
        .map(|r| TraceLine {
            task_id: episode.task_id.clone(),
            outer_idx: r.outer_idx,
            inner_iters: r.inner_iters,
            source: r.source,
            feedback_category: r.feedback.as_ref().map(Feedback::category),
            plan_text: plan_text(vocab, task, &r.plan),
        })
        .collect()
}

pub fn write_trace(out: &mut impl Write, lines: &[TraceLine]) -> std::io::Result<()> {
    for line in lines {
        writeln!(out, "{}", serde_json::to_string(line).expect("trace serializes"))?;
    }
    Ok(())
}

/// Runs [`plan_task`] on every task, spreading tasks over `jobs` threads.
/// Results keep task order and do not depend on `jobs`, since every episode
/// draws from its own seed stream.
pub fn plan_all(
    model: &dyn TokenModel,
    world_model: Option<&dyn FeedbackPredictor>,
    vocab: &Vocab,
    tasks: &[&TaskRecord],
    cfg: &PlannerConfig,
    seed: u64,
    jobs: usize,
) -> Result<Vec<EpisodeResult>, PlannerError> {
    let jobs = jobs.clamp(1, tasks.len().max(1));
    if jobs == 1 {
        return tasks
            .iter()
            .map(|t| plan_task(model, world_model, vocab, t, cfg, seed))
            .collect();
    }
    let mut slots: Vec<Option<Result<EpisodeResult, PlannerError>>> = (0..tasks.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                scope.spawn(move || {
                    (j..tasks.len())
                        .step_by(jobs)
                        .map(|i| (i, plan_task(model, world_model, vocab, tasks[i], cfg, seed)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("planner worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every task planned")).collect()
}
