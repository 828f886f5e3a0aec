use super::*;
use crate::homeworld::{execute_plan, generate_tasks, Action, FeedbackCategory, SizeClass};
use crate::refiner::{draft_of, CopyDraftModel, DecodeState, END, PAD};

fn tasks() -> Vec<TaskRecord> {
    generate_tasks(12, 4, SizeClass::Small, 3).expect("tasks")
}

/// Emits a fixed token sequence regardless of the prompt.
struct ConstModel(Vec<Token>);

struct Replay {
    tokens: Vec<Token>,
    at: usize,
}

impl DecodeState for Replay {
    fn logits(&self) -> Vec<f64> {
        let mut out = vec![0.0; Vocab::new().len()];
        out[self.tokens.get(self.at).copied().unwrap_or(END)] = 10.0;
        out
    }

    fn push(&mut self, _token: Token) -> Result<(), RefinerError> {
        self.at += 1;
        Ok(())
    }
}

impl TokenModel for ConstModel {
    fn vocab_size(&self) -> usize {
        Vocab::new().len()
    }
    fn window(&self) -> usize {
        256
    }
    fn begin<'a>(&'a self, _prompt: &[Token]) -> Result<Box<dyn DecodeState + 'a>, RefinerError> {
        Ok(Box::new(Replay {
            tokens: self.0.clone(),
            at: 0,
        }))
    }
}

/// Alternates between two plans: `a` unless the draft is `a`.
struct Period2 {
    a: Vec<Token>,
    b: Vec<Token>,
}

impl TokenModel for Period2 {
    fn vocab_size(&self) -> usize {
        Vocab::new().len()
    }
    fn window(&self) -> usize {
        256
    }
    fn begin<'a>(&'a self, prompt: &[Token]) -> Result<Box<dyn DecodeState + 'a>, RefinerError> {
        let tokens = if draft_of(prompt) == self.a { self.b.clone() } else { self.a.clone() };
        Ok(Box::new(Replay { tokens, at: 0 }))
    }
}

/// Appends one WALK step to its draft on every call.
struct Grow(Token);

impl TokenModel for Grow {
    fn vocab_size(&self) -> usize {
        Vocab::new().len()
    }
    fn window(&self) -> usize {
        256
    }
    fn begin<'a>(&'a self, prompt: &[Token]) -> Result<Box<dyn DecodeState + 'a>, RefinerError> {
        let mut tokens = draft_of(prompt);
        tokens.retain(|&t| t != END);
        tokens.extend([Vocab::new().action(Action::Walk), self.0, PAD, END]);
        Ok(Box::new(Replay { tokens, at: 0 }))
    }
}

struct ConstPredictor(Feedback);

impl FeedbackPredictor for ConstPredictor {
    fn predict(&self, _task: &TaskRecord, _plan: &[Token]) -> Result<Feedback, PlannerError> {
        Ok(self.0.clone())
    }
}

#[test]
fn copy_model_converges_on_second_refinement() {
    let v = Vocab::new();
    let task = &tasks()[0];
    let copy = CopyDraftModel::new(v.len());
    let out = inner_loop(&copy, &v, task, &ContextHistory::new(), &[], &PlannerConfig::default(), None).unwrap();
    assert_eq!(out.iterations, 2);
    assert_eq!(out.status, SequenceStatus::Converged);
    assert_eq!(out.plan, vec![END]);
}

#[test]
fn period_two_model_stops_on_cycle() {
    let v = Vocab::new();
    let task = &tasks()[0];
    let a = v.encode_plan(&task.gt_plan);
    let b = vec![END];
    let model = Period2 { a: a.clone(), b };
    let out = inner_loop(&model, &v, task, &ContextHistory::new(), &[], &PlannerConfig::default(), None).unwrap();
    assert_eq!(out.status, SequenceStatus::Cycle(2));
    assert_eq!(out.iterations, 3);
    assert_eq!(out.plan, a);
}

#[test]
fn inner_loop_respects_its_bound() {
    let v = Vocab::new();
    let task = &tasks()[0];
    let cfg = PlannerConfig {
        inner_bound: 3,
        ..PlannerConfig::default()
    };
    let out = inner_loop(&Grow(v.id(task.args[0])), &v, task, &ContextHistory::new(), &[], &cfg, None).unwrap();
    assert_eq!(out.iterations, 3);
    assert_eq!(out.status, SequenceStatus::Continue);
}

#[test]
fn outer_step_reuses_equilibrium_and_prepends() {
    let entry = |fb: Feedback| ContextEntry {
        plan: vec![END],
        feedback: fb,
        source: FeedbackSource::Env,
    };
    let context = ContextHistory::new()
        .prepended(entry(Feedback::Format))
        .prepended(entry(Feedback::Success));
    let x = vec![7, 8, 9, END];
    let (next, c) = outer_step(&x, &context, Feedback::Format, FeedbackSource::WorldModel);
    assert_eq!(next, x);
    assert_eq!(c.len(), 3);
    assert_eq!(c.entries()[0].plan, x);
    assert_eq!(c.entries()[0].source, FeedbackSource::WorldModel);
    assert_eq!(&c.entries()[1..], context.entries());
}

#[test]
fn immediate_success_uses_one_interaction() {
    let v = Vocab::new();
    let task = &tasks()[1];
    let oracle = ConstModel(v.encode_plan(&task.gt_plan));
    let ep = plan_task(&oracle, None, &v, task, &PlannerConfig::default(), 0).unwrap();
    assert!(ep.success);
    assert_eq!(ep.env_interactions, 1);
    assert_eq!(ep.outer.len(), 1);
    assert_eq!(ep.refiner_calls, ep.inner_counts.iter().sum::<usize>());
}

#[test]
fn no_feedback_schedule_scores_once() {
    let v = Vocab::new();
    let task = &tasks()[2];
    let cfg = PlannerConfig {
        schedule: FeedbackSchedule::None,
        ..PlannerConfig::default()
    };
    let ep = plan_task(&Grow(v.id(task.args[0])), None, &v, task, &cfg, 0).unwrap();
    assert_eq!(ep.env_interactions, 1);
    assert_eq!(ep.outer.len(), 1);
    assert!(ep.context.is_empty());
}

#[test]
fn alternating_schedule_tags_sources() {
    let v = Vocab::new();
    let task = &tasks()[3];
    let wm = ConstPredictor(Feedback::GoalReport {
        unmet_states: vec![],
        wrong_relations: task.goals.relations.clone(),
    });
    for (env_first, expected) in [
        (true, [FeedbackSource::Env, FeedbackSource::WorldModel, FeedbackSource::Env, FeedbackSource::WorldModel]),
        (false, [FeedbackSource::WorldModel, FeedbackSource::Env, FeedbackSource::WorldModel, FeedbackSource::Env]),
    ] {
        let cfg = PlannerConfig {
            outer_bound: 4,
            inner_bound: 2,
            schedule: FeedbackSchedule::Alternate { env_first },
            ..PlannerConfig::default()
        };
        let ep = plan_task(&Grow(v.id(task.args[0])), Some(&wm), &v, task, &cfg, 0).unwrap();
        let tags: Vec<FeedbackSource> = ep.context.entries().iter().rev().map(|e| e.source).collect();
        assert_eq!(tags, expected);
        let env_entries = tags.iter().filter(|&&s| s == FeedbackSource::Env).count();
        // When the world model spoke last, scoring executes once more.
        assert_eq!(ep.env_interactions, env_entries + usize::from(env_first));
        assert!(ep.env_interactions <= cfg.outer_bound);
    }
}

#[test]
fn world_model_schedule_requires_world_model() {
    let v = Vocab::new();
    let task = &tasks()[0];
    let cfg = PlannerConfig {
        schedule: FeedbackSchedule::WmOnly,
        ..PlannerConfig::default()
    };
    assert!(matches!(
        plan_task(&CopyDraftModel::new(v.len()), None, &v, task, &cfg, 0),
        Err(PlannerError::MissingWorldModel)
    ));
}

#[test]
fn env_entries_match_environment_and_warm_start() {
    let v = Vocab::new();
    for task in tasks() {
        let cfg = PlannerConfig {
            outer_bound: 4,
            inner_bound: 2,
            ..PlannerConfig::default()
        };
        let ep = plan_task(&Grow(v.id(task.args[0])), None, &v, &task, &cfg, 5).unwrap();
        let envs = ep.context.entries().iter().filter(|e| e.source == FeedbackSource::Env).count();
        assert_eq!(envs, ep.env_interactions);
        for entry in ep.context.entries() {
            let parsed = v.decode_plan(&entry.plan, &task.scene);
            let truth = assess(&task.scene, &task.goals, &parsed, false).unwrap().feedback;
            assert_eq!(entry.feedback, truth);
        }
        // Each inner loop starts from the previous equilibrium: the grow
        // model extends it by exactly one step per refinement.
        for pair in ep.outer.windows(2) {
            let prev = &pair[0].plan;
            let next = &pair[1].plan;
            assert_eq!(&next[..prev.len() - 1], &prev[..prev.len() - 1]);
            assert_eq!(next.len(), prev.len() + 3 * pair[1].inner_iters);
        }
        let lines = trace_lines(&v, &task, &ep);
        assert_eq!(lines.len(), ep.outer.len());
        let mut buf = Vec::new();
        write_trace(&mut buf, &lines).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), lines.len());
    }
}

#[test]
fn repeated_outcome_ends_the_outer_loop() {
    let v = Vocab::new();
    let task = &tasks()[4];
    let bad = ConstModel(vec![END]);
    let ep = plan_task(&bad, None, &v, task, &PlannerConfig::default(), 0).unwrap();
    assert_eq!(ep.outer.len(), 2);
    assert_eq!(ep.env_interactions, 2);
    assert!(!ep.success);
    assert_eq!(ep.outcome.category(), FeedbackCategory::GoalReport);
}

#[test]
fn zero_noise_is_identity() {
    let task = &tasks()[0];
    let samples = [
        Feedback::Format,
        Feedback::Success,
        Feedback::GoalReport {
            unmet_states: vec![],
            wrong_relations: task.goals.relations.clone(),
        },
    ];
    for (i, fb) in samples.iter().enumerate() {
        for seed in 0..50 {
            assert_eq!(&inject_feedback_noise(fb, 0.0, seed + i as u64, &task.scene), fb);
        }
    }
}

#[test]
fn full_noise_always_corrupts() {
    let task = &tasks()[0];
    let report = assess(&task.scene, &task.goals, &Ok(crate::homeworld::Plan::default()), false)
        .unwrap()
        .feedback;
    let exec_error = {
        let mut plan = task.gt_plan.clone();
        plan.steps.remove(0);
        let run = execute_plan(&task.scene, &plan);
        assert!(run.failure.is_some() || !run.trace.is_empty());
        assess(&task.scene, &task.goals, &Ok(plan), false).unwrap().feedback
    };
    for fb in [Feedback::Format, Feedback::Success, report, exec_error] {
        for seed in 0..200 {
            assert_ne!(inject_feedback_noise(&fb, 1.0, seed, &task.scene), fb);
        }
    }
}

#[test]
fn noise_rate_matches_ratio() {
    let task = &tasks()[0];
    let n = 10_000;
    let corrupted = (0..n)
        .filter(|&s| inject_feedback_noise(&Feedback::Success, 0.1, s, &task.scene) != Feedback::Success)
        .count();
    let rate = corrupted as f64 / n as f64;
    assert!((rate - 0.1).abs() <= 0.01, "rate {rate}");
}

#[test]
fn episodes_are_deterministic_per_seed() {
    let v = Vocab::new();
    let task = &tasks()[5];
    let m = crate::refiner::Transformer::new(
        crate::refiner::ModelConfig::default(),
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2),
    )
    .unwrap();
    let cfg = PlannerConfig {
        outer_bound: 2,
        inner_bound: 2,
        max_new_tokens: 24,
        ..PlannerConfig::default()
    };
    let a = plan_task(&m, None, &v, task, &cfg, 9).unwrap();
    let b = plan_task(&m, None, &v, task, &cfg, 9).unwrap();
    assert_eq!(a, b);
}
