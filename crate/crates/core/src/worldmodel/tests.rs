use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::eqgrad::{Adam, AdamConfig, Optimizer};
use crate::homeworld::{assess, generate_tasks, ObjectId, Plan, SizeClass};
use crate::memory::NewRecord;
use crate::planner::ContextHistory;
use crate::refiner::sequence_loss;

fn tasks() -> Vec<TaskRecord> {
    generate_tasks(20, 5, SizeClass::Small, 11).expect("tasks")
}

fn small_config(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        d_model: 32,
        heads: 2,
        blocks: 1,
        ffn_hidden: 64,
        window: 256,
    }
}

fn mentioned_ids(feedback: &Feedback) -> Vec<ObjectId> {
    let mut ids = Vec::new();
    match feedback {
        Feedback::ExecutionError { args, reason, .. } => {
            ids.extend(args);
            ids.extend(reason.object());
        }
        Feedback::GoalReport {
            unmet_states,
            wrong_relations,
        } => {
            ids.extend(unmet_states.iter().map(|s| s.0));
            for &(a, _, b) in wrong_relations {
                ids.extend([a, b]);
            }
        }
        _ => {}
    }
    ids
}

/// Feedback the environment gives for truncated and shuffled ground truths.
fn environment_feedback(vocab: &Vocab, task: &TaskRecord, rng: &mut ChaCha8Rng) -> (Vec<Token>, Feedback) {
    let mut steps = task.gt_plan.steps.clone();
    match rng.gen_range(0..3) {
        0 => steps.truncate(rng.gen_range(0..=steps.len())),
        1 if steps.len() > 1 => {
            let i = rng.gen_range(0..steps.len());
            steps.remove(i);
        }
        _ => {}
    }
    let plan = Plan::new(steps);
    let fb = assess(&task.scene, &task.goals, &Ok(plan.clone()), false).unwrap().feedback;
    (vocab.encode_plan(&plan), fb)
}

#[test]
fn scenes_fit_the_window() {
    let v = Vocab::new();
    for task in tasks() {
        let p = wm_prompt(&v, &task, &v.encode_plan(&task.gt_plan), 256).unwrap();
        assert!(p.len() + MIN_FEEDBACK_BUDGET <= 256, "{}", p.len());
    }
}

#[test]
fn long_plans_are_cut_to_leave_room() {
    let v = Vocab::new();
    let task = &tasks()[0];
    let plan = vec![v.action(crate::homeworld::Action::Walk); 400];
    let p = wm_prompt(&v, task, &plan, 256).unwrap();
    assert_eq!(p.len(), 256 - MIN_FEEDBACK_BUDGET);
    assert_eq!(*p.last().unwrap(), SEP);
}

#[test]
fn grammar_accepts_every_environment_feedback() {
    let v = Vocab::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut categories = std::collections::BTreeSet::new();
    for task in tasks() {
        for _ in 0..10 {
            let (_, fb) = environment_feedback(&v, &task, &mut rng);
            categories.insert(fb.category());
            let target = wm_target(&v, &fb);
            let grammar = FeedbackGrammar::new(&v, &task.scene, 48);
            for i in 0..target.len() {
                assert!(grammar.allowed(&target[..i]).contains(&target[i]), "{fb:?} at {i}");
            }
        }
    }
    assert!(categories.len() >= 3, "{categories:?}");
    for fb in [Feedback::Format, Feedback::Success] {
        let t = wm_target(&v, &fb);
        let grammar = FeedbackGrammar::new(&v, &tasks()[0].scene, MIN_FEEDBACK_BUDGET);
        assert!(grammar.allowed(&[]).contains(&t[0]));
        assert_eq!(grammar.allowed(&t[..1]), vec![END]);
    }
}

#[test]
fn untrained_predictions_always_parse() {
    let v = Vocab::new();
    let all = tasks();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut seen = std::collections::BTreeSet::new();
    for model_seed in 0..4u64 {
        let wm = WorldModel::new(small_config(&v), &mut ChaCha8Rng::seed_from_u64(model_seed)).unwrap();
        for _ in 0..250 {
            let task = &all[rng.gen_range(0..all.len())];
            let len = rng.gen_range(0..60);
            let plan: Vec<Token> = (0..len).map(|_| rng.gen_range(0..v.len())).collect();
            let fb = wm.predict_feedback(task, &plan).unwrap();
            seen.insert(fb.category());
            for id in mentioned_ids(&fb) {
                assert!(task.scene.ids().contains(&id));
            }
            assert!(v.decode_feedback(&v.encode_feedback(&fb), &task.scene).is_some());
        }
    }
    assert!(!seen.is_empty());
}

#[test]
fn forced_long_goal_reports_stay_within_budget() {
    let v = Vocab::new();
    let task = &tasks()[0];
    let grammar = FeedbackGrammar::new(&v, &task.scene, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let mut out = vec![];
        loop {
            let allowed = grammar.allowed(&out);
            assert!(!allowed.is_empty(), "{out:?}");
            // Prefer to keep the group open as long as possible.
            let pick = if out.is_empty() {
                FB_GOAL
            } else if allowed.len() > 1 && allowed.contains(&END) {
                *allowed.iter().filter(|&&t| t != END).nth(rng.gen_range(0..allowed.len() - 1)).unwrap()
            } else {
                allowed[rng.gen_range(0..allowed.len())]
            };
            out.push(pick);
            if pick == END {
                break;
            }
        }
        assert!(out.len() <= 20);
        assert!(v.decode_feedback(&out[..out.len() - 1], &task.scene).is_some());
    }
}

#[test]
fn predictions_are_deterministic() {
    let v = Vocab::new();
    let task = &tasks()[1];
    let wm = WorldModel::new(small_config(&v), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let plan = v.encode_plan(&task.gt_plan);
    assert_eq!(wm.predict_feedback(task, &plan).unwrap(), wm.predict_feedback(task, &plan).unwrap());
}

#[test]
fn overfits_a_single_goal_report() {
    let v = Vocab::new();
    let task = &tasks()[2];
    let plan = Plan::new(task.gt_plan.steps[..1].to_vec());
    let fb = assess(&task.scene, &task.goals, &Ok(plan.clone()), false).unwrap().feedback;
    assert!(matches!(fb, Feedback::GoalReport { .. }));
    let mut wm = WorldModel::new(small_config(&v), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let tokens = v.encode_plan(&plan);
    let prompt = wm.prompt(task, &tokens).unwrap();
    let target = wm_target(&v, &fb);
    let mut adam = Adam::new(AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    });
    let mut loss = f64::INFINITY;
    for _ in 0..150 {
        let (l, grads) = sequence_loss(wm.model(), &prompt, &target).unwrap();
        loss = l;
        if loss < 1e-3 {
            break;
        }
        adam.step(wm.model_mut().params_mut(), &grads).unwrap();
    }
    assert!(loss < 1e-2, "loss {loss}");
    assert_eq!(wm.predict_feedback(task, &tokens).unwrap(), fb);
}

fn record(task: &TaskRecord, plan: Vec<Token>, fb: Feedback, source: FeedbackSource, iteration: usize) -> NewRecord {
    NewRecord {
        task_id: task.task_id.clone(),
        plan,
        context: ContextHistory::new(),
        feedback: fb,
        source,
        iteration,
    }
}

#[test]
fn dataset_keeps_environment_records_only() {
    let v = Vocab::new();
    let all = tasks();
    let mut memory = EquilibriumMemory::new();
    assert!(matches!(build_wm_dataset(&v, &memory), Err(WorldModelError::NoEnvRecords)));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut envs = Vec::new();
    for (i, source) in [
        FeedbackSource::Env,
        FeedbackSource::WorldModel,
        FeedbackSource::Env,
        FeedbackSource::WorldModel,
        FeedbackSource::Env,
    ]
    .into_iter()
    .enumerate()
    {
        let (plan, fb) = environment_feedback(&v, &all[i], &mut rng);
        if source == FeedbackSource::Env {
            envs.push(fb.clone());
        }
        memory.append(record(&all[i], plan, fb, source, 0)).unwrap();
    }
    let data = build_wm_dataset(&v, &memory).unwrap();
    assert_eq!(data.len(), 3);
    for (ex, fb) in data.iter().zip(&envs) {
        assert_eq!(v.render(&ex.target), format!("{} <END>", v.render(&v.encode_feedback(fb))));
        assert_eq!(ex.task_id, memory.get(ex.record_id).unwrap().task_id);
    }
    let mut wm_only = EquilibriumMemory::new();
    wm_only
        .append(record(&all[0], vec![END], Feedback::Format, FeedbackSource::WorldModel, 0))
        .unwrap();
    assert!(matches!(build_wm_dataset(&v, &wm_only), Err(WorldModelError::NoEnvRecords)));
}

#[test]
fn dataset_is_reproducible() {
    use sha2::{Digest, Sha256};
    let v = Vocab::new();
    let all = tasks();
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut memory = EquilibriumMemory::new();
        for i in 0..1000 {
            let task = &all[i % all.len()];
            let (plan, fb) = environment_feedback(&v, task, &mut rng);
            let source = if i % 3 == 0 { FeedbackSource::WorldModel } else { FeedbackSource::Env };
            memory.append(record(task, plan, fb, source, i / 200)).unwrap();
        }
        let mut h = Sha256::new();
        for ex in build_wm_dataset(&v, &memory).unwrap() {
            h.update(format!("{}|{}|{:?}|{:?}\n", ex.record_id, ex.task_id, ex.plan, ex.target));
        }
        hex::encode(h.finalize())
    };
    assert_eq!(build(), build());
}
