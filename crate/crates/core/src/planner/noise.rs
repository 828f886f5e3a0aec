use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::homeworld::{
    Action, FailReason, Feedback, FeedbackCategory, ObjectId, Relation, SceneGraph, State, Step,
};

/// With probability `ratio`, replaces `feedback` by a wrong one: either a
/// goal report with substituted objects and relations, or a randomly drawn
/// feedback of a different category. Deterministic per seed.
pub fn inject_feedback_noise(feedback: &Feedback, ratio: f64, seed: u64, scene: &SceneGraph) -> Feedback {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0153_u64.rotate_left(40));
    if rng.gen::<f64>() >= ratio {
        return feedback.clone();
    }
    let ids: Vec<ObjectId> = scene.objects().map(|o| o.id).collect();
    if let Feedback::GoalReport {
        unmet_states,
        wrong_relations,
    } = feedback
    {
        if ids.len() > 1 && rng.gen_bool(0.5) {
            return substitute(unmet_states, wrong_relations, &ids, &mut rng);
        }
    }
    let others: Vec<FeedbackCategory> = FeedbackCategory::ALL
        .into_iter()
        .filter(|&c| c != feedback.category())
        .collect();
    let category = *others.choose(&mut rng).expect("four other categories");
    random_feedback(category, &ids, &mut rng)
}

fn other_id(id: ObjectId, ids: &[ObjectId], rng: &mut ChaCha8Rng) -> ObjectId {
    loop {
        let pick = *ids.choose(rng).expect("nonempty scene");
        if pick != id {
            return pick;
        }
    }
}

fn substitute(
    unmet_states: &[(ObjectId, State)],
    wrong_relations: &[(ObjectId, Relation, ObjectId)],
    ids: &[ObjectId],
    rng: &mut ChaCha8Rng,
) -> Feedback {
    Feedback::GoalReport {
        unmet_states: unmet_states
            .iter()
            .map(|&(o, s)| (other_id(o, ids, rng), s))
            .collect(),
        wrong_relations: wrong_relations
            .iter()
            .map(|&(a, _, b)| {
                let r = *[Relation::Inside, Relation::OnTop].choose(rng).expect("two");
                (other_id(a, ids, rng), r, other_id(b, ids, rng))
            })
            .collect(),
    }
}

fn random_feedback(category: FeedbackCategory, ids: &[ObjectId], rng: &mut ChaCha8Rng) -> Feedback {
    let id = |rng: &mut ChaCha8Rng| *ids.choose(rng).expect("nonempty scene");
    match category {
        FeedbackCategory::Format => Feedback::Format,
        FeedbackCategory::Success => Feedback::Success,
        FeedbackCategory::InvalidCommand => {
            let action = *Action::ALL.choose(rng).expect("actions");
            // One argument too many makes the line invalid for every action.
            let args: Vec<ObjectId> = (0..=action.arity()).map(|_| id(rng)).collect();
            let mut line = format!("[{}]", action.name());
            for a in args {
                line.push_str(&format!(" <object> ({a})"));
            }
            Feedback::InvalidCommand { line }
        }
        FeedbackCategory::ExecutionError => {
            let action = *Action::ALL.choose(rng).expect("actions");
            let args: Vec<ObjectId> = (0..action.arity()).map(|_| id(rng)).collect();
            let step = Step::new(action, &args);
            Feedback::ExecutionError {
                step: rng.gen_range(0..8),
                action: step.action,
                args: step.args,
                reason: FailReason::NotClose(id(rng)),
            }
        }
        FeedbackCategory::GoalReport => Feedback::GoalReport {
            unmet_states: vec![(id(rng), *State::ALL.choose(rng).expect("states"))],
            wrong_relations: vec![],
        },
    }
}
