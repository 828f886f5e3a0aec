//! Feedback predictor: the refiner's architecture reading the task, the
//! scene with its relations and states, and a plan, then emitting a
//! feedback token group under a grammar constraint.
//!
//! Layout: `[BOS, task, SEP, scene+, SEP, plan, SEP]` followed by the
//! feedback tokens and END.

use rand::Rng;
use thiserror::Error;

use crate::homeworld::{FailReason, Feedback, Location, Relation, SceneGraph, TaskRecord};
use crate::memory::EquilibriumMemory;
use crate::planner::{FeedbackPredictor, FeedbackSource, PlannerError};
use crate::refiner::{
    generate_constrained, task_tokens, DecodePolicy, ModelConfig, RefinerError, Token, Transformer, Vocab, BOS, CHAR,
    END, FB_EXEC, FB_FORMAT, FB_GOAL, FB_INVALID, FB_SUCCESS, PAD, REL, SEP, STATE,
};

/// Checkpoint role name.
pub const WORLD_MODEL_NAME: &str = "worldmodel";

/// Longest feedback group (an execution error) plus END.
pub const MIN_FEEDBACK_BUDGET: usize = 9;

#[derive(Debug, Error)]
pub enum WorldModelError {
    #[error("the memory holds no environment feedback")]
    NoEnvRecords,
    #[error(transparent)]
    Refiner(#[from] RefinerError),
}

/// Scene summary with structure: the character's relations, then each room
/// with its objects. An object not lying directly in its room names its
/// receptacle; every object lists its states.
pub fn scene_relation_tokens(vocab: &Vocab, scene: &SceneGraph) -> Vec<Token> {
    let ch = scene.character();
    let mut out = vec![CHAR, vocab.id(ch.id), vocab.relation(Relation::Inside), vocab.id(ch.room)];
    for &h in &ch.holding {
        out.extend([vocab.relation(Relation::Holds), vocab.id(h)]);
    }
    if let Some(seat) = ch.sitting_on {
        out.extend([vocab.relation(Relation::OnTop), vocab.id(seat)]);
    }
    for &c in &ch.close {
        out.extend([vocab.relation(Relation::Close), vocab.id(c)]);
    }
    for (room, objects) in scene.by_room() {
        out.push(vocab.room(room.kind));
        out.push(vocab.id(room.id));
        for o in objects {
            out.push(vocab.archetype(o.archetype));
            out.push(vocab.id(o.id));
            match o.location {
                Location::Inside(r) => out.extend([vocab.relation(Relation::Inside), vocab.id(r)]),
                Location::OnTop(r) => out.extend([vocab.relation(Relation::OnTop), vocab.id(r)]),
                Location::Room(_) | Location::Held => {}
            }
            out.extend(o.states.iter().map(|&s| vocab.state(s)));
        }
    }
    out
}

/// Builds the prompt. A plan that would leave less than
/// [`MIN_FEEDBACK_BUDGET`] positions is cut from its end; the fixed segments
/// must fit on their own.
pub fn wm_prompt(vocab: &Vocab, task: &TaskRecord, plan: &[Token], window: usize) -> Result<Vec<Token>, RefinerError> {
    let task_part = task_tokens(vocab, task);
    let scene_part = scene_relation_tokens(vocab, &task.scene);
    let fixed = task_part.len() + scene_part.len() + 4;
    if fixed + MIN_FEEDBACK_BUDGET > window {
        return Err(RefinerError::SegmentTooLong {
            segment: "scene",
            len: scene_part.len(),
            window,
        });
    }
    let keep = plan.len().min(window - MIN_FEEDBACK_BUDGET - fixed);
    let mut out = Vec::with_capacity(fixed + keep);
    out.push(BOS);
    out.extend(task_part);
    out.push(SEP);
    out.extend(scene_part);
    out.push(SEP);
    out.extend_from_slice(&plan[..keep]);
    out.push(SEP);
    Ok(out)
}

/// Target sequence for a recorded feedback.
pub fn wm_target(vocab: &Vocab, feedback: &Feedback) -> Vec<Token> {
    let mut out = vocab.encode_feedback(feedback);
    out.push(END);
    out
}

/// Next-token sets that keep every generated sequence a complete feedback
/// group within `budget` tokens (END included). Object ids are restricted to
/// the scene.
pub struct FeedbackGrammar<'a> {
    vocab: &'a Vocab,
    ids: Vec<Token>,
    budget: usize,
}

impl<'a> FeedbackGrammar<'a> {
    pub fn new(vocab: &'a Vocab, scene: &SceneGraph, budget: usize) -> Self {
        assert!(budget >= MIN_FEEDBACK_BUDGET, "budget below one execution-error group");
        let ids = scene.ids().into_iter().map(|i| vocab.id(i)).collect();
        FeedbackGrammar { vocab, ids, budget }
    }

    fn ids_or_pad(&self) -> Vec<Token> {
        let mut v = vec![PAD];
        v.extend(&self.ids);
        v
    }

    pub fn allowed(&self, generated: &[Token]) -> Vec<Token> {
        let v = self.vocab;
        let Some((&head, rest)) = generated.split_first() else {
            return vec![FB_FORMAT, FB_INVALID, FB_EXEC, FB_GOAL, FB_SUCCESS];
        };
        let n = rest.len();
        match head {
            FB_FORMAT | FB_SUCCESS => end_if(n == 0),
            FB_INVALID => match n {
                0 => std::iter::once(PAD).chain(v.action_tokens()).collect(),
                1 | 2 => self.ids_or_pad(),
                3 => vec![END],
                _ => vec![],
            },
            FB_EXEC => self.exec_allowed(rest),
            FB_GOAL => self.goal_allowed(rest, generated.len()),
            _ => vec![],
        }
    }

    fn exec_allowed(&self, rest: &[Token]) -> Vec<Token> {
        let v = self.vocab;
        let arity = rest.get(1).and_then(|&t| v.as_action(t)).map_or(0, |a| a.arity());
        match rest.len() {
            0 => v.id_tokens().collect(),
            1 => v.action_tokens().collect(),
            2 => if arity >= 1 { self.ids.clone() } else { vec![PAD] },
            3 => if arity >= 2 { self.ids.clone() } else { vec![PAD] },
            4 => v.reason_tokens().collect(),
            5 => {
                let kind = v.as_reason_kind(rest[4]).expect("reason slot");
                self.ids_or_pad()
                    .into_iter()
                    .filter(|&o| self.state_slot(kind, o).next().is_some())
                    .collect()
            }
            6 => {
                let kind = v.as_reason_kind(rest[4]).expect("reason slot");
                self.state_slot(kind, rest[5]).collect()
            }
            7 => vec![END],
            _ => vec![],
        }
    }

    /// State-slot tokens that complete a valid reason for `kind` and `object`.
    fn state_slot(&self, kind: &'static str, object: Token) -> impl Iterator<Item = Token> + '_ {
        let obj = self.vocab.as_id(object);
        std::iter::once(PAD)
            .chain(self.vocab.state_tokens())
            .filter(move |&s| FailReason::from_parts(kind, obj, self.vocab.as_state(s)).is_some())
    }

    fn goal_allowed(&self, rest: &[Token], used: usize) -> Vec<Token> {
        let v = self.vocab;
        // Skip complete groups; a trailing partial group fixes the next slot.
        let mut i = 0;
        let mut seen_rel = false;
        let mut groups = 0;
        while i < rest.len() {
            let width = if rest[i] == STATE { 3 } else { 4 };
            seen_rel |= rest[i] == REL;
            if i + width > rest.len() {
                let pos = rest.len() - i;
                return match (rest[i], pos) {
                    (_, 1) => self.ids.clone(),
                    (STATE, 2) => v.state_tokens().collect(),
                    (REL, 2) => v.relation_tokens().collect(),
                    (REL, 3) => self.ids.clone(),
                    _ => vec![],
                };
            }
            i += width;
            groups += 1;
        }
        // At a group boundary; `used` tokens are already spent.
        let remaining = self.budget - used;
        let mut out = Vec::new();
        if groups > 0 {
            out.push(END);
        }
        if !seen_rel && remaining >= 4 {
            out.push(STATE);
        }
        if remaining >= 5 {
            out.push(REL);
        }
        out
    }
}

fn end_if(cond: bool) -> Vec<Token> {
    if cond {
        vec![END]
    } else {
        vec![]
    }
}

pub struct WorldModel {
    model: Transformer,
    vocab: Vocab,
    max_new_tokens: usize,
}

impl WorldModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, RefinerError> {
        Ok(Self::from_transformer(Transformer::new(config, rng)?))
    }

    pub fn from_transformer(model: Transformer) -> Self {
        WorldModel {
            model,
            vocab: Vocab::new(),
            max_new_tokens: 48,
        }
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Transformer {
        &mut self.model
    }

    pub fn into_model(self) -> Transformer {
        self.model
    }

    pub fn prompt(&self, task: &TaskRecord, plan: &[Token]) -> Result<Vec<Token>, RefinerError> {
        wm_prompt(&self.vocab, task, plan, self.model.config().window)
    }

    /// Greedy grammar-constrained decoding; the result always parses.
    pub fn predict_feedback(&self, task: &TaskRecord, plan: &[Token]) -> Result<Feedback, RefinerError> {
        let prompt = self.prompt(task, plan)?;
        let budget = self.max_new_tokens.max(MIN_FEEDBACK_BUDGET).min(self.model.config().window - prompt.len());
        let grammar = FeedbackGrammar::new(&self.vocab, &task.scene, budget);
        let constraint = |g: &[Token]| grammar.allowed(g);
        let policy = DecodePolicy {
            max_new_tokens: budget,
            ..DecodePolicy::greedy()
        };
        let out = generate_constrained(&self.model, &prompt, policy, Some(&constraint))?;
        let body = out.tokens.strip_suffix(&[END]).expect("grammar closes with END");
        Ok(self
            .vocab
            .decode_feedback(body, &task.scene)
            .expect("grammar output parses"))
    }
}

impl FeedbackPredictor for WorldModel {
    fn predict(&self, task: &TaskRecord, plan: &[Token]) -> Result<Feedback, PlannerError> {
        Ok(self.predict_feedback(task, plan)?)
    }
}

/// One training pair: the plan of an environment-scored record and the
/// feedback the environment returned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WmExample {
    pub record_id: u64,
    pub task_id: String,
    pub plan: Vec<Token>,
    pub target: Vec<Token>,
}

/// Pairs from environment-sourced records in memory order. Records carrying
/// world-model predictions are skipped.
pub fn build_wm_dataset(vocab: &Vocab, memory: &EquilibriumMemory) -> Result<Vec<WmExample>, WorldModelError> {
    let out: Vec<WmExample> = memory
        .iter()
        .filter(|r| r.source == FeedbackSource::Env)
        .map(|r| WmExample {
            record_id: r.id,
            task_id: r.task_id.clone(),
            plan: r.plan.clone(),
            target: wm_target(vocab, &r.feedback),
        })
        .collect();
    if out.is_empty() {
        return Err(WorldModelError::NoEnvRecords);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
