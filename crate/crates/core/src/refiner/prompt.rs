use crate::homeworld::{Feedback, SceneGraph, TaskRecord};

use super::vocab::{Token, Vocab, BOS, CHAR, SEP};
use super::RefinerError;

/// Length budget for prompts. Feedback is admitted while the prompt stays
/// within `window - reserve`; the remaining segments only need to leave one
/// position for generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptLimit {
    pub window: usize,
    pub reserve: usize,
}

impl Default for PromptLimit {
    fn default() -> Self {
        Self {
            window: 256,
            reserve: 96,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<Token>,
    /// Feedback entries kept, counted from the most recent.
    pub feedback_kept: usize,
}

/// Template kind followed by `(archetype, id)` per task argument.
pub fn task_tokens(vocab: &Vocab, task: &TaskRecord) -> Vec<Token> {
    let mut out = vec![vocab.kind(task.family.kind)];
    for &id in &task.args {
        if let Some(o) = task.scene.object(id) {
            out.push(vocab.archetype(o.archetype));
        }
        out.push(vocab.id(id));
    }
    out
}

/// The character, then each room followed by its objects, all in id order.
/// No relations or states.
pub fn scene_tokens(vocab: &Vocab, scene: &SceneGraph) -> Vec<Token> {
    let mut out = vec![CHAR, vocab.id(scene.character().id)];
    for (room, objects) in scene.by_room() {
        out.push(vocab.room(room.kind));
        out.push(vocab.id(room.id));
        for o in objects {
            out.push(vocab.archetype(o.archetype));
            out.push(vocab.id(o.id));
        }
    }
    out
}

/// `[BOS, task, SEP, scene, SEP, feedback..., SEP, draft, SEP]` with
/// feedback most recent first. Older entries are dropped once the next one
/// would not fit.
pub fn encode_prompt(
    vocab: &Vocab,
    task: &TaskRecord,
    feedback: &[&Feedback],
    draft: &[Token],
    limit: PromptLimit,
) -> Result<Prompt, RefinerError> {
    let task_part = task_tokens(vocab, task);
    let scene_part = scene_tokens(vocab, &task.scene);
    assemble(
        vocab,
        &[("task", task_part), ("scene", scene_part)],
        feedback,
        draft,
        limit,
    )
}

/// Shared layout: fixed leading segments, then feedback, then the draft.
fn assemble(
    vocab: &Vocab,
    leading: &[(&'static str, Vec<Token>)],
    feedback: &[&Feedback],
    draft: &[Token],
    limit: PromptLimit,
) -> Result<Prompt, RefinerError> {
    for (segment, tokens) in leading.iter().map(|(s, t)| (*s, t.len())).chain([("draft", draft.len())]) {
        if tokens + 1 >= limit.window {
            return Err(RefinerError::SegmentTooLong {
                segment,
                len: tokens,
                window: limit.window,
            });
        }
    }
    let fixed: usize = 1 + leading.iter().map(|(_, t)| t.len() + 1).sum::<usize>() + 1 + draft.len() + 1;
    if fixed >= limit.window {
        return Err(RefinerError::SegmentTooLong {
            segment: "prompt",
            len: fixed,
            window: limit.window,
        });
    }
    let budget = limit.window.saturating_sub(limit.reserve);
    let mut used = fixed;
    let mut kept = Vec::new();
    for entry in feedback {
        let tokens = vocab.encode_feedback(entry);
        if used + tokens.len() > budget {
            break;
        }
        used += tokens.len();
        kept.push(tokens);
    }
    let mut tokens = Vec::with_capacity(used);
    tokens.push(BOS);
    for (_, part) in leading {
        tokens.extend_from_slice(part);
        tokens.push(SEP);
    }
    for entry in &kept {
        tokens.extend_from_slice(entry);
    }
    tokens.push(SEP);
    tokens.extend_from_slice(draft);
    tokens.push(SEP);
    Ok(Prompt {
        tokens,
        feedback_kept: kept.len(),
    })
}
