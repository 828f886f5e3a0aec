//! The sequence refiner: prompt layout, a small causal transformer, and
//! decoding of refined plans.
//!
//! Plans are token triples `(action, id|PAD, id|PAD)` closed by END, so
//! every step has the same width regardless of arity. Prompts carry the
//! task, an id-sorted scene summary, the feedback history most recent first
//! and the current draft.

mod checkpoint;
mod decode;
mod model;
mod prompt;
mod vocab;


use thiserror::Error;

use crate::numerics::NumericsError;

pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, CheckpointMeta};
pub use decode::{
    draft_of, generate_constrained, generate_refinement, sequence_nll, Constraint, CopyDraftModel, DecodeMode,
    DecodePolicy, DecodeState, Generation, TokenModel, DEFAULT_MAX_NEW_TOKENS,
};
pub use model::{ModelConfig, Session, Transformer};
pub use prompt::{encode_prompt, scene_tokens, task_tokens, Prompt, PromptLimit};
pub use vocab::{Token, Vocab, BOS, CHAR, END, FB_EXEC, FB_FORMAT, FB_GOAL, FB_INVALID, FB_SUCCESS, PAD, REL, SEP, STATE};

#[derive(Debug, Error)]
pub enum RefinerError {
    #[error("{segment} segment has {len} tokens, which does not fit a window of {window}")]
    SegmentTooLong {
        segment: &'static str,
        len: usize,
        window: usize,
    },
    #[error("sequence of {len} tokens exceeds the window of {window}")]
    SequenceTooLong { len: usize, window: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token {0} is outside the vocabulary")]
    UnknownToken(usize),
    #[error("model configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Teacher-forced mean cross-entropy of `target` (which ends in END) after
/// `prompt`, with gradients for every parameter.
pub fn sequence_loss(
    model: &Transformer,
    prompt: &[Token],
    target: &[Token],
) -> Result<(f64, crate::numerics::Gradients), RefinerError> {
    if target.last() != Some(&END) {
        return Err(RefinerError::Config("target must end with END".into()));
    }
    model.loss_and_grad(prompt, target)
}
