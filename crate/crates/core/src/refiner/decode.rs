use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Session, Transformer};
use super::vocab::{Token, END, SEP};
use super::RefinerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    TopK { k: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodePolicy {
    pub mode: DecodeMode,
    pub max_new_tokens: usize,
}

pub const DEFAULT_MAX_NEW_TOKENS: usize = 96;

impl DecodePolicy {
    pub fn greedy() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }

    pub fn top_k(k: usize, seed: u64) -> Self {
        assert!(k >= 1, "top-k needs k >= 1");
        Self {
            mode: DecodeMode::TopK { k, seed },
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

/// Incremental next-token scoring after a prompt.
pub trait DecodeState {
    fn logits(&self) -> Vec<f64>;
    fn push(&mut self, token: Token) -> Result<(), RefinerError>;
}

/// Anything that scores continuations of a token prompt.
pub trait TokenModel: Sync {
    fn vocab_size(&self) -> usize;
    fn window(&self) -> usize;
    fn begin<'a>(&'a self, prompt: &[Token]) -> Result<Box<dyn DecodeState + 'a>, RefinerError>;
}

impl DecodeState for Session<'_> {
    fn logits(&self) -> Vec<f64> {
        Session::logits(self)
    }

    fn push(&mut self, token: Token) -> Result<(), RefinerError> {
        Session::push(self, token)
    }
}

impl TokenModel for Transformer {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn window(&self) -> usize {
        self.config().window
    }

    fn begin<'a>(&'a self, prompt: &[Token]) -> Result<Box<dyn DecodeState + 'a>, RefinerError> {
        if prompt.is_empty() {
            return Err(RefinerError::EmptySequence);
        }
        let mut s = self.session();
        for &t in prompt {
            s.push(t)?;
        }
        Ok(Box::new(s))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<Token>,
    /// No END within the budget.
    pub overlong: bool,
}

/// Restricts the next token given what has been generated so far.
pub type Constraint<'a> = &'a dyn Fn(&[Token]) -> Vec<Token>;

fn argmax(logits: &[f64], allowed: Option<&[Token]>) -> Token {
    let mut best: Option<(Token, f64)> = None;
    let mut consider = |t: Token| {
        if best.is_none_or(|(_, v)| logits[t] > v) {
            best = Some((t, logits[t]));
        }
    };
    match allowed {
        Some(list) => list.iter().copied().for_each(&mut consider),
        None => (0..logits.len()).for_each(&mut consider),
    }
    best.expect("nonempty candidate set").0
}

fn sample_top_k(logits: &[f64], allowed: Option<&[Token]>, k: usize, rng: &mut ChaCha8Rng) -> Token {
    let mut candidates: Vec<Token> = match allowed {
        Some(list) => list.to_vec(),
        None => (0..logits.len()).collect(),
    };
    // Stable: ties keep the lower token first.
    candidates.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    candidates.truncate(k.max(1));
    let max = logits[candidates[0]];
    let weights: Vec<f64> = candidates.iter().map(|&t| (logits[t] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&t, w) in candidates.iter().zip(&weights) {
        if u < *w {
            return t;
        }
        u -= w;
    }
    *candidates.last().expect("k >= 1")
}

/// Autoregressive decoding until END or the budget, which is the smaller of
/// `max_new_tokens` and the room left in the window.
pub fn generate_refinement(
    model: &dyn TokenModel,
    prompt: &[Token],
    policy: DecodePolicy,
) -> Result<Generation, RefinerError> {
    generate_constrained(model, prompt, policy, None)
}

pub fn generate_constrained(
    model: &dyn TokenModel,
    prompt: &[Token],
    policy: DecodePolicy,
    constraint: Option<Constraint<'_>>,
) -> Result<Generation, RefinerError> {
    if prompt.len() >= model.window() {
        return Err(RefinerError::SequenceTooLong {
            len: prompt.len(),
            window: model.window(),
        });
    }
    let budget = policy.max_new_tokens.min(model.window() - prompt.len());
    let mut rng = match policy.mode {
        DecodeMode::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        DecodeMode::Greedy => None,
    };
    let mut state = model.begin(prompt)?;
    let mut tokens = Vec::new();
    while tokens.len() < budget {
        let logits = state.logits();
        let allowed = constraint.map(|c| c(&tokens));
        if allowed.as_ref().is_some_and(Vec::is_empty) {
            break;
        }
        let next = match (policy.mode, rng.as_mut()) {
            (DecodeMode::TopK { k, .. }, Some(rng)) => sample_top_k(&logits, allowed.as_deref(), k, rng),
            _ => argmax(&logits, allowed.as_deref()),
        };
        tokens.push(next);
        if next == END {
            return Ok(Generation {
                tokens,
                overlong: false,
            });
        }
        if tokens.len() < budget {
            state.push(next)?;
        }
    }
    Ok(Generation {
        tokens,
        overlong: true,
    })
}

/// Mean negative log-likelihood of `target` after `prompt` under any model.
pub fn sequence_nll(model: &dyn TokenModel, prompt: &[Token], target: &[Token]) -> Result<f64, RefinerError> {
    if target.is_empty() {
        return Err(RefinerError::EmptySequence);
    }
    if prompt.len() + target.len() - 1 > model.window() {
        return Err(RefinerError::SequenceTooLong {
            len: prompt.len() + target.len() - 1,
            window: model.window(),
        });
    }
    let mut state = model.begin(prompt)?;
    let mut total = 0.0;
    for (i, &t) in target.iter().enumerate() {
        let logits = state.logits();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[t];
        if i + 1 < target.len() {
            state.push(t)?;
        }
    }
    Ok(total / target.len() as f64)
}

/// Copies the draft segment of a prompt and then emits END: the logit of
/// the aligned draft token is `margin`, every other logit is zero. Every
/// terminated draft is a fixed point of refinement under this model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CopyDraftModel {
    pub vocab_size: usize,
    pub window: usize,
    pub margin: f64,
}

impl CopyDraftModel {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            window: 256,
            margin: 20.0,
        }
    }
}

/// The draft segment: tokens between the last two SEPs, up to and
/// including the first END.
pub fn draft_of(prompt: &[Token]) -> Vec<Token> {
    let seps: Vec<usize> = prompt
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == SEP)
        .map(|(i, _)| i)
        .collect();
    let draft: &[Token] = match seps.as_slice() {
        [.., a, b] => &prompt[a + 1..*b],
        _ => &[],
    };
    match draft.iter().position(|&t| t == END) {
        Some(e) => draft[..=e].to_vec(),
        None => draft.to_vec(),
    }
}

struct CopyState {
    draft: Vec<Token>,
    emitted: usize,
    vocab_size: usize,
    margin: f64,
}

impl DecodeState for CopyState {
    fn logits(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab_size];
        // Unterminated drafts are copied and then closed.
        let next = self.draft.get(self.emitted).copied().unwrap_or(END);
        out[next] = self.margin;
        out
    }

    fn push(&mut self, _token: Token) -> Result<(), RefinerError> {
        self.emitted += 1;
        Ok(())
    }
}

impl TokenModel for CopyDraftModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn window(&self) -> usize {
        self.window
    }

    fn begin<'a>(&'a self, prompt: &[Token]) -> Result<Box<dyn DecodeState + 'a>, RefinerError> {
        Ok(Box::new(CopyState {
            draft: draft_of(prompt),
            emitted: 0,
            vocab_size: self.vocab_size,
            margin: self.margin,
        }))
    }
}
