//! Token inventory and the token forms of plans and feedback.

use std::collections::BTreeMap;

use crate::homeworld::{
    Action, Archetype, FailReason, Feedback, ObjectId, Plan, Relation, RoomKind, SceneGraph, State,
    Step, TaskKind, MAX_IDS,
};

pub type Token = usize;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const SEP: Token = 2;
pub const END: Token = 3;
pub const FB_FORMAT: Token = 4;
pub const FB_INVALID: Token = 5;
pub const FB_EXEC: Token = 6;
pub const FB_GOAL: Token = 7;
pub const FB_SUCCESS: Token = 8;
pub const STATE: Token = 9;
pub const REL: Token = 10;
pub const CHAR: Token = 11;

const STRUCTURAL: [&str; 12] = [
    "<PAD>",
    "<BOS>",
    "<SEP>",
    "<END>",
    "<FB_FORMAT>",
    "<FB_INVALID>",
    "<FB_EXEC>",
    "<FB_GOAL>",
    "<FB_SUCCESS>",
    "<STATE>",
    "<REL>",
    "<CHAR>",
];

/// Dense token ids. The layout is fixed by the catalogs: structural tokens,
/// then actions, archetypes, rooms, ids, task kinds, states, relations and
/// failure reasons, each block in declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: BTreeMap<String, Token>,
    action_base: Token,
    arch_base: Token,
    room_base: Token,
    id_base: Token,
    kind_base: Token,
    state_base: Token,
    rel_base: Token,
    reason_base: Token,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut names: Vec<String> = STRUCTURAL.iter().map(|s| s.to_string()).collect();
        let block = |names: &mut Vec<String>, items: Vec<String>| {
            let base = names.len();
            names.extend(items);
            base
        };
        let action_base = block(&mut names, Action::ALL.iter().map(|a| format!("[{}]", a.name())).collect());
        let arch_base = block(&mut names, Archetype::ALL.iter().map(|a| a.name().to_string()).collect());
        let room_base = block(&mut names, RoomKind::ALL.iter().map(|r| format!("room:{}", r.name())).collect());
        let id_base = block(&mut names, (0..MAX_IDS).map(|i| format!("#{i}")).collect());
        let kind_base = block(&mut names, TaskKind::ALL.iter().map(|k| format!("task:{}", k.name())).collect());
        let state_base = block(&mut names, State::ALL.iter().map(|s| format!("state:{}", s.name())).collect());
        let rel_base = block(&mut names, Relation::ALL.iter().map(|r| format!("rel:{}", r.name())).collect());
        let reason_base = block(&mut names, FailReason::KINDS.iter().map(|k| format!("why:{k}")).collect());
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Vocab {
            names,
            index,
            action_base,
            arch_base,
            room_base,
            id_base,
            kind_base,
            state_base,
            rel_base,
            reason_base,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, token: Token) -> Option<&str> {
        self.names.get(token).map(String::as_str)
    }

    pub fn lookup(&self, name: &str) -> Option<Token> {
        self.index.get(name).copied()
    }

    /// Token names joined by spaces.
    pub fn render(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .map(|&t| self.name(t).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Inverse of [`render`](Self::render).
    pub fn parse(&self, text: &str) -> Result<Vec<Token>, String> {
        text.split_whitespace()
            .map(|w| self.lookup(w).ok_or_else(|| format!("unknown token `{w}`")))
            .collect()
    }

    /// Token → id map for serialization next to checkpoints.
    pub fn to_map(&self) -> BTreeMap<String, Token> {
        self.index.clone()
    }

    pub fn action(&self, a: Action) -> Token {
        self.action_base + position(&Action::ALL, &a)
    }

    pub fn archetype(&self, a: Archetype) -> Token {
        self.arch_base + position(Archetype::ALL, &a)
    }

    pub fn room(&self, r: RoomKind) -> Token {
        self.room_base + position(&RoomKind::ALL, &r)
    }

    /// Id token; ids are bounded by `MAX_IDS` across the scene generator.
    pub fn id(&self, id: ObjectId) -> Token {
        assert!(id < MAX_IDS, "id {id} outside the id token range");
        self.id_base + id as usize
    }

    /// Small integers reuse the id tokens, saturating at the top id.
    pub fn number(&self, n: usize) -> Token {
        self.id_base + n.min(MAX_IDS as usize - 1)
    }

    pub fn kind(&self, k: TaskKind) -> Token {
        self.kind_base + position(&TaskKind::ALL, &k)
    }

    pub fn state(&self, s: State) -> Token {
        self.state_base + position(&State::ALL, &s)
    }

    pub fn relation(&self, r: Relation) -> Token {
        self.rel_base + position(&Relation::ALL, &r)
    }

    pub fn reason_kind(&self, kind: &str) -> Option<Token> {
        FailReason::KINDS
            .iter()
            .position(|k| *k == kind)
            .map(|i| self.reason_base + i)
    }

    fn in_block(&self, token: Token, base: Token, len: usize) -> Option<usize> {
        (token >= base && token < base + len).then(|| token - base)
    }

    pub fn as_action(&self, token: Token) -> Option<Action> {
        self.in_block(token, self.action_base, Action::ALL.len())
            .map(|i| Action::ALL[i])
    }

    pub fn as_id(&self, token: Token) -> Option<ObjectId> {
        self.in_block(token, self.id_base, MAX_IDS as usize)
            .map(|i| i as ObjectId)
    }

    pub fn as_state(&self, token: Token) -> Option<State> {
        self.in_block(token, self.state_base, State::ALL.len())
            .map(|i| State::ALL[i])
    }

    pub fn as_relation(&self, token: Token) -> Option<Relation> {
        self.in_block(token, self.rel_base, Relation::ALL.len())
            .map(|i| Relation::ALL[i])
    }

    pub fn as_reason_kind(&self, token: Token) -> Option<&'static str> {
        self.in_block(token, self.reason_base, FailReason::KINDS.len())
            .map(|i| FailReason::KINDS[i])
    }

    pub fn id_tokens(&self) -> std::ops::Range<Token> {
        self.id_base..self.id_base + MAX_IDS as usize
    }

    pub fn action_tokens(&self) -> std::ops::Range<Token> {
        self.action_base..self.action_base + Action::ALL.len()
    }

    pub fn state_tokens(&self) -> std::ops::Range<Token> {
        self.state_base..self.state_base + State::ALL.len()
    }

    pub fn relation_tokens(&self) -> std::ops::Range<Token> {
        self.rel_base..self.rel_base + Relation::ALL.len()
    }

    pub fn reason_tokens(&self) -> std::ops::Range<Token> {
        self.reason_base..self.reason_base + FailReason::KINDS.len()
    }

    fn step_tokens(&self, step: &Step, out: &mut Vec<Token>) {
        out.push(self.action(step.action));
        for slot in 0..2 {
            out.push(step.args.get(slot).map_or(PAD, |&id| self.id(id)));
        }
    }

    /// Step triples followed by END.
    pub fn encode_plan(&self, plan: &Plan) -> Vec<Token> {
        let mut out = Vec::with_capacity(3 * plan.len() + 1);
        for step in &plan.steps {
            self.step_tokens(step, &mut out);
        }
        out.push(END);
        out
    }

    /// Reads generated plan tokens against `scene`. A missing END, tokens
    /// after END, or a triple that does not start with an action is a format
    /// error. A well-shaped triple with the wrong arity or an id that is not
    /// an object in the scene is an invalid command.
    pub fn decode_plan(&self, tokens: &[Token], scene: &SceneGraph) -> Result<Plan, Feedback> {
        let Some(end) = tokens.iter().position(|&t| t == END) else {
            return Err(Feedback::Format);
        };
        if end + 1 != tokens.len() || end % 3 != 0 {
            return Err(Feedback::Format);
        }
        let mut steps = Vec::with_capacity(end / 3);
        for triple in tokens[..end].chunks(3) {
            let Some(action) = self.as_action(triple[0]) else {
                return Err(Feedback::Format);
            };
            let mut args = Vec::new();
            let mut padded = false;
            let mut shaped = true;
            for &t in &triple[1..] {
                if t == PAD {
                    padded = true;
                } else if let (Some(id), false) = (self.as_id(t), padded) {
                    args.push(id);
                } else {
                    shaped = false;
                }
            }
            if !shaped {
                return Err(Feedback::Format);
            }
            let known = args.iter().all(|&id| scene.object(id).is_some());
            if args.len() != action.arity() || !known {
                return Err(Feedback::InvalidCommand {
                    line: triple_text(action, &args, scene),
                });
            }
            steps.push(Step { action, args });
        }
        Ok(Plan::new(steps))
    }

    /// Token form of a feedback value. Invalid-command lines that do not
    /// parse back into an action and ids use PAD for the unreadable parts.
    pub fn encode_feedback(&self, feedback: &Feedback) -> Vec<Token> {
        match feedback {
            Feedback::Format => vec![FB_FORMAT],
            Feedback::InvalidCommand { line } => {
                let (action, ids) = read_line(line);
                let mut out = vec![FB_INVALID, action.map_or(PAD, |a| self.action(a))];
                for slot in 0..2 {
                    out.push(match ids.get(slot) {
                        Some(&id) if id < MAX_IDS => self.id(id),
                        _ => PAD,
                    });
                }
                out
            }
            Feedback::ExecutionError {
                step,
                action,
                args,
                reason,
            } => {
                let mut out = vec![FB_EXEC, self.number(*step)];
                self.step_tokens(
                    &Step {
                        action: *action,
                        args: args.clone(),
                    },
                    &mut out,
                );
                out.push(self.reason_kind(reason.kind()).expect("known kind"));
                out.push(reason.object().map_or(PAD, |o| self.id(o)));
                out.push(reason.state().map_or(PAD, |s| self.state(s)));
                out
            }
            Feedback::GoalReport {
                unmet_states,
                wrong_relations,
            } => {
                let mut out = vec![FB_GOAL];
                for &(o, s) in unmet_states {
                    out.extend([STATE, self.id(o), self.state(s)]);
                }
                for &(a, r, b) in wrong_relations {
                    out.extend([REL, self.id(a), self.relation(r), self.id(b)]);
                }
                out
            }
            Feedback::Success => vec![FB_SUCCESS],
        }
    }

    /// Inverse of [`encode_feedback`](Self::encode_feedback) over complete
    /// token groups; names in invalid-command lines are resolved in `scene`.
    pub fn decode_feedback(&self, tokens: &[Token], scene: &SceneGraph) -> Option<Feedback> {
        let (&head, rest) = tokens.split_first()?;
        match head {
            FB_FORMAT if rest.is_empty() => Some(Feedback::Format),
            FB_SUCCESS if rest.is_empty() => Some(Feedback::Success),
            FB_INVALID if rest.len() == 3 => {
                let action = self.as_action(rest[0]);
                let ids: Vec<ObjectId> = rest[1..].iter().filter_map(|&t| self.as_id(t)).collect();
                let line = match action {
                    Some(a) => triple_text(a, &ids, scene),
                    None => "[UNKNOWN]".to_string(),
                };
                Some(Feedback::InvalidCommand { line })
            }
            FB_EXEC if rest.len() == 7 => {
                let step = self.as_id(rest[0])? as usize;
                let action = self.as_action(rest[1])?;
                let mut args = Vec::new();
                for &t in &rest[2..4] {
                    match (t, self.as_id(t)) {
                        (PAD, _) => {}
                        (_, Some(id)) => args.push(id),
                        _ => return None,
                    }
                }
                if args.len() != action.arity() {
                    return None;
                }
                let kind = self.as_reason_kind(rest[4])?;
                let object = match rest[5] {
                    PAD => None,
                    t => Some(self.as_id(t)?),
                };
                let state = match rest[6] {
                    PAD => None,
                    t => Some(self.as_state(t)?),
                };
                let reason = FailReason::from_parts(kind, object, state)?;
                Some(Feedback::ExecutionError {
                    step,
                    action,
                    args,
                    reason,
                })
            }
            FB_GOAL => {
                let mut unmet_states = Vec::new();
                let mut wrong_relations = Vec::new();
                let mut i = 0;
                while i < rest.len() {
                    match rest[i] {
                        STATE if i + 3 <= rest.len() && wrong_relations.is_empty() => {
                            unmet_states.push((self.as_id(rest[i + 1])?, self.as_state(rest[i + 2])?));
                            i += 3;
                        }
                        REL if i + 4 <= rest.len() => {
                            wrong_relations.push((
                                self.as_id(rest[i + 1])?,
                                self.as_relation(rest[i + 2])?,
                                self.as_id(rest[i + 3])?,
                            ));
                            i += 4;
                        }
                        _ => return None,
                    }
                }
                if unmet_states.is_empty() && wrong_relations.is_empty() {
                    return None;
                }
                Some(Feedback::GoalReport {
                    unmet_states,
                    wrong_relations,
                })
            }
            _ => None,
        }
    }
}

fn position<T: PartialEq>(all: &[T], x: &T) -> usize {
    all.iter().position(|y| y == x).expect("catalog member")
}

fn triple_text(action: Action, args: &[ObjectId], scene: &SceneGraph) -> String {
    let mut line = format!("[{}]", action.name());
    for &id in args {
        line.push_str(&format!(" <{}> ({id})", scene.name_of(id).unwrap_or("unknown")));
    }
    line
}

/// Best-effort read of an `[ACTION] <name> (id)` line.
fn read_line(line: &str) -> (Option<Action>, Vec<ObjectId>) {
    let action = line
        .strip_prefix('[')
        .and_then(|l| l.split(']').next())
        .and_then(Action::from_name);
    let ids = line
        .split('(')
        .skip(1)
        .filter_map(|p| p.split(')').next()?.trim().parse().ok())
        .collect();
    (action, ids)
}
