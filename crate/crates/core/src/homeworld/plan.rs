//! Canonical plan text: one `[ACTION] <name> (id)` line per step, an optional
//! second `<name> (id)` argument, and a closing `[END]` line.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::feedback::Feedback;
use super::{ObjectId, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Walk,
    Find,
    Grab,
    Open,
    Close,
    #[serde(rename = "SWITCHON")]
    SwitchOn,
    #[serde(rename = "SWITCHOFF")]
    SwitchOff,
    #[serde(rename = "PUTBACK")]
    PutBack,
    #[serde(rename = "PUTIN")]
    PutIn,
    #[serde(rename = "PUTOBJBACK")]
    PutObjBack,
    Sit,
    #[serde(rename = "STANDUP")]
    StandUp,
    #[serde(rename = "PLUGIN")]
    PlugIn,
    #[serde(rename = "PLUGOUT")]
    PlugOut,
}

impl Action {
    pub const ALL: [Action; 14] = [
        Action::Walk,
        Action::Find,
        Action::Grab,
        Action::Open,
        Action::Close,
        Action::SwitchOn,
        Action::SwitchOff,
        Action::PutBack,
        Action::PutIn,
        Action::PutObjBack,
        Action::Sit,
        Action::StandUp,
        Action::PlugIn,
        Action::PlugOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Action::Walk => "WALK",
            Action::Find => "FIND",
            Action::Grab => "GRAB",
            Action::Open => "OPEN",
            Action::Close => "CLOSE",
            Action::SwitchOn => "SWITCHON",
            Action::SwitchOff => "SWITCHOFF",
            Action::PutBack => "PUTBACK",
            Action::PutIn => "PUTIN",
            Action::PutObjBack => "PUTOBJBACK",
            Action::Sit => "SIT",
            Action::StandUp => "STANDUP",
            Action::PlugIn => "PLUGIN",
            Action::PlugOut => "PLUGOUT",
        }
    }

    pub fn from_name(name: &str) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.name() == name)
    }

    /// Number of object arguments: 0, 1 or 2.
    pub fn arity(self) -> usize {
        match self {
            Action::StandUp => 0,
            Action::PutBack | Action::PutIn => 2,
            _ => 1,
        }
    }
}

/// One plan step; `args.len() == action.arity()`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub action: Action,
    pub args: Vec<ObjectId>,
}

impl Step {
    pub fn new(action: Action, args: &[ObjectId]) -> Step {
        assert_eq!(args.len(), action.arity(), "arity of {}", action.name());
        Step {
            action,
            args: args.to_vec(),
        }
    }

    /// Canonical single-line text, names resolved in `scene`.
    pub fn render(&self, scene: &SceneGraph) -> String {
        let mut line = format!("[{}]", self.action.name());
        for &id in &self.args {
            let name = scene.name_of(id).unwrap_or("unknown");
            line.push_str(&format!(" <{name}> ({id})"));
        }
        line
    }
}

/// A parsed, END-terminated plan. Unterminated output never becomes a
/// `Plan`; it is reported as a format error instead.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<Step>,
}

impl Plan {
    pub fn new(steps: Vec<Step>) -> Plan {
        Plan { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Lines of `plan` followed by `[END]`.
pub fn render_plan(plan: &Plan, scene: &SceneGraph) -> String {
    let mut out = String::new();
    for step in &plan.steps {
        out.push_str(&step.render(scene));
        out.push('\n');
    }
    out.push_str("[END]");
    out
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn line_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\[([A-Za-z_]+)\](.*)$").expect("static regex"))
}

fn arg_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*<([a-z_]+)>\s*\((\d+)\)").expect("static regex"))
}

/// Parses canonical plan text against `scene`.
///
/// Lines are checked in order and the first problem wins: a line that is not
/// an `[ACTION] ...` line is a format error; an unknown action, wrong arity,
/// or an argument that does not name an object in the scene is an invalid
/// command. Text must end with `[END]`; nothing may follow it.
pub fn parse_plan(text: &str, scene: &SceneGraph) -> Result<Plan, Feedback> {
    let mut steps = Vec::new();
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    for line in lines.by_ref() {
        let Some(caps) = line_pattern().captures(line) else {
            return Err(Feedback::Format);
        };
        let name = &caps[1];
        if name == "END" {
            if !caps[2].trim().is_empty() {
                return Err(Feedback::Format);
            }
            return match lines.next() {
                None => Ok(Plan { steps }),
                Some(_) => Err(Feedback::Format),
            };
        }
        let invalid = || Feedback::InvalidCommand {
            line: line.to_string(),
        };
        let action = Action::from_name(name).ok_or_else(invalid)?;
        let mut rest = &caps[2];
        let mut args = Vec::new();
        while let Some(arg) = arg_pattern().captures(rest) {
            let id: ObjectId = arg[2].parse().map_err(|_| invalid())?;
            let object = scene.object(id).ok_or_else(invalid)?;
            if object.name() != &arg[1] {
                return Err(invalid());
            }
            args.push(id);
            rest = &rest[arg.get(0).expect("whole match").end()..];
        }
        if !rest.trim().is_empty() || args.len() != action.arity() {
            return Err(invalid());
        }
        steps.push(Step { action, args });
    }
    Err(Feedback::Format)
}
