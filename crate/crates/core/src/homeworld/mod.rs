//! Deterministic household environment: procedurally generated scene graphs,
//! a fourteen-action executor, goal checking, feedback rendering, metrics and
//! task generation with ground-truth plans.
//!
//! Scenes are plain values and execution is pure, so any number of episodes
//! can run concurrently on separate copies.
//!
//! # Action table
//!
//! | action | args | preconditions | effects |
//! |---|---|---|---|
//! | WALK | o | standing | room := room(o); CLOSE := {o, receptacle(o), contents(o)} |
//! | FIND | o | o in the character's room | CLOSE += o |
//! | GRAB | o | grabbable, close, not held, < 2 held, not in a closed container | HOLDS o |
//! | OPEN | o | can open, close, CLOSED, not ON | OPEN |
//! | CLOSE | o | can open, close, OPEN | CLOSED |
//! | SWITCHON | o | switch, close, OFF, plugged in if pluggable, CLOSED if it opens | ON; a sink cleans dirty items inside it |
//! | SWITCHOFF | o | switch, close, ON | OFF |
//! | PUTBACK | o, s | holds o, s surface, close to s | o ON_TOP s |
//! | PUTIN | o, c | holds o, c container, close to c, c not CLOSED | o INSIDE c |
//! | PUTOBJBACK | o | holds o, close to its home receptacle, receptacle accessible | o at home |
//! | SIT | o | sittable, close, standing | SITTING, ON_TOP o |
//! | STANDUP | | sitting | standing |
//! | PLUGIN | o | pluggable, close, PLUGGED_OUT | PLUGGED_IN |
//! | PLUGOUT | o | pluggable, close, PLUGGED_IN | PLUGGED_OUT, OFF |
//!
//! Only the first failing step is reported. Other actions can be added by
//! extending [`Action`] together with the table in [`exec`].

pub mod catalog;
pub mod dataset;
pub mod exec;
pub mod feedback;
pub mod goals;
pub mod plan;
pub mod scene;
pub mod tasks;


use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use catalog::{Archetype, RoomKind};
pub use dataset::{
    read_dataset, split_dataset, write_dataset, DatasetRecord, Split, SplitAssignment,
};
pub use exec::{apply_step, execute_plan, Execution, FailReason};
pub use feedback::{assess, Assessment, Feedback, FeedbackCategory};
pub use goals::{evaluate_goals, GoalEvaluation, GoalSpec};
pub use plan::{parse_plan, render_plan, Action, Plan, Step};
pub use scene::{generate_scene, Character, Edge, Location, Object, Room, SceneGraph, SizeClass};
pub use tasks::{generate_task, generate_tasks, ground_truth, Family, TaskKind, TaskRecord};

/// Stable per-scene identifier shared by rooms, objects and the character.
pub type ObjectId = u32;

/// Ids live in `0..MAX_IDS`, one token bucket each.
pub const MAX_IDS: ObjectId = 64;

/// Hand capacity of the character.
pub const HAND_CAPACITY: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum State {
    Open,
    Closed,
    On,
    Off,
    Dirty,
    Clean,
    PluggedIn,
    PluggedOut,
    Sitting,
}

impl State {
    pub const ALL: [State; 9] = [
        State::Open,
        State::Closed,
        State::On,
        State::Off,
        State::Dirty,
        State::Clean,
        State::PluggedIn,
        State::PluggedOut,
        State::Sitting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            State::Open => "OPEN",
            State::Closed => "CLOSED",
            State::On => "ON",
            State::Off => "OFF",
            State::Dirty => "DIRTY",
            State::Clean => "CLEAN",
            State::PluggedIn => "PLUGGED_IN",
            State::PluggedOut => "PLUGGED_OUT",
            State::Sitting => "SITTING",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Capability {
    Grabbable,
    CanOpen,
    HasSwitch,
    Surface,
    Container,
    Sittable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Relation {
    Inside,
    OnTop,
    Close,
    Holds,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::Inside, Relation::OnTop, Relation::Close, Relation::Holds];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Inside => "INSIDE",
            Relation::OnTop => "ON_TOP",
            Relation::Close => "CLOSE",
            Relation::Holds => "HOLDS",
        }
    }
}

#[derive(Debug, Error)]
pub enum HomeError {
    #[error("goal references unknown id {0}")]
    DanglingGoal(ObjectId),
    #[error("goal specification is empty")]
    EmptyGoal,
    #[error("no achievable task after {draws} template draws")]
    NoAchievableTask { draws: usize },
    #[error("dataset needs at least {needed} {what}, found {found}")]
    InsufficientDiversity {
        what: &'static str,
        needed: usize,
        found: usize,
    },
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
