use serde::{Deserialize, Serialize};

use super::plan::{Action, Plan, Step};
use super::scene::{Location, SceneGraph};
use super::{Capability, ObjectId, State, HAND_CAPACITY};

/// Why a step's preconditions failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "args")]
pub enum FailReason {
    NotClose(ObjectId),
    HandsFull,
    NotHolding(ObjectId),
    Incapable(ObjectId),
    /// The item is inside this closed container.
    Blocked(ObjectId),
    /// The object is in the named state, which forbids the action.
    WrongState(ObjectId, State),
    Sitting,
    NotSitting,
    AlreadyHeld(ObjectId),
    NotInRoom(ObjectId),
    UnknownObject(ObjectId),
}

impl FailReason {
    pub const KINDS: [&'static str; 11] = [
        "not_close",
        "hands_full",
        "not_holding",
        "incapable",
        "blocked",
        "wrong_state",
        "sitting",
        "not_sitting",
        "already_held",
        "not_in_room",
        "unknown_object",
    ];

    pub fn kind(&self) -> &'static str {
        let i = match self {
            FailReason::NotClose(_) => 0,
            FailReason::HandsFull => 1,
            FailReason::NotHolding(_) => 2,
            FailReason::Incapable(_) => 3,
            FailReason::Blocked(_) => 4,
            FailReason::WrongState(..) => 5,
            FailReason::Sitting => 6,
            FailReason::NotSitting => 7,
            FailReason::AlreadyHeld(_) => 8,
            FailReason::NotInRoom(_) => 9,
            FailReason::UnknownObject(_) => 10,
        };
        Self::KINDS[i]
    }

    /// The object the reason is about, if any.
    pub fn object(&self) -> Option<ObjectId> {
        match *self {
            FailReason::NotClose(o)
            | FailReason::NotHolding(o)
            | FailReason::Incapable(o)
            | FailReason::Blocked(o)
            | FailReason::WrongState(o, _)
            | FailReason::AlreadyHeld(o)
            | FailReason::NotInRoom(o)
            | FailReason::UnknownObject(o) => Some(o),
            FailReason::HandsFull | FailReason::Sitting | FailReason::NotSitting => None,
        }
    }

    pub fn state(&self) -> Option<State> {
        match *self {
            FailReason::WrongState(_, s) => Some(s),
            _ => None,
        }
    }

    pub fn from_parts(kind: &str, object: Option<ObjectId>, state: Option<State>) -> Option<Self> {
        Some(match (kind, object, state) {
            ("not_close", Some(o), None) => FailReason::NotClose(o),
            ("hands_full", None, None) => FailReason::HandsFull,
            ("not_holding", Some(o), None) => FailReason::NotHolding(o),
            ("incapable", Some(o), None) => FailReason::Incapable(o),
            ("blocked", Some(o), None) => FailReason::Blocked(o),
            ("wrong_state", Some(o), Some(s)) => FailReason::WrongState(o, s),
            ("sitting", None, None) => FailReason::Sitting,
            ("not_sitting", None, None) => FailReason::NotSitting,
            ("already_held", Some(o), None) => FailReason::AlreadyHeld(o),
            ("not_in_room", Some(o), None) => FailReason::NotInRoom(o),
            ("unknown_object", Some(o), None) => FailReason::UnknownObject(o),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: Step,
    pub failure: Option<FailReason>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub final_scene: SceneGraph,
    pub trace: Vec<TraceEntry>,
    /// Number of steps applied successfully.
    pub executed: usize,
    /// Index and reason of the first failing step.
    pub failure: Option<(usize, FailReason)>,
}

impl Execution {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Applies steps in order, stopping at the first failing precondition. The
/// input scene is not modified.
pub fn execute_plan(scene: &SceneGraph, plan: &Plan) -> Execution {
    let mut current = scene.clone();
    let mut trace = Vec::with_capacity(plan.steps.len());
    let mut failure = None;
    for (i, step) in plan.steps.iter().enumerate() {
        match apply_step(&mut current, step) {
            Ok(()) => trace.push(TraceEntry {
                step: step.clone(),
                failure: None,
            }),
            Err(reason) => {
                trace.push(TraceEntry {
                    step: step.clone(),
                    failure: Some(reason),
                });
                failure = Some((i, reason));
                break;
            }
        }
    }
    let executed = trace.len() - usize::from(failure.is_some());
    Execution {
        final_scene: current,
        trace,
        executed,
        failure,
    }
}

/// Applies one step in place. On failure the scene is left untouched.
pub fn apply_step(scene: &mut SceneGraph, step: &Step) -> Result<(), FailReason> {
    if step.args.len() != step.action.arity() {
        return Err(FailReason::Incapable(step.args.first().copied().unwrap_or(0)));
    }
    for &id in &step.args {
        if scene.object(id).is_none() {
            return Err(FailReason::UnknownObject(id));
        }
    }
    let ch = scene.character().clone();
    let close = |o: ObjectId| {
        if ch.close.contains(&o) || ch.holding.contains(&o) {
            Ok(())
        } else {
            Err(FailReason::NotClose(o))
        }
    };
    let obj = |o: ObjectId| scene.object(o).expect("validated above");
    let capable = |o: ObjectId, cap: Capability| {
        if obj(o).has(cap) {
            Ok(())
        } else {
            Err(FailReason::Incapable(o))
        }
    };
    let holding = |o: ObjectId| {
        if ch.holding.contains(&o) {
            Ok(())
        } else {
            Err(FailReason::NotHolding(o))
        }
    };
    let arg = |i: usize| step.args[i];

    match step.action {
        Action::Walk => {
            let o = arg(0);
            if ch.sitting_on.is_some() {
                return Err(FailReason::Sitting);
            }
            let room = scene.room_of(o).expect("objects belong to a room");
            let mut near: Vec<ObjectId> = vec![o];
            near.extend(scene.receptacle(o));
            near.extend(scene.contents(o));
            let c = scene.character_mut();
            c.room = room;
            c.close = near.into_iter().collect();
        }
        Action::Find => {
            let o = arg(0);
            if scene.room_of(o) != Some(ch.room) {
                return Err(FailReason::NotInRoom(o));
            }
            scene.character_mut().close.insert(o);
        }
        Action::Grab => {
            let o = arg(0);
            capable(o, Capability::Grabbable)?;
            if ch.holding.contains(&o) {
                return Err(FailReason::AlreadyHeld(o));
            }
            if ch.holding.len() >= HAND_CAPACITY {
                return Err(FailReason::HandsFull);
            }
            close(o)?;
            if let Some(c) = scene.blocking_container(o) {
                return Err(FailReason::Blocked(c));
            }
            scene.object_mut(o).expect("exists").location = Location::Held;
            scene.character_mut().holding.push(o);
        }
        Action::Open => {
            let o = arg(0);
            capable(o, Capability::CanOpen)?;
            close(o)?;
            if obj(o).is(State::Open) {
                return Err(FailReason::WrongState(o, State::Open));
            }
            if obj(o).is(State::On) {
                return Err(FailReason::WrongState(o, State::On));
            }
            swap_state(scene, o, State::Closed, State::Open);
        }
        Action::Close => {
            let o = arg(0);
            capable(o, Capability::CanOpen)?;
            close(o)?;
            if obj(o).is(State::Closed) {
                return Err(FailReason::WrongState(o, State::Closed));
            }
            swap_state(scene, o, State::Open, State::Closed);
        }
        Action::SwitchOn => {
            let o = arg(0);
            capable(o, Capability::HasSwitch)?;
            close(o)?;
            let object = obj(o);
            if object.is(State::On) {
                return Err(FailReason::WrongState(o, State::On));
            }
            if object.is(State::PluggedOut) {
                return Err(FailReason::WrongState(o, State::PluggedOut));
            }
            if object.is(State::Open) {
                return Err(FailReason::WrongState(o, State::Open));
            }
            let is_sink = object.archetype == super::Archetype::Sink;
            swap_state(scene, o, State::Off, State::On);
            if is_sink {
                for item in scene.contents(o) {
                    if scene.has_state(item, State::Dirty) {
                        swap_state(scene, item, State::Dirty, State::Clean);
                    }
                }
            }
        }
        Action::SwitchOff => {
            let o = arg(0);
            capable(o, Capability::HasSwitch)?;
            close(o)?;
            if obj(o).is(State::Off) {
                return Err(FailReason::WrongState(o, State::Off));
            }
            swap_state(scene, o, State::On, State::Off);
        }
        Action::PutBack => {
            let (o, s) = (arg(0), arg(1));
            holding(o)?;
            capable(s, Capability::Surface)?;
            close(s)?;
            release(scene, o, Location::OnTop(s));
        }
        Action::PutIn => {
            let (o, c) = (arg(0), arg(1));
            holding(o)?;
            capable(c, Capability::Container)?;
            close(c)?;
            if obj(c).is(State::Closed) {
                return Err(FailReason::WrongState(c, State::Closed));
            }
            release(scene, o, Location::Inside(c));
        }
        Action::PutObjBack => {
            let o = arg(0);
            holding(o)?;
            let home = obj(o).home.ok_or(FailReason::Incapable(o))?;
            close(home)?;
            if obj(home).is(State::Closed) {
                return Err(FailReason::WrongState(home, State::Closed));
            }
            let location = if obj(home).has(Capability::Container) {
                Location::Inside(home)
            } else {
                Location::OnTop(home)
            };
            release(scene, o, location);
        }
        Action::Sit => {
            let o = arg(0);
            capable(o, Capability::Sittable)?;
            if ch.sitting_on.is_some() {
                return Err(FailReason::Sitting);
            }
            close(o)?;
            scene.character_mut().sitting_on = Some(o);
        }
        Action::StandUp => {
            if ch.sitting_on.is_none() {
                return Err(FailReason::NotSitting);
            }
            scene.character_mut().sitting_on = None;
        }
        Action::PlugIn => {
            let o = arg(0);
            if !obj(o).pluggable() {
                return Err(FailReason::Incapable(o));
            }
            close(o)?;
            if obj(o).is(State::PluggedIn) {
                return Err(FailReason::WrongState(o, State::PluggedIn));
            }
            swap_state(scene, o, State::PluggedOut, State::PluggedIn);
        }
        Action::PlugOut => {
            let o = arg(0);
            if !obj(o).pluggable() {
                return Err(FailReason::Incapable(o));
            }
            close(o)?;
            if obj(o).is(State::PluggedOut) {
                return Err(FailReason::WrongState(o, State::PluggedOut));
            }
            swap_state(scene, o, State::PluggedIn, State::PluggedOut);
            if scene.has_state(o, State::On) {
                swap_state(scene, o, State::On, State::Off);
            }
        }
    }
    Ok(())
}

fn swap_state(scene: &mut SceneGraph, id: ObjectId, from: State, to: State) {
    let states = &mut scene.object_mut(id).expect("exists").states;
    states.remove(&from);
    states.insert(to);
}

fn release(scene: &mut SceneGraph, item: ObjectId, location: Location) {
    scene.object_mut(item).expect("exists").location = location;
    let c = scene.character_mut();
    c.holding.retain(|&h| h != item);
    c.close.insert(item);
}
